import numpy as np
import pytest

from biasclf.net import (
    Dense,
    Network,
    ShapeError,
    SgdMomentum,
    grad_params,
    loss_ce,
    make_convnet,
    make_mlp,
    sgd_step,
)

from conftest import interior_point, random_net


def one_unit_net():
    # hidden: relu(x - 0.5), output: 2*h + 1
    return Network([Dense([[1.0]], [-0.5]), Dense([[2.0]], [1.0])], (1,), 1)


class TestForward:
    def test_hand_example_active(self):
        assert one_unit_net().forward([1.0]) == pytest.approx([2.0])

    def test_hand_example_dead(self):
        assert one_unit_net().forward([0.2]) == pytest.approx([1.0])

    def test_zero_weights_give_bias(self, rng):
        net = Network([Dense(np.zeros((3, 4)), [1.0, -2.0, 0.5])], (4,), 3)
        for _ in range(5):
            x = rng.uniform(0, 1, 4)
            assert np.array_equal(net.forward(x), [1.0, -2.0, 0.5])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            one_unit_net().forward([1.0, 2.0])

    def test_determinism_bit_identical(self, rng):
        net = make_convnet((1, 6, 6), [3], [8], 4, seed=3)
        x = rng.uniform(0, 1, 36)
        a = net.forward(x)
        b = net.forward(x.copy())
        assert np.array_equal(a, b)

    def test_concurrent_evaluation_safe(self, rng):
        from concurrent.futures import ThreadPoolExecutor

        net = make_mlp((6,), [12, 8], 3, seed=5)
        xs = rng.uniform(0, 1, (64, 6))
        serial = [net.forward(x) for x in xs]
        with ThreadPoolExecutor(max_workers=8) as pool:
            threaded = list(pool.map(net.forward, xs))
        for a, b in zip(serial, threaded):
            assert np.array_equal(a, b)


class TestPattern:
    def test_mask_active(self):
        _, pat = one_unit_net().forward_with_pattern([1.0])
        assert pat.gates[0].tolist() == [True]

    def test_mask_dead_and_boundary(self):
        _, pat = one_unit_net().forward_with_pattern([0.2])
        assert pat.gates[0].tolist() == [False]
        # pre-activation exactly 0 counts as inactive
        _, pat0 = one_unit_net().forward_with_pattern([0.5])
        assert pat0.gates[0].tolist() == [False]

    def test_logits_match_forward(self, rng):
        for _ in range(10):
            net = random_net(rng)
            x = rng.uniform(0, 1, net.n)
            logits, _ = net.forward_with_pattern(x)
            assert np.array_equal(logits, net.forward(x))

    def test_repeat_pattern_identical(self, rng):
        net = random_net(rng)
        x = rng.uniform(0, 1, net.n)
        _, p1 = net.forward_with_pattern(x)
        _, p2 = net.forward_with_pattern(x)
        assert p1 == p2


class TestLoss:
    def test_uniform_two_class(self):
        assert loss_ce([0.0, 0.0], 1) == pytest.approx(np.log(2))

    def test_confident_correct(self):
        assert loss_ce([10.0, 0.0], 0) == pytest.approx(4.5398899e-05, rel=1e-6)

    def test_confident_wrong(self):
        assert loss_ce([10.0, 0.0], 1) == pytest.approx(10.0000454, rel=1e-8)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            loss_ce([0.0, 0.0], 2)

    def test_nonnegative(self, rng):
        for _ in range(20):
            logits = rng.standard_normal(5)
            assert loss_ce(logits, int(rng.integers(0, 5))) >= 0.0


class TestGradInput:
    def test_hand_example(self):
        net = one_unit_net()
        assert net.grad_input([1.0], ("logit", 0)) == pytest.approx([2.0])
        assert net.grad_input([0.2], ("logit", 0)) == pytest.approx([0.0])

    def test_finite_difference_sweep(self, rng):
        # 100 random (net, x) pairs off gate boundaries, float64, 1e-4 relative
        h = 1e-6
        for _ in range(100):
            net = random_net(rng)
            x = interior_point(rng, net)
            y = int(rng.integers(0, net.m))
            g = net.grad_input(x, ("loss", y))
            fd = np.zeros_like(x)
            for j in range(net.n):
                xp, xm = x.copy(), x.copy()
                xp[j] += h
                xm[j] -= h
                fd[j] = (loss_ce(net.forward(xp), y) - loss_ce(net.forward(xm), y)) / (2 * h)
            denom = max(np.max(np.abs(fd)), 1e-8)
            assert np.max(np.abs(g - fd)) / denom < 1e-4

    def test_piecewise_linearity_along_direction(self, rng):
        # F(x + t*d) is exactly affine in t while the pattern stays constant
        for _ in range(20):
            net = random_net(rng)
            x = rng.uniform(0.2, 0.8, net.n)
            d = rng.standard_normal(net.n)
            _, pat0 = net.forward_with_pattern(x)
            ts = np.linspace(0.0, 0.02, 10)
            pts = [x + t * d for t in ts]
            if not all(net.forward_with_pattern(p)[1] == pat0 for p in pts):
                continue
            f0 = net.forward(pts[0])
            f1 = net.forward(pts[-1])
            for t, p in zip(ts, pts):
                lam = t / ts[-1]
                interp = (1 - lam) * f0 + lam * f1
                assert np.max(np.abs(net.forward(p) - interp)) < 1e-9


class TestGradParams:
    def test_single_sample_equals_batch_of_one(self, rng):
        net = random_net(rng)
        x = rng.uniform(0, 1, (1, net.n))
        y = np.array([int(rng.integers(0, net.m))])
        g1 = grad_params(net, x, y)
        g2 = grad_params(net, np.vstack([x, x]), np.repeat(y, 2))
        for k in g1:
            assert np.allclose(g1[k], g2[k], atol=1e-12)

    def test_empty_batch_rejected(self, rng):
        net = random_net(rng)
        with pytest.raises(ValueError):
            grad_params(net, np.zeros((0, net.n)), np.zeros(0, dtype=int))

    def test_finite_difference_spot_checks(self, rng):
        h = 1e-6
        for _ in range(10):
            net = random_net(rng)
            xb = np.vstack([interior_point(rng, net) for _ in range(3)])
            yb = rng.integers(0, net.m, 3)
            grads = grad_params(net, xb, yb)

            def batch_loss():
                return float(np.mean(loss_ce(net.logits_batch(xb), yb)))

            for _ in range(5):
                i, name, arr = net.params()[rng.integers(0, len(net.params()))]
                flat = arr.ravel()
                j = int(rng.integers(0, flat.size))
                orig = flat[j]
                flat[j] = orig + h
                lp = batch_loss()
                flat[j] = orig - h
                lm = batch_loss()
                flat[j] = orig
                fd = (lp - lm) / (2 * h)
                got = grads[(i, name)].ravel()[j]
                assert abs(got - fd) <= 1e-3 * max(abs(fd), 1e-4)

    def test_saturated_batch_has_tiny_gradient(self):
        net = Network([Dense([[100.0], [-100.0]], [0.0, 0.0])], (1,), 2)
        g = grad_params(net, np.array([[1.0]]), np.array([0]))
        assert all(np.max(np.abs(v)) < 1e-12 for v in g.values())


class TestSgd:
    def test_zero_lr_rejected_but_tiny_ok(self, rng):
        with pytest.raises(ValueError):
            SgdMomentum(0.0)
        net = random_net(rng)
        before = [a.copy() for _, _, a in net.params()]
        grads = {(i, n): np.zeros_like(a) for i, n, a in net.params()}
        sgd_step(net, grads, 1e-30)
        for (_i, _n, a), b in zip(net.params(), before):
            assert np.array_equal(a, b)

    def test_plain_step(self):
        net = Network([Dense([[1.0]], [0.0])], (1,), 1)
        grads = {(0, "w"): np.array([[2.0]]), (0, "b"): np.array([0.5])}
        sgd_step(net, grads, learning_rate=0.1, momentum=0.0)
        assert net.layers[0].w[0, 0] == pytest.approx(1.0 - 0.1 * 2.0)
        assert net.layers[0].b[0] == pytest.approx(-0.05)

    def test_momentum_recurrence(self):
        net = Network([Dense([[1.0]], [0.0])], (1,), 1)
        g1 = {(0, "w"): np.array([[1.0]]), (0, "b"): np.array([0.0])}
        g2 = {(0, "w"): np.array([[3.0]]), (0, "b"): np.array([0.0])}
        mu, lr = 0.9, 0.1
        vel = sgd_step(net, g1, lr, mu)
        sgd_step(net, g2, lr, mu, velocity=vel)
        expect = 1.0 - lr * 1.0 - lr * (mu * 1.0 + 3.0)
        assert net.layers[0].w[0, 0] == pytest.approx(expect)

    def test_nan_grad_aborts(self, rng):
        net = random_net(rng)
        grads = {(0, "w"): np.full_like(net.layers[0].w, np.nan),
                 (0, "b"): np.zeros_like(net.layers[0].b)}
        with pytest.raises(FloatingPointError):
            SgdMomentum(0.1).step(net, grads)


class TestSerialization:
    def test_round_trip_value_exact(self, rng):
        import json

        for _ in range(10):
            net = random_net(rng)
            doc = json.loads(json.dumps(net.to_dict()))
            loaded = Network.from_dict(doc)
            for _ in range(10):
                x = rng.uniform(0, 1, net.n)
                assert np.array_equal(net.forward(x), loaded.forward(x))

    def test_bad_version_rejected(self):
        doc = one_unit_net().to_dict()
        doc["format_version"] = 99
        with pytest.raises(ValueError):
            Network.from_dict(doc)


class TestConstruction:
    def test_shape_chain_enforced(self):
        with pytest.raises(ShapeError):
            Network([Dense(np.zeros((3, 2)), np.zeros(3)), Dense(np.zeros((2, 4)), np.zeros(2))], (2,), 2)

    def test_final_width_must_match(self):
        with pytest.raises(ShapeError):
            Network([Dense(np.zeros((3, 2)), np.zeros(3))], (2,), 2)

    def test_nonfinite_params_rejected(self):
        with pytest.raises(FloatingPointError):
            Network([Dense([[np.inf]], [0.0])], (1,), 1)

    def test_maxpool_tie_breaks_to_lowest_flat_index(self):
        from biasclf.net import MaxPool2

        net = make_convnet((1, 4, 4), [1], [], 2, seed=0)
        pool = [l for l in net.layers if isinstance(l, MaxPool2)][0]
        x = np.zeros((1, pool.in_shape[0] * pool.in_shape[1] * pool.in_shape[2]))
        sel = pool.select(x)  # all equal: every window picks its lowest flat index
        c, h, w = pool.in_shape
        oh, ow = pool.out_shape[1], pool.out_shape[2]
        expect = []
        for ci in range(c):
            for yy in range(oh):
                for xx in range(ow):
                    expect.append((ci * h + 2 * yy) * w + 2 * xx)
        assert sel[0].tolist() == expect
