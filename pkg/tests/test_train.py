import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biasclf.data import gen_synthetic
from biasclf.decompose import bias_labels
from biasclf.metrics import accuracy
from biasclf.net import Dense, Network, grad_params, make_mlp
from biasclf.train import (
    TrainConfig,
    TrainingDiverged,
    pgd_inner_max,
    train,
    train_adversarial,
    train_bias,
    train_normal,
)


def blobs():
    return gen_synthetic("blobs", 2, 2, 400, seed=7)


def params_snapshot(net):
    return [a.copy() for _, _, a in net.params()]


def params_equal(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


class TestInnerMax:
    def test_eps_zero_identity(self, rng):
        net = make_mlp((3,), [5], 2, seed=0)
        x = rng.uniform(0, 1, (4, 3))
        out = pgd_inner_max(net, x, np.zeros(4, dtype=int), 0.0, 5, 0.1)
        assert np.array_equal(out, x)

    def test_zero_steps_identity(self, rng):
        net = make_mlp((3,), [5], 2, seed=0)
        x = rng.uniform(0, 1, (4, 3))
        out = pgd_inner_max(net, x, np.zeros(4, dtype=int), 0.1, 0, 0.1)
        assert np.array_equal(out, x)

    def test_monotone_toy_saturates_ball(self):
        # ascending the first logit (= 2x on the active region) has sign +1
        # throughout, so three steps of 0.05 pin x at the 0.1 ball boundary
        net = Network([Dense([[2.0], [0.0]], [0.0, 0.0])], (1,), 2)
        out = pgd_inner_max(net, np.array([[0.5]]), np.array([0]), 0.1, 3, 0.05,
                            loss_spec=("logit", 0))
        assert out[0, 0] == pytest.approx(0.6)

    @settings(max_examples=30, deadline=None)
    @given(eps=st.floats(0.0, 0.4), steps=st.integers(0, 6), seed=st.integers(0, 100))
    def test_never_leaves_ball_or_cube(self, eps, steps, seed):
        r = np.random.default_rng(seed)
        net = make_mlp((4,), [6], 3, seed=1)
        x = r.uniform(0, 1, (3, 4))
        y = r.integers(0, 3, 3)
        out = pgd_inner_max(net, x, y, eps, steps, 0.3 * eps if eps else 0.0)
        assert np.max(np.abs(out - x)) <= eps + 1e-12
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestModes:
    def test_normal_reaches_blobs_baseline(self):
        ds = blobs()
        net = make_mlp((2,), [16], 2, seed=1)
        net, hist = train_normal(net, ds, TrainConfig(epochs=20, mode="normal", seed=3))
        assert hist[-1]["full_acc"] >= 0.99

    def test_eps_zero_adversarial_equals_normal(self):
        ds = blobs()
        cfg_n = TrainConfig(epochs=3, mode="normal", seed=5)
        net_a = make_mlp((2,), [8], 2, seed=2)
        net_b = make_mlp((2,), [8], 2, seed=2)
        train(net_a, ds, cfg_n)
        # eps=0 with the adversarial batch path degenerates to the normal one
        cfg_adv = TrainConfig(epochs=3, mode="adversarial", eps=1e-12, inner_steps=0, seed=5)
        train(net_b, ds, cfg_adv)
        assert params_equal(params_snapshot(net_a), params_snapshot(net_b))

    def test_adversarial_needs_eps(self):
        with pytest.raises(ValueError):
            train_adversarial(make_mlp((2,), [4], 2, seed=0), blobs(),
                              TrainConfig(epochs=1, mode="adversarial", eps=0.0))

    def test_bias_mode_learns_blobs(self):
        # pinned sanity run: in 8-d the region structure survives training and
        # the first-degree part ends up fully anti-correlated (w_acc -> 0)
        ds = gen_synthetic("blobs", 8, 2, 400, seed=7)
        net = make_mlp((8,), [32, 16], 2, seed=4)
        cfg = TrainConfig(epochs=100, mode="bias", eps=0.12, inner_steps=5, gamma=10.0,
                          seed=6, learning_rate=0.02)
        net, hist = train_bias(net, ds, cfg)
        assert hist[-1]["bias_acc"] >= 0.95
        assert np.mean(bias_labels(net, ds.inputs) == ds.labels) >= 0.95
        assert hist[-1]["w_acc"] <= 0.2

    def test_adversarial_beats_normal_under_attack(self):
        # robust accuracy gap of at least 20 points; moons is the toy where a
        # normally trained boundary hugs the data and folds under attack
        from biasclf.attacks import pgd_linf_batch

        ds = gen_synthetic("moons", 2, 2, 500, seed=7)
        eval_ds = gen_synthetic("moons", 2, 2, 300, seed=8)
        eps = 0.15
        net_n = make_mlp((2,), [24, 12], 2, seed=3)
        train_normal(net_n, ds, TrainConfig(epochs=60, mode="normal", seed=3))
        net_a = make_mlp((2,), [24, 12], 2, seed=3)
        train_adversarial(net_a, ds, TrainConfig(epochs=60, mode="adversarial",
                                                 eps=eps, inner_steps=7, seed=3))

        def robust_acc(net):
            correct = np.argmax(net.logits_batch(eval_ds.inputs), 1) == eval_ds.labels
            outs = pgd_linf_batch(net, eval_ds.inputs[correct], eval_ds.labels[correct],
                                  eps=eps, steps=10, alpha=eps / 4)
            survived = sum(1 for o in outs if not o.success)
            return survived / len(eval_ds)

        assert robust_acc(net_a) - robust_acc(net_n) >= 0.20


class TestBiasGradients:
    def test_large_gamma_matches_adversarial_direction(self, rng):
        # with gamma >> 1 the combined gradient is the full-model term
        net = make_mlp((4,), [8, 6], 3, seed=7)
        x = rng.uniform(0, 1, (16, 4))
        y = rng.integers(0, 3, 16)
        gamma = 1e4
        g_comb = grad_params(net, x, y, objective="combined", gamma=gamma)
        g_full = grad_params(net, x, y, objective="full")
        for k in g_full:
            num = np.linalg.norm(g_comb[k] - gamma * g_full[k])
            den = np.linalg.norm(gamma * g_full[k]) + 1e-30
            assert num / den < 1e-3

    def test_bias_gradient_finite_difference(self, rng):
        # frozen-gate parameter gradient of the bias loss vs central differences
        from biasclf.net import loss_ce

        net = make_mlp((3,), [6, 5], 2, seed=8)
        x = rng.uniform(0, 1, (4, 3))
        y = rng.integers(0, 2, 4)
        grads = grad_params(net, x, y, objective="bias")
        gates = net.run(x).gates

        def bias_loss():
            frozen = net.run(np.zeros_like(x), frozen=gates)
            return float(np.mean(loss_ce(frozen.logits, y)))

        h = 1e-6
        for _ in range(8):
            i, name, arr = net.params()[rng.integers(0, len(net.params()))]
            flat = arr.ravel()
            j = int(rng.integers(0, flat.size))
            orig = flat[j]
            flat[j] = orig + h
            lp = bias_loss()
            flat[j] = orig - h
            lm = bias_loss()
            flat[j] = orig
            fd = (lp - lm) / (2 * h)
            assert abs(grads[(i, name)].ravel()[j] - fd) <= 1e-4 * max(abs(fd), 1e-3)


class TestDeterminismAndLogging:
    @pytest.mark.parametrize("mode,eps", [("normal", 0.0), ("adversarial", 0.08), ("bias", 0.08)])
    def test_equal_seeds_bit_identical(self, mode, eps):
        ds = blobs()
        cfg = TrainConfig(epochs=3, mode=mode, eps=eps, inner_steps=3, seed=11)
        nets = []
        for _ in range(2):
            net = make_mlp((2,), [8], 2, seed=9)
            train(net, ds, cfg)
            nets.append(params_snapshot(net))
        assert params_equal(nets[0], nets[1])

    def test_csv_log_format(self):
        ds = blobs()
        buf = io.StringIO()
        net = make_mlp((2,), [6], 2, seed=1)
        train(net, ds, TrainConfig(epochs=2, mode="normal", seed=1), log_stream=buf)
        lines = buf.getvalue().strip().splitlines()
        assert lines[0].startswith("epoch,mean_loss,full_acc,bias_acc,w_acc")
        assert len(lines) == 3

    def test_divergence_aborts_with_diagnostic(self):
        ds = blobs()
        net = make_mlp((2,), [8], 2, seed=1)
        net.layers[0].w[0, 0] = 1e300  # first forward overflows, grads go non-finite
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(TrainingDiverged):
                train(net, ds, TrainConfig(epochs=2, mode="normal", seed=1))

    def test_full_accuracy_tracks_metric_helper(self):
        ds = blobs()
        net = make_mlp((2,), [8], 2, seed=2)
        _, hist = train(net, ds, TrainConfig(epochs=2, mode="normal", seed=2))
        assert hist[-1]["full_acc"] == pytest.approx(accuracy(net, ds, "full"))
