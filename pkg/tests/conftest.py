import numpy as np
import pytest

from biasclf.net import Conv2d, Dense, MaxPool2, Network


def random_mlp(rng, n_in=None, m=None, depth=None, width=None, scale=1.0):
    n_in = n_in or int(rng.integers(2, 7))
    m = m or int(rng.integers(2, 5))
    depth = depth if depth is not None else int(rng.integers(1, 4))
    layers = []
    d = n_in
    for _ in range(depth):
        w = width or int(rng.integers(3, 9))
        layers.append(Dense(rng.standard_normal((w, d)) * scale, rng.standard_normal(w) * scale))
        d = w
    layers.append(Dense(rng.standard_normal((m, d)) * scale, rng.standard_normal(m) * scale))
    return Network(layers, (n_in,), m)


def random_convnet(rng, side=6, m=3):
    oc = int(rng.integers(2, 4))
    layers = [
        Conv2d(rng.standard_normal((oc, 1, 3, 3)) * 0.7, rng.standard_normal(oc) * 0.3, padding=1),
        MaxPool2(),
    ]
    flat = oc * (side // 2) * (side // 2)
    hidden = int(rng.integers(4, 9))
    layers.append(Dense(rng.standard_normal((hidden, flat)) * 0.5, rng.standard_normal(hidden) * 0.3))
    layers.append(Dense(rng.standard_normal((m, hidden)) * 0.5, rng.standard_normal(m) * 0.3))
    return Network(layers, (1, side, side), m)


def random_net(rng):
    if rng.random() < 0.25:
        return random_convnet(rng)
    return random_mlp(rng)


def interior_point(rng, net, margin=1e-6):
    """A point in [0,1]^n off every gate boundary (resampled if needed)."""
    for _ in range(50):
        x = rng.uniform(0.0, 1.0, size=net.n)
        trace = net.run(x)
        safe = True
        for layer, inp, gate in zip(net.layers, trace.inputs, trace.gates):
            if gate is None or layer.kind == "maxpool2":
                continue
            pre, _ = layer.fwd(inp)
            if np.min(np.abs(pre)) < margin:
                safe = False
                break
        if safe:
            return x
    return x


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
