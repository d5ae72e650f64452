"""Exact affine decomposition of a ReLU network at a point.

On the linear region containing x the network computes F(x) = W_x x + B_x.
W_x comes out of one backward pass per logit; B_x is the subtraction
F(x) - W_x x. An independent route to B_x (propagating only the bias vectors
through the gated linear maps, i.e. re-running the network from the zero input
with the gates frozen) is kept as a cross-check oracle; the subtraction route
is the primary implementation everywhere, including the batched label helpers.
"""

from __future__ import annotations

import numpy as np

from .net import ActivationPattern, Dense, Network, ShapeError


class AffineDecomposition:
    """The pair (W_x, B_x) with F(x) = W_x x + B_x, anchored at one input."""

    def __init__(self, w_x, b_x, pattern, at_point):
        self.w_x = w_x
        self.b_x = b_x
        self.pattern = pattern
        self.at_point = at_point

    def reconstruct(self):
        return self.w_x @ self.at_point + self.b_x


def _bias_host(net):
    # A linear augmentation shares its base's bias part exactly; the wrapper
    # advertises the base through this hook.
    return getattr(net, "bias_base", net)


def _jacobian_from_trace(net, trace):
    m = net.m
    bsz = trace.logits.shape[0]
    rows = []
    for i in range(m):
        d = np.zeros((bsz, m))
        d[:, i] = 1.0
        dx, _ = net.backprop(trace, d, want_param_grads=False)
        rows.append(dx)
    return np.stack(rows, axis=1)  # (B, m, n)


def input_jacobian(net, x):
    """The region's linear map W_x, one backward pass per logit."""
    jac = input_jacobian_batch(net, np.atleast_2d(np.asarray(x, dtype=np.float64)))
    return jac[0] if np.asarray(x).ndim == 1 else jac


def input_jacobian_batch(net, x):
    if hasattr(net, "input_jacobian_batch"):
        return net.input_jacobian_batch(x)
    trace = net.run(x)
    return _jacobian_from_trace(net, trace)


def decompose(net, x) -> AffineDecomposition:
    x = np.asarray(x, dtype=np.float64)
    logits, pattern = net.forward_with_pattern(x)
    w_x = input_jacobian(net, x)
    return AffineDecomposition(w_x, logits - w_x @ x, pattern, x.copy())


def bias_part(net, x):
    """B_x = F(x) - W_x x."""
    host = _bias_host(net)
    x = np.asarray(x, dtype=np.float64)
    return host.forward(x) - input_jacobian(host, x) @ x


def bias_parts_batch(net, x):
    host = _bias_host(net)
    trace = host.run(x)
    jac = _jacobian_from_trace(host, trace)
    return trace.logits - np.einsum("bmn,bn->bm", jac, host._check_batch(x))


def bias_part_masked(net, x):
    """Independent route to B_x: record the gates at x, then re-run the
    network from the zero input with those gates frozen, so only the bias
    vectors flow through the gated linear maps."""
    host = _bias_host(net)
    trace = host.run(x)
    frozen = host.run(np.zeros_like(host._check_batch(x)), frozen=trace.gates)
    out = frozen.logits
    return out[0] if np.asarray(x).ndim == 1 else out


def bias_label(net, x):
    """argmax of the bias part; ties break to the lowest index."""
    return int(np.argmax(bias_part(net, x)))


def bias_labels(net, x):
    """Batched bias-part labels over rows of x."""
    return np.argmax(bias_parts_batch(net, x), axis=1)


def region_signature(net, x):
    """Canonical byte string naming the linear region that contains x."""
    _, pattern = _bias_host(net).forward_with_pattern(x)
    return pattern.signature()


def construct_bias_network(u, w, b, c):
    """Build a one-hidden-layer ReLU net whose bias part is the step-unit map
    x -> u . step(w x + b) + c, where step(t) = 1 for t > 0 else 0.

    Every entry of b must be nonzero. The hidden layer is w and b rescaled by
    1/|b_i| per unit (so each unit fires exactly when w_i x + b_i > 0 and its
    constant term is sign(b_i)); the output layer re-applies sign(b_i) so each
    active unit contributes exactly the matching column of u to the bias part.
    """
    u = np.asarray(u, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if u.ndim != 2 or w.ndim != 2 or u.shape[1] != w.shape[0]:
        raise ShapeError(f"u {u.shape} and w {w.shape} do not chain")
    if b.shape != (w.shape[0],) or c.shape != (u.shape[0],):
        raise ShapeError("b must match the hidden width and c the output width")
    if np.any(b == 0.0):
        raise ValueError("every entry of b must be nonzero")
    s = np.sign(b)
    hidden = Dense(w / np.abs(b)[:, None], s)
    out = Dense(u * s[None, :], c)
    return Network([hidden, out], (w.shape[1],), u.shape[0])


def step_net_eval(u, w, b, c, x):
    """Direct evaluation of x -> u . step(w x + b) + c, the construction oracle."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    gamma = (x @ np.asarray(w, dtype=np.float64).T + np.asarray(b, dtype=np.float64) > 0.0).astype(np.float64)
    out = gamma @ np.asarray(u, dtype=np.float64).T + np.asarray(c, dtype=np.float64)
    return out[0] if single else out
