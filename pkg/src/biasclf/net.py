"""Feed-forward ReLU networks with exact forward passes and reverse-mode gradients.

Everything is plain float64 numpy. Inputs are flat vectors in [0,1]^n; layers
that care about spatial structure (conv, pooling) reshape internally. Hidden
dense/conv layers apply ReLU, the output layer is affine, and max pooling is a
pure selection layer. The unit "gates" (ReLU on/off masks and pool selection
indices) can be recorded during a forward pass and re-imposed on a later pass,
which is what makes the exact affine decomposition and the frozen-gate bias
gradients in the rest of the package possible.

Conventions that the rest of the package relies on:
  * ReLU is counted active only for strictly positive pre-activations, so the
    derivative at exactly 0 is 0.
  * Max-pool ties go to the lowest flat index inside the window.
"""

from __future__ import annotations

import numpy as np

FORMAT_VERSION = 1


class ShapeError(ValueError):
    """Raised when an input or parameter does not match the declared shapes."""


def _as_f64(a):
    return np.ascontiguousarray(np.asarray(a, dtype=np.float64))


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Dense:
    kind = "dense"

    def __init__(self, weights, biases):
        self.w = _as_f64(weights)
        self.b = _as_f64(biases)
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[0],):
            raise ShapeError(f"dense expects w (out,in) and b (out,), got {self.w.shape} / {self.b.shape}")
        self.in_shape = (self.w.shape[1],)
        self.out_shape = (self.w.shape[0],)

    def bind(self, in_shape):
        if int(np.prod(in_shape)) != self.w.shape[1]:
            raise ShapeError(f"dense input width {self.w.shape[1]} does not chain with {in_shape}")
        self.in_shape = in_shape

    def params(self):
        return [("w", self.w), ("b", self.b)]

    def fwd(self, x):
        # x: (B, in) -> pre-activation (B, out); cache is the input itself
        return x @ self.w.T + self.b, x

    def bwd(self, dpre, cache):
        x = cache
        dw = dpre.T @ x
        db = dpre.sum(axis=0)
        dx = dpre @ self.w
        return dx, {"w": dw, "b": db}


class Conv2d:
    """3x3-style convolution over (channels, height, width), stride 1."""

    kind = "conv2d"

    def __init__(self, weights, biases, padding=0):
        self.w = _as_f64(weights)
        self.b = _as_f64(biases)
        self.padding = int(padding)
        if self.w.ndim != 4 or self.b.shape != (self.w.shape[0],):
            raise ShapeError(f"conv2d expects w (oc,ic,k,k) and b (oc,), got {self.w.shape} / {self.b.shape}")
        if self.w.shape[2] != self.w.shape[3]:
            raise ShapeError("conv2d kernels must be square")
        self.in_shape = None
        self.out_shape = None

    def bind(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.w.shape[1]:
            raise ShapeError(f"conv2d with {self.w.shape[1]} input channels cannot take input shape {in_shape}")
        c, h, w = in_shape
        k, p = self.w.shape[2], self.padding
        oh, ow = h + 2 * p - k + 1, w + 2 * p - k + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"conv2d kernel {k} too large for input {in_shape} with padding {p}")
        self.in_shape = in_shape
        self.out_shape = (self.w.shape[0], oh, ow)

    def params(self):
        return [("w", self.w), ("b", self.b)]

    def _cols(self, x):
        # x: (B, ic*h*w) flat -> patch matrix (B, oh*ow, ic*k*k)
        bsz = x.shape[0]
        c, h, w = self.in_shape
        k, p = self.w.shape[2], self.padding
        img = x.reshape(bsz, c, h, w)
        if p:
            img = np.pad(img, ((0, 0), (0, 0), (p, p), (p, p)))
        win = np.lib.stride_tricks.sliding_window_view(img, (k, k), axis=(2, 3))
        # win: (B, c, oh, ow, k, k) -> (B, oh*ow, c*k*k)
        oh, ow = self.out_shape[1], self.out_shape[2]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz, oh * ow, c * k * k)
        return np.ascontiguousarray(cols)

    def fwd(self, x):
        bsz = x.shape[0]
        oc, oh, ow = self.out_shape
        cols = self._cols(x)
        wmat = self.w.reshape(oc, -1)
        flat = cols.reshape(bsz * oh * ow, -1) @ wmat.T            # one big matmul
        out = flat.reshape(bsz, oh * ow, oc).transpose(0, 2, 1) + self.b[None, :, None]
        return np.ascontiguousarray(out).reshape(bsz, oc * oh * ow), cols

    def bwd(self, dpre, cache):
        cols = cache
        bsz = dpre.shape[0]
        oc, oh, ow = self.out_shape
        dout = np.ascontiguousarray(dpre.reshape(bsz, oc, oh * ow).transpose(0, 2, 1))
        dflat = dout.reshape(bsz * oh * ow, oc)
        dw = (dflat.T @ cols.reshape(bsz * oh * ow, -1)).reshape(self.w.shape)
        db = dflat.sum(axis=0)
        wmat = self.w.reshape(oc, -1)
        dcols = (dflat @ wmat).reshape(bsz, oh * ow, -1)
        dx = self._uncols(dcols, bsz)
        return dx, {"w": dw, "b": db}

    def _uncols(self, dcols, bsz):
        c, h, w = self.in_shape
        k, p = self.w.shape[2], self.padding
        oh, ow = self.out_shape[1], self.out_shape[2]
        dimg = np.zeros((bsz, c, h + 2 * p, w + 2 * p))
        d = dcols.reshape(bsz, oh, ow, c, k, k)
        for dy in range(k):
            for dx_ in range(k):
                dimg[:, :, dy:dy + oh, dx_:dx_ + ow] += d[:, :, :, :, dy, dx_].transpose(0, 3, 1, 2)
        if p:
            dimg = dimg[:, :, p:-p, p:-p]
        return dimg.reshape(bsz, c * h * w)


class MaxPool2:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped."""

    kind = "maxpool2"

    def __init__(self):
        self.in_shape = None
        self.out_shape = None

    def bind(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"maxpool2 needs (c,h,w) input, got {in_shape}")
        c, h, w = in_shape
        if h < 2 or w < 2:
            raise ShapeError(f"maxpool2 input {in_shape} too small")
        self.in_shape = in_shape
        self.out_shape = (c, h // 2, w // 2)

    def params(self):
        return []

    def select(self, x):
        # Returns flat indices (into this layer's input vector) of the chosen
        # units, one per output unit. Ties resolve to the lowest flat index
        # because candidates are ordered by (dy, dx) and argmax takes the first.
        bsz = x.shape[0]
        c, h, w = self.in_shape
        oh, ow = self.out_shape[1], self.out_shape[2]
        img = x.reshape(bsz, c, h, w)[:, :, :2 * oh, :2 * ow]
        cand = img.reshape(bsz, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, oh, ow, 4)
        am = np.argmax(cand, axis=-1)
        dy, dx = am // 2, am % 2
        cc, yy, xx = np.meshgrid(np.arange(c), np.arange(oh), np.arange(ow), indexing="ij")
        flat = (cc[None] * h + 2 * yy[None] + dy) * w + (2 * xx[None] + dx)
        return flat.reshape(bsz, c * oh * ow)

    def gather(self, x, sel):
        return np.take_along_axis(x, sel, axis=1)

    def bwd(self, dy, sel, in_width):
        dx = np.zeros((dy.shape[0], in_width))
        np.add.at(dx, (np.arange(dy.shape[0])[:, None], sel), dy)
        return dx


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

class ActivationPattern:
    """The per-unit gates fixing one linear region: ReLU on/off masks for the
    hidden dense/conv layers and selected flat indices for the pool layers."""

    def __init__(self, gates):
        self.gates = gates  # list aligned with layers; None for the affine output

    def signature(self):
        """Canonical byte encoding; equal signatures imply equal regions."""
        parts = []
        for g in self.gates:
            if g is None:
                parts.append(b"|a")
            elif g.dtype == np.bool_:
                parts.append(b"|m" + np.packbits(g).tobytes())
            else:
                parts.append(b"|s" + g.astype("<i8").tobytes())
        return b"".join(parts)

    def __eq__(self, other):
        return isinstance(other, ActivationPattern) and self.signature() == other.signature()


class _Trace:
    """Cached forward pass: per-layer inputs, gates, layer caches, and logits."""

    __slots__ = ("inputs", "gates", "caches", "logits")

    def __init__(self, inputs, gates, caches, logits):
        self.inputs = inputs
        self.gates = gates
        self.caches = caches
        self.logits = logits


class Network:
    """An immutable-during-evaluation stack of layers ending in an affine map
    onto ``num_classes`` logits."""

    def __init__(self, layers, input_shape, num_classes):
        if isinstance(input_shape, int):
            input_shape = (input_shape,)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.num_classes = int(num_classes)
        self.layers = list(layers)
        if not self.layers:
            raise ShapeError("a network needs at least one layer")
        shape = self.input_shape
        for layer in self.layers:
            layer.bind(shape)
            shape = layer.out_shape
        last = self.layers[-1]
        if last.kind != "dense" or int(np.prod(shape)) != self.num_classes:
            raise ShapeError(f"final layer must be dense with width {self.num_classes}, got {last.kind} {shape}")
        self.check_finite()

    # -- basic introspection ------------------------------------------------

    @property
    def n(self):
        return int(np.prod(self.input_shape))

    @property
    def m(self):
        return self.num_classes

    def params(self):
        """List of (layer_index, name, array) for every trainable parameter."""
        out = []
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params():
                out.append((i, name, arr))
        return out

    def check_finite(self):
        for i, name, arr in self.params():
            if not np.all(np.isfinite(arr)):
                raise FloatingPointError(f"non-finite values in layer {i} parameter {name}")

    def copy(self):
        return Network.from_dict(self.to_dict())

    # -- forward / backward -------------------------------------------------

    def _check_batch(self, x):
        x = _as_f64(x)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.n:
            raise ShapeError(f"input of width {x.shape[-1]} does not match input_shape {self.input_shape}")
        return x

    def run(self, x, frozen=None):
        """Forward pass over a batch (B, n).

        ``frozen`` re-imposes previously recorded gates instead of computing
        them from the pre-activations, which evaluates the affine map of the
        frozen linear region rather than the network itself.
        """
        x = self._check_batch(x)
        nlayers = len(self.layers)
        if frozen is not None and len(frozen) != nlayers:
            raise ShapeError("frozen gate list does not match the layer count")
        inputs, gates, caches = [], [], []
        a = x
        for i, layer in enumerate(self.layers):
            inputs.append(a)
            want = None if frozen is None else frozen[i]
            if layer.kind == "maxpool2":
                sel = layer.select(a) if want is None else self._bcast(want, a.shape[0])
                a = layer.gather(a, sel)
                gates.append(sel)
                caches.append(None)
            else:
                pre, cache = layer.fwd(a)
                if i == nlayers - 1:
                    a = pre
                    gates.append(None)
                else:
                    mask = (pre > 0.0) if want is None else self._bcast(want, a.shape[0]).astype(bool)
                    a = np.where(mask, pre, 0.0)
                    gates.append(mask)
                caches.append(cache)
        return _Trace(inputs, gates, caches, a)

    @staticmethod
    def _bcast(gate, bsz):
        gate = np.asarray(gate)
        if gate.ndim == 1:
            gate = np.broadcast_to(gate, (bsz,) + gate.shape)
        if gate.shape[0] != bsz:
            raise ShapeError("frozen gate batch size mismatch")
        return gate

    def backprop(self, trace, dlogits, want_param_grads=True):
        """Reverse sweep from d(objective)/d(logits) to input and parameter grads.

        Parameter grads come back as a dict {(layer_index, name): array} summed
        over the batch; the caller owns any 1/B scaling via ``dlogits``.
        """
        d = _as_f64(dlogits)
        if d.shape != trace.logits.shape:
            raise ShapeError("dlogits shape does not match traced logits")
        grads = {}
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if layer.kind == "maxpool2":
                d = layer.bwd(d, trace.gates[i], trace.inputs[i].shape[1])
                continue
            if trace.gates[i] is not None:
                d = d * trace.gates[i]
            d, g = layer.bwd(d, trace.caches[i])
            if want_param_grads:
                for name, arr in g.items():
                    grads[(i, name)] = arr
        return d, grads

    # -- single-sample convenience ops ---------------------------------------

    def forward(self, x):
        """Logits for one input vector."""
        return self.run(x).logits[0]

    def forward_with_pattern(self, x):
        """Logits plus the activation pattern identifying the linear region."""
        trace = self.run(x)
        gates = [None if g is None else np.ascontiguousarray(g[0]) for g in trace.gates]
        return trace.logits[0], ActivationPattern(gates)

    def grad_input(self, x, objective):
        """Gradient of a scalar objective with respect to the input.

        objective: ("logit", i) for the i-th logit, or ("loss", y) for the
        cross-entropy loss against label y.
        """
        trace = self.run(x)
        return self._vjp(trace, objective)[0]

    def _vjp(self, trace, objective):
        kind, idx = objective
        bsz, m = trace.logits.shape
        if kind == "logit":
            if not 0 <= idx < m:
                raise ShapeError(f"logit index {idx} out of range for {m} classes")
            d = np.zeros((bsz, m))
            d[:, idx] = 1.0
        elif kind == "loss":
            d = softmax(trace.logits)
            d[np.arange(bsz), _check_labels(idx, m, bsz)] -= 1.0
        else:
            raise ValueError(f"unknown objective kind {kind!r}")
        dx, _ = self.backprop(trace, d, want_param_grads=False)
        return dx

    def vjp_input_batch(self, x, dlogits):
        """d(dlogits . logits)/dx over a batch; the gradient oracle attackers use."""
        trace = self.run(x)
        dx, _ = self.backprop(trace, dlogits, want_param_grads=False)
        return dx

    def logits_batch(self, x):
        return self.run(x).logits

    # -- serialization --------------------------------------------------------

    def to_dict(self):
        layers = []
        for layer in self.layers:
            entry = {"kind": layer.kind}
            if layer.kind == "dense":
                entry["shape"] = list(layer.w.shape)
                entry["weights"] = layer.w.ravel().tolist()
                entry["biases"] = layer.b.tolist()
            elif layer.kind == "conv2d":
                entry["shape"] = list(layer.w.shape)
                entry["padding"] = layer.padding
                entry["weights"] = layer.w.ravel().tolist()
                entry["biases"] = layer.b.tolist()
            layers.append(entry)
        return {
            "format_version": FORMAT_VERSION,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": layers,
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model format_version {doc.get('format_version')!r}")
        layers = []
        for entry in doc["layers"]:
            kind = entry["kind"]
            if kind == "dense":
                shape = tuple(entry["shape"])
                layers.append(Dense(np.array(entry["weights"]).reshape(shape), entry["biases"]))
            elif kind == "conv2d":
                shape = tuple(entry["shape"])
                layers.append(Conv2d(np.array(entry["weights"]).reshape(shape), entry["biases"],
                                     padding=entry.get("padding", 0)))
            elif kind == "maxpool2":
                layers.append(MaxPool2())
            else:
                raise ValueError(f"unknown layer kind {kind!r}")
        return cls(layers, tuple(doc["input_shape"]), doc["num_classes"])


# ---------------------------------------------------------------------------
# loss and training primitives
# ---------------------------------------------------------------------------

def _check_labels(y, m, bsz):
    y = np.asarray(y, dtype=np.int64)
    if y.ndim == 0:
        y = np.broadcast_to(y, (bsz,))
    if y.shape != (bsz,) or y.min() < 0 or y.max() >= m:
        raise ValueError(f"labels must be integers in [0, {m}) matching the batch")
    return y


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss_ce(logits, label):
    """Cross-entropy of softmax(logits) against an integer label."""
    logits = _as_f64(logits)
    single = logits.ndim == 1
    if single:
        logits = logits[None, :]
    y = _check_labels(label, logits.shape[1], logits.shape[0])
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    losses = lse - z[np.arange(len(y)), y]
    return float(losses[0]) if single else losses


def grad_params(net, x, y, objective="full", gamma=1.0):
    """Mean parameter gradient of a loss over a batch.

    objective "full": cross-entropy of the network's logits.
    objective "bias": cross-entropy of the bias part, with the activation
        gates frozen at each sample's current linear region (the bias part is
        re-evaluated as the gated pass from the zero input).
    objective "combined": bias term plus gamma times the full term.
    """
    x = net._check_batch(x)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    bsz = x.shape[0]
    y = _check_labels(y, net.m, bsz)

    def ce_pull(logits):
        d = softmax(logits)
        d[np.arange(bsz), y] -= 1.0
        return d / bsz

    grads = {}
    if objective in ("full", "combined"):
        trace = net.run(x)
        _, g = net.backprop(trace, ce_pull(trace.logits))
        scale = gamma if objective == "combined" else 1.0
        for k, v in g.items():
            grads[k] = scale * v
    if objective in ("bias", "combined"):
        gates = net.run(x).gates
        frozen = net.run(np.zeros_like(x), frozen=gates)
        _, g = net.backprop(frozen, ce_pull(frozen.logits))
        for k, v in g.items():
            grads[k] = grads.get(k, 0.0) + v
    if not grads:
        raise ValueError(f"unknown objective {objective!r}")
    return grads


class SgdMomentum:
    """Plain SGD with momentum: v <- mu*v + g, theta <- theta - lr*v."""

    def __init__(self, learning_rate, momentum=0.0):
        if learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        self.lr = float(learning_rate)
        self.mu = float(momentum)
        self.velocity = {}

    def step(self, net, grads):
        for key, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {key}")
            v = self.velocity.get(key)
            v = g if v is None else self.mu * v + g
            self.velocity[key] = v
        for i, name, arr in net.params():
            if (i, name) in grads:
                arr -= self.lr * self.velocity[(i, name)]
        net.check_finite()
        return net


def sgd_step(net, grads, learning_rate, momentum=0.0, velocity=None):
    """One momentum-SGD update; returns the velocity state for chaining."""
    opt = SgdMomentum(learning_rate, momentum)
    if velocity is not None:
        opt.velocity = velocity
    opt.step(net, grads)
    return opt.velocity


# ---------------------------------------------------------------------------
# factories
# ---------------------------------------------------------------------------

def make_mlp(input_shape, hidden, num_classes, seed=0, scale=None):
    """Fully connected ReLU net with He-normal init."""
    if isinstance(input_shape, int):
        input_shape = (input_shape,)
    rng = np.random.default_rng(seed)
    dims = [int(np.prod(input_shape))] + list(hidden) + [num_classes]
    layers = []
    for din, dout in zip(dims[:-1], dims[1:]):
        s = scale if scale is not None else np.sqrt(2.0 / din)
        layers.append(Dense(rng.standard_normal((dout, din)) * s, np.zeros(dout)))
    return Network(layers, input_shape, num_classes)


def make_convnet(input_shape, channels, dense_hidden, num_classes, seed=0, kernel=3, padding=1):
    """Small conv->pool stack followed by dense layers."""
    rng = np.random.default_rng(seed)
    layers = []
    c = input_shape[0]
    h, w = input_shape[1], input_shape[2]
    for oc in channels:
        s = np.sqrt(2.0 / (c * kernel * kernel))
        layers.append(Conv2d(rng.standard_normal((oc, c, kernel, kernel)) * s, np.zeros(oc), padding=padding))
        layers.append(MaxPool2())
        c = oc
        h = (h + 2 * padding - kernel + 1) // 2
        w = (w + 2 * padding - kernel + 1) // 2
    flat = c * h * w
    dims = [flat] + list(dense_hidden) + [num_classes]
    for din, dout in zip(dims[:-1], dims[1:]):
        layers.append(Dense(rng.standard_normal((dout, din)) * np.sqrt(2.0 / din), np.zeros(dout)))
    return Network(layers, input_shape, num_classes)
