"""Datasets and persistence: IDX ingestion, synthetic generators, model files.

All datasets are flat float64 inputs in [0,1]^n with integer labels in [0,m).
Violations are rejected at construction, never clipped. Loaders do no
shuffling; sampling order is the trainer's business.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DatasetError(ValueError):
    pass


class LabeledDataset:
    """Inputs in [0,1]^n with integer labels in [0,m)."""

    def __init__(self, inputs, labels, name, num_classes):
        inputs = np.ascontiguousarray(np.asarray(inputs, dtype=np.float64))
        labels = np.ascontiguousarray(np.asarray(labels, dtype=np.int64))
        if inputs.ndim != 2 or labels.ndim != 1 or len(inputs) != len(labels):
            raise DatasetError(f"inputs {inputs.shape} and labels {labels.shape} do not line up")
        if len(inputs) and (inputs.min() < 0.0 or inputs.max() > 1.0):
            raise DatasetError("input coordinates must lie in [0,1]")
        if len(labels) and (labels.min() < 0 or labels.max() >= num_classes):
            raise DatasetError(f"labels must lie in [0, {num_classes})")
        self.inputs = inputs
        self.labels = labels
        self.name = str(name)
        self.m = int(num_classes)

    @property
    def n(self):
        return self.inputs.shape[1]

    def __len__(self):
        return len(self.inputs)

    def subset(self, idx, name=None):
        return LabeledDataset(self.inputs[idx], self.labels[idx], name or self.name, self.m)

    def take(self, count):
        return self.subset(np.arange(min(count, len(self))))


# ---------------------------------------------------------------------------
# IDX (big-endian) ingestion
# ---------------------------------------------------------------------------

def _read_exact(f, nbytes, path, what):
    data = f.read(nbytes)
    if len(data) != nbytes:
        raise DatasetError(f"{path}: truncated while reading {what} at byte offset {f.tell() - len(data)}")
    return data


def load_idx(images_path, labels_path, name="mnist", num_classes=10):
    """Parse a pair of IDX files (images + labels) into a dataset.

    Pixels are scaled to [0,1] by dividing by 255.
    """
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">iiii", _read_exact(f, 16, images_path, "image header"))
        if magic != IDX_IMAGES_MAGIC:
            raise DatasetError(f"{images_path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
        raw = _read_exact(f, count * rows * cols, images_path, f"{count} images")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)
    with open(labels_path, "rb") as f:
        magic, lcount = struct.unpack(">ii", _read_exact(f, 8, labels_path, "label header"))
        if magic != IDX_LABELS_MAGIC:
            raise DatasetError(f"{labels_path}: bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
        labels = np.frombuffer(_read_exact(f, lcount, labels_path, f"{lcount} labels"), dtype=np.uint8)
    if count != lcount:
        raise DatasetError(f"image count {count} does not match label count {lcount}")
    return LabeledDataset(images / 255.0, labels.astype(np.int64), name, num_classes)


def mnist_dir_candidates(explicit=None):
    dirs = []
    if explicit:
        dirs.append(explicit)
    env = os.environ.get("BIASCLF_DATA_DIR")
    if env:
        dirs.append(env)
    dirs.append(os.path.join(os.getcwd(), "data"))
    return dirs


def find_mnist(split="train", data_dir=None):
    """Locate the IDX files for a split, or None when absent."""
    img_name, lab_name = MNIST_FILES[split]
    for d in mnist_dir_candidates(data_dir):
        img, lab = os.path.join(d, img_name), os.path.join(d, lab_name)
        if os.path.isfile(img) and os.path.isfile(lab):
            return img, lab
    return None


def load_builtin_digits(split="train", seed=0):
    """Bundled 8x8 handwritten digits (from scikit-learn), the offline
    desk-scale stand-in when no MNIST IDX files are available.

    The split is a deterministic 80/20 partition controlled by ``seed``.
    """
    from sklearn.datasets import load_digits

    d = load_digits()
    x = d.data / 16.0
    y = d.target.astype(np.int64)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(x))
    cut = int(0.8 * len(x))
    idx = order[:cut] if split == "train" else order[cut:]
    return LabeledDataset(x[idx], y[idx], f"digits8x8-{split}", 10)


def load_image_dataset(split="train", data_dir=None, seed=0):
    """MNIST when its IDX files can be found, else the bundled digits set
    rendered at MNIST geometry."""
    found = find_mnist(split, data_dir)
    if found:
        return load_idx(found[0], found[1], name=f"mnist-{split}")
    return upsample_pad(load_builtin_digits(split, seed=seed))


def upsample_pad(ds, factor=3, size=28):
    """Nearest-neighbour upscale of a square image dataset, zero-padded onto a
    size x size canvas. Adds no information; it reshapes desk-scale data to the
    geometry (stroke redundancy plus empty border) the image experiments
    assume."""
    side = int(round(np.sqrt(ds.n)))
    if side * side != ds.n:
        raise DatasetError("upsample_pad needs square single-channel images")
    if side * factor > size:
        raise DatasetError(f"{side}x{side} at factor {factor} does not fit in {size}x{size}")
    img = ds.inputs.reshape(-1, side, side)
    up = np.repeat(np.repeat(img, factor, axis=1), factor, axis=2)
    off = (size - side * factor) // 2
    out = np.zeros((len(img), size, size))
    out[:, off:off + side * factor, off:off + side * factor] = up
    return LabeledDataset(out.reshape(len(img), -1), ds.labels, f"{ds.name}-{size}", ds.m)


# ---------------------------------------------------------------------------
# synthetic generators
# ---------------------------------------------------------------------------

def gen_synthetic(kind, n, m, count, seed):
    """Reproducible synthetic sets inside [0,1]^n.

    blobs: m well-separated Gaussian clusters (margin at least 0.1 between the
        two classes when m == 2).
    moons: two interleaved half circles in the first two coordinates.
    steps: class j occupies the slab x_0 in (j/m, (j+1)/m), with a small gap
        next to each slab boundary so the hand-built step network that
        classifies it is exact off its decision surfaces.
    """
    if n < 1 or m < 2 or count < m:
        raise DatasetError(f"invalid synthetic dims n={n} m={m} count={count}")
    rng = np.random.default_rng(seed)
    if kind == "blobs":
        return _gen_blobs(n, m, count, rng)
    if kind == "moons":
        return _gen_moons(n, m, count, rng)
    if kind == "steps":
        return _gen_steps(n, m, count, rng)
    raise DatasetError(f"unknown synthetic kind {kind!r}")


def _gen_blobs(n, m, count, rng):
    # Centers on the main diagonal, cluster half-width 0.4/m minus the margin.
    centers = np.linspace(0.25, 0.75, m)
    half = max(0.5 / m - 0.06, 0.02)
    labels = rng.integers(0, m, size=count)
    offsets = rng.uniform(-half, half, size=(count, n))
    x = np.clip(centers[labels][:, None] + offsets, 0.0, 1.0)
    return LabeledDataset(x, labels, f"blobs-n{n}-m{m}", m)


def _gen_moons(n, m, count, rng):
    if n < 2 or m != 2:
        raise DatasetError("moons needs n >= 2 and m == 2")
    labels = rng.integers(0, 2, size=count)
    t = rng.uniform(0.0, np.pi, size=count)
    r = 0.28 + rng.normal(0.0, 0.02, size=count)
    cx = np.where(labels == 0, 0.4, 0.6)
    cy = np.where(labels == 0, 0.45, 0.55)
    sgn = np.where(labels == 0, 1.0, -1.0)
    x = np.full((count, n), 0.5)
    x[:, 0] = cx + r * np.cos(t)
    x[:, 1] = cy + sgn * r * np.sin(t)
    return LabeledDataset(np.clip(x, 0.0, 1.0), labels, f"moons-n{n}", 2)


_STEPS_GAP = 0.02


def _gen_steps(n, m, count, rng):
    labels = rng.integers(0, m, size=count)
    width = 1.0 / m
    frac = rng.uniform(_STEPS_GAP, 1.0 - _STEPS_GAP, size=count)
    x = rng.uniform(0.0, 1.0, size=(count, n))
    x[:, 0] = (labels + frac) * width
    return LabeledDataset(x, labels, f"steps-n{n}-m{m}", m)


def steps_ground_truth(n, m):
    """Parameters (u, w, b, c) of the step map whose argmax classifies the
    "steps" set exactly: thresholds at j/m on coordinate 0, and class score
    k = 2 * (number of passed thresholds capped at k) - k."""
    w = np.zeros((m - 1, n))
    w[:, 0] = 1.0
    b = -np.arange(1, m) / m
    u = np.zeros((m, m - 1))
    for k in range(m):
        u[k, :k] = 2.0
    c = -np.arange(m, dtype=np.float64)
    return u, w, b, c


# ---------------------------------------------------------------------------
# model and dataset persistence
# ---------------------------------------------------------------------------

def save_model(net, path):
    """Write the model as JSON; float64 values survive the round trip exactly."""
    from .net import Network  # noqa: F401  (type in docstring)

    with open(path, "w") as f:
        json.dump(net.to_dict(), f)


def load_model(path):
    from .net import Network

    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: not a valid model file ({e})") from e
    return Network.from_dict(doc)


DATASET_CACHE_VERSION = 1


def save_dataset(ds, path):
    """Raw float64/int64 arrays behind a one-line JSON header."""
    header = {
        "version": DATASET_CACHE_VERSION,
        "name": ds.name,
        "count": len(ds),
        "n": ds.n,
        "m": ds.m,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode() + b"\n")
        f.write(ds.inputs.tobytes())
        f.write(ds.labels.tobytes())


def load_dataset(path):
    with open(path, "rb") as f:
        header = json.loads(f.readline())
        if header.get("version") != DATASET_CACHE_VERSION:
            raise DatasetError(f"{path}: unsupported dataset cache version {header.get('version')!r}")
        count, n = header["count"], header["n"]
        inputs = np.frombuffer(f.read(count * n * 8), dtype=np.float64).reshape(count, n)
        labels = np.frombuffer(f.read(count * 8), dtype=np.int64)
    return LabeledDataset(inputs, labels, header["name"], header["m"])
