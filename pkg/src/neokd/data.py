"""Datasets: MNIST IDX files, a synthetic Gaussian generator, splits, batching."""

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError
from .rng import substream

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray  # N x D float32 in [0, 1]
    labels: np.ndarray  # N int64
    num_classes: int
    tag: str = "train"

    def __post_init__(self):
        if len(self.inputs) < 1:
            raise ConfigError("a dataset needs at least one sample")
        if len(self.inputs) != len(self.labels):
            raise ConfigError("inputs and labels differ in length")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self):
        return self.inputs.shape[1]

    def subset(self, indices, tag=None):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[indices], self.labels[indices], self.num_classes, tag or self.tag)

    def head(self, n, tag=None):
        return self.subset(np.arange(min(n, len(self))), tag)


def _read(path):
    opener = gzip.open if os.fspath(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def _header(buf, path, magic, n_dims):
    size = 4 * (1 + n_dims)
    if len(buf) < size:
        raise FormatError(f"truncated IDX header, need {size} bytes", path, len(buf))
    got, *dims = struct.unpack(f">{1 + n_dims}I", buf[:size])
    if got != magic:
        raise FormatError(f"bad IDX magic 0x{got:08x}, expected 0x{magic:08x}", path, 0)
    return dims, size


def load_idx(images_path, labels_path, num_classes=10, tag="train"):
    """Load an IDX image/label pair (optionally gzipped) scaled to [0, 1]."""
    ibuf, lbuf = _read(images_path), _read(labels_path)
    (n_img, rows, cols), ioff = _header(ibuf, images_path, IMAGE_MAGIC, 3)
    (n_lab,), loff = _header(lbuf, labels_path, LABEL_MAGIC, 1)
    if n_img != n_lab:
        raise FormatError(f"image count {n_img} != label count {n_lab}", labels_path, 4)
    d = rows * cols
    if len(ibuf) < ioff + n_img * d:
        raise FormatError(f"truncated pixel data, expected {n_img * d} bytes", images_path, len(ibuf))
    if len(lbuf) < loff + n_lab:
        raise FormatError(f"truncated label data, expected {n_lab} bytes", labels_path, len(lbuf))
    pixels = np.frombuffer(ibuf, dtype=np.uint8, count=n_img * d, offset=ioff)
    labels = np.frombuffer(lbuf, dtype=np.uint8, count=n_lab, offset=loff).astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        raise FormatError(f"label {labels[bad[0]]} >= {num_classes}", labels_path, loff + int(bad[0]))
    inputs = (pixels.reshape(n_img, d).astype(np.float32) / np.float32(255.0))
    return Dataset(inputs, labels, num_classes, tag)


def write_idx(images, labels, images_path, labels_path, rows=28, cols=28):
    """Write uint8 images (N x rows*cols) and labels as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8).reshape(len(images), rows * cols)
    labels = np.asarray(labels, dtype=np.uint8)
    ipay = struct.pack(">4I", IMAGE_MAGIC, len(images), rows, cols) + images.tobytes()
    lpay = struct.pack(">2I", LABEL_MAGIC, len(labels)) + labels.tobytes()
    for path, payload in ((images_path, ipay), (labels_path, lpay)):
        if os.fspath(path).endswith(".gz"):
            with gzip.GzipFile(path, "wb", mtime=0) as f:
                f.write(payload)
        else:
            with open(path, "wb") as f:
                f.write(payload)


def synthetic_gaussians(num_classes, dim, per_class, seed, sigma=0.1):
    """Class means at the simplex corners e_c of R^dim, isotropic noise, clamped to [0, 1]."""
    if num_classes < 2:
        raise ConfigError("need at least two classes")
    if dim < num_classes:
        raise ConfigError("dim must be >= num_classes to embed the simplex corners")
    rng = substream(seed, "synthetic")
    means = np.zeros((num_classes, dim))
    means[np.arange(num_classes), np.arange(num_classes)] = 1.0
    labels = np.repeat(np.arange(num_classes), per_class)
    noise = rng.standard_normal((len(labels), dim))
    x = np.clip(means[labels] + sigma * noise, 0.0, 1.0).astype(np.float32)
    order = rng.permutation(len(labels))
    return Dataset(x[order], labels[order].astype(np.int64), num_classes, "train")


def split(ds, fractions, seed):
    """Deterministic disjoint, exhaustive split by ``fractions``.

    Parts keep the shuffled order, so ``head(n)`` of any part is a uniform
    random sample even when the source file is sorted by class.
    """
    fractions = np.asarray(fractions, dtype=np.float64)
    if fractions.size == 0 or np.any(fractions <= 0) or abs(fractions.sum() - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be positive and sum to 1, got {fractions.tolist()}")
    n = len(ds)
    bounds = np.rint(np.cumsum(fractions) * n).astype(np.int64)
    bounds[-1] = n
    starts = np.concatenate([[0], bounds[:-1]])
    if np.any(bounds - starts <= 0):
        raise ConfigError(f"split {fractions.tolist()} of {n} samples leaves an empty part")
    perm = substream(seed, "split").permutation(n)
    tags = ["train", "val", "test"] + [f"part{i}" for i in range(3, len(fractions))]
    return tuple(ds.subset(perm[s:e], tags[k]) for k, (s, e) in enumerate(zip(starts, bounds)))


class BatchIterator:
    """Shuffled mini-batches; the order depends only on (seed, epoch)."""

    def __init__(self, ds, batch_size, seed):
        if batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        self.ds = ds
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = 0

    def __len__(self):
        return -(-len(self.ds) // self.batch_size)

    def order(self, epoch):
        return substream(self.seed, "data-shuffle", epoch).permutation(len(self.ds))

    def batches(self, epoch=None):
        epoch = self.epoch if epoch is None else epoch
        idx = self.order(epoch)
        for start in range(0, len(idx), self.batch_size):
            sel = idx[start : start + self.batch_size]
            yield self.ds.inputs[sel], self.ds.labels[sel]

    def __iter__(self):
        yield from self.batches(self.epoch)
        self.epoch += 1
