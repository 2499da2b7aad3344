"""Dataset ingestion (MNIST IDX, CIFAR-10 binary), synthetic data and batching."""

import gzip
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .exceptions import FormatError
from .tensor import DTYPE, Rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    name: str = "dataset"
    classes: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError(f"images {self.images.shape} / labels {self.labels.shape} mismatch")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes})")
        if not np.all(np.isfinite(self.images)):
            raise ValueError("images must be finite")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return self.images.shape[1:]

    def subset(self, n):
        """The first ``n`` samples."""
        return Dataset(self.images[:n], self.labels[:n], f"{self.name}[:{n}]", self.classes)


def _read_bytes(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw, magic, ndims, path):
    head = 4 + 4 * ndims
    if len(raw) < head:
        raise FormatError(f"{path}: truncated IDX header")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise FormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndims}I", raw[4:head])
    expected = head + int(np.prod(dims))
    if len(raw) != expected:
        raise FormatError(f"{path}: {len(raw)} bytes, header implies {expected}")
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims)


def load_idx(images_path, labels_path, name="mnist", classes=10):
    """Parse an IDX image/label file pair (optionally gzipped) into a Dataset."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, labels_path)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    if len(labels) and labels.max() >= classes:
        raise FormatError(f"label {labels.max()} out of range for {classes} classes")
    x = images[:, None, :, :].astype(DTYPE) / 255.0
    return Dataset(x, labels.astype(np.int64), name, classes)


def save_idx(ds, images_path, labels_path):
    """Write a single-channel Dataset back to IDX (pixels re-quantized to u8)."""
    if ds.images.shape[1] != 1:
        raise ValueError("IDX holds single-channel images")
    n, _, h, w = ds.images.shape
    pix = np.rint(ds.images[:, 0] * 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(pix.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(ds.labels.astype(np.uint8).tobytes())


def load_cifar10_bin(paths, name="cifar10"):
    """Parse CIFAR-10 binary batches: ``<label u8><R plane><G plane><B plane>`` per record."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    xs, ys = [], []
    for path in paths:
        raw = _read_bytes(path)
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise FormatError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        if rec[:, 0].max() > 9:
            raise FormatError(f"{path}: label {rec[:, 0].max()} > 9")
        ys.append(rec[:, 0].astype(np.int64))
        xs.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    x = np.concatenate(xs).astype(DTYPE) / 255.0
    return Dataset(x, np.concatenate(ys), name, 10)


def save_cifar10_bin(ds, path):
    if ds.images.shape[1:] != (3, 32, 32):
        raise ValueError("CIFAR-10 records are 3x32x32")
    pix = np.rint(ds.images * 255).astype(np.uint8).reshape(len(ds), -1)
    rec = np.concatenate([ds.labels.astype(np.uint8)[:, None], pix], axis=1)
    with open(path, "wb") as fh:
        fh.write(rec.tobytes())


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}


def _find(directory, stem):
    for cand in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        path = os.path.join(directory, cand)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(os.path.join(directory, stem))


def load_mnist_dir(directory, split="train"):
    imgs, labs = MNIST_FILES[split]
    return load_idx(_find(directory, imgs), _find(directory, labs), f"mnist-{split}")


def load_cifar10_dir(directory, split="train"):
    sub = os.path.join(directory, "cifar-10-batches-bin")
    if os.path.isdir(sub):
        directory = sub
    return load_cifar10_bin([_find(directory, f) for f in CIFAR_FILES[split]], f"cifar10-{split}")


# ----------------------------------------------------------------------
# synthetic data
# ----------------------------------------------------------------------


def make_synthetic(n, classes=2, rng=0, size=16, channels=1, noise=0.15):
    """Oriented cosine gratings, one orientation/frequency per class, plus noise.

    Labels are balanced to within one sample. Pixels are clipped to [0, 1].
    """
    if n < classes:
        raise ValueError("need at least one sample per class")
    if not isinstance(rng, Rng):
        rng = Rng(rng)
    labels = np.arange(n) % classes
    labels = labels[rng.permutation(n)]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    angle = np.pi * labels / classes
    freq = 0.08 + 0.1 * (labels % 3) / 2.0
    phase = rng.uniform((n,), 0.0, 2 * np.pi)
    proj = xx[None] * np.cos(angle)[:, None, None] + yy[None] * np.sin(angle)[:, None, None]
    base = 0.5 + 0.3 * np.cos(2 * np.pi * freq[:, None, None] * proj + phase[:, None, None])
    imgs = np.repeat(base[:, None], channels, axis=1)
    imgs = imgs + rng.normal((n, channels, size, size), 0.0, noise)
    imgs = np.clip(imgs, 0.0, 1.0)
    return Dataset(imgs.astype(DTYPE), labels, f"synthetic{classes}", classes)


# ----------------------------------------------------------------------
# normalization
# ----------------------------------------------------------------------


@dataclass
class Normalizer:
    """Per-channel standardization with statistics from a training split."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, images):
        x = np.asarray(images, dtype=np.float64)
        std = x.std(axis=(0, 2, 3))
        return cls(x.mean(axis=(0, 2, 3)), np.where(std > 0, std, 1.0))

    def _shape(self, v, x):
        return np.asarray(v, dtype=np.float64).reshape(1, -1, 1, 1)

    def normalize(self, x):
        return ((x - self._shape(self.mean, x)) / self._shape(self.std, x)).astype(DTYPE)

    def denormalize(self, x):
        return (np.asarray(x, dtype=np.float64) * self._shape(self.std, x)
                + self._shape(self.mean, x)).astype(DTYPE)

    def to_dict(self):
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["mean"]), np.array(d["std"]))


# ----------------------------------------------------------------------
# batching
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class BatchPlan:
    seed: int
    batch_size: int

    def permutation(self, n, epoch):
        gen = np.random.Generator(np.random.PCG64([self.seed, epoch]))
        return gen.permutation(n)

    def batch_indices(self, n, epoch):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        perm = self.permutation(n, epoch)
        return [perm[i : i + self.batch_size] for i in range(0, n, self.batch_size)]

    def n_batches(self, n):
        return math.ceil(n / self.batch_size)


def augment_batch(x, gen, pad=4):
    """Random horizontal flip and padded random crop."""
    x = x.copy()
    n, _, h, w = x.shape
    flip = gen.random(n) < 0.5
    x[flip] = x[flip, :, :, ::-1]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = gen.integers(0, 2 * pad + 1, n)
    dx = gen.integers(0, 2 * pad + 1, n)
    for i in range(n):
        x[i] = xp[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
    return x


def batches(ds, plan, epoch, images=None, augment=False):
    """Yield ``(x, y)`` minibatches in the epoch's permutation order.

    ``images`` substitutes a preprocessed copy of ``ds.images`` (same order).
    """
    x_all = ds.images if images is None else images
    if plan.batch_size > len(ds):
        raise ValueError(f"batch size {plan.batch_size} exceeds dataset size {len(ds)}")
    gen = np.random.Generator(np.random.PCG64([plan.seed, epoch, 1])) if augment else None
    for idx in plan.batch_indices(len(ds), epoch):
        xb = x_all[idx]
        if augment:
            xb = augment_batch(xb, gen)
        yield xb, ds.labels[idx]
