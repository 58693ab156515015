"""Synthetic 2-D datasets and an MNIST IDX reader."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# Moon centroid; subtracting it puts the origin between the moons, which a
# bias-free (positively homogeneous) network needs.
MOONS_CENTER = np.array([0.5, 0.25])


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    name: str
    X: np.ndarray
    y: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    clamp: tuple | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or len(self.X) != len(self.y):
            raise ValueError(f"inconsistent dataset shapes {self.X.shape} / {self.y.shape}")
        splits = [np.asarray(s, dtype=np.int64) for s in (self.train_idx, self.val_idx, self.test_idx)]
        if any(len(s) == 0 for s in splits):
            raise ValueError("dataset splits must be non-empty")
        allidx = np.concatenate(splits)
        if len(np.unique(allidx)) != len(allidx):
            raise ValueError("dataset splits overlap")
        self.train_idx, self.val_idx, self.test_idx = splits

    @property
    def n_classes(self) -> int:
        return int(self.y.max()) + 1

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def split(self, name: str):
        idx = {"train": self.train_idx, "val": self.val_idx, "test": self.test_idx}[name]
        return self.X[idx], self.y[idx]

    @property
    def train(self):
        return self.split("train")

    @property
    def val(self):
        return self.split("val")

    @property
    def test(self):
        return self.split("test")


def _splits(n, rng, fractions=(0.5, 0.25, 0.25)):
    perm = rng.permutation(n)
    # every split gets at least one sample
    a = min(max(int(round(fractions[0] * n)), 1), n - 2)
    b = a + min(max(int(round(fractions[1] * n)), 1), n - a - 1)
    return perm[:a], perm[a:b], perm[b:]


def _check_n(n):
    if n < 4 or n % 2:
        raise ValueError(f"n must be an even integer >= 4, got {n}")


def gen_two_moons(n=1000, noise_sigma=0.1, seed=0, center=True) -> Dataset:
    """Interleaved half-circles of radius 1; the second is flipped and shifted by (1, -0.5)."""
    _check_n(n)
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    rng = np.random.default_rng(seed)
    h = n // 2
    t = np.linspace(0.0, np.pi, h)
    upper = np.stack([np.cos(t), np.sin(t)], axis=1)
    lower = np.stack([1.0 - np.cos(t), 1.0 - np.sin(t) - 0.5], axis=1)
    X = np.concatenate([upper, lower]) + noise_sigma * rng.standard_normal((n, 2))
    if center:
        X = X - MOONS_CENTER
    y = np.repeat([0, 1], h)
    return Dataset("two_moons", X, y, *_splits(n, rng))


def gen_blobs(n=400, seed=0, centers=((1.5, 1.5), (-1.5, -1.5)), std=0.4) -> Dataset:
    """Isotropic Gaussian blobs, equal count per center."""
    centers = np.asarray(centers, dtype=np.float64)
    c = len(centers)
    if n < 4 or n % c:
        raise ValueError(f"n must be >= 4 and divisible by {c}, got {n}")
    rng = np.random.default_rng(seed)
    per = n // c
    X = np.repeat(centers, per, axis=0) + std * rng.standard_normal((n, centers.shape[1]))
    y = np.repeat(np.arange(c), per)
    return Dataset("blobs", X, y, *_splits(n, rng))


def gen_circles(n=1000, noise_sigma=0.05, seed=0, factor=0.5) -> Dataset:
    """Two concentric circles (outer radius 1, inner radius ``factor``)."""
    _check_n(n)
    if noise_sigma < 0 or not 0 < factor < 1:
        raise ValueError("need noise_sigma >= 0 and 0 < factor < 1")
    rng = np.random.default_rng(seed)
    h = n // 2
    t = np.linspace(0.0, 2 * np.pi, h, endpoint=False)
    ring = np.stack([np.cos(t), np.sin(t)], axis=1)
    X = np.concatenate([ring, factor * ring]) + noise_sigma * rng.standard_normal((n, 2))
    y = np.repeat([0, 1], h)
    return Dataset("circles", X, y, *_splits(n, rng))


def _read_header(buf: bytes, magic: int, ndim: int, what: str):
    need = 4 + 4 * ndim
    if len(buf) < need:
        raise IdxFormatError(f"{what}: truncated header ({len(buf)} bytes)")
    got = struct.unpack_from(">I", buf, 0)[0]
    if got != magic:
        raise IdxFormatError(f"{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    payload = buf[need:]
    expected = int(np.prod(dims))
    if len(payload) != expected:
        raise IdxFormatError(f"{what}: payload has {len(payload)} bytes, header implies {expected}")
    return dims, payload


def load_mnist_idx(images_path, labels_path, limit=None, fractions=(0.5, 0.25, 0.25), seed=0) -> Dataset:
    """Parse IDX image/label files; pixels scaled to [0, 1]."""
    img_dims, img = _read_header(Path(images_path).read_bytes(), IDX_IMAGES_MAGIC, 3, "images")
    lab_dims, lab = _read_header(Path(labels_path).read_bytes(), IDX_LABELS_MAGIC, 1, "labels")
    if img_dims[0] != lab_dims[0]:
        raise IdxFormatError(f"{img_dims[0]} images but {lab_dims[0]} labels")
    n = img_dims[0] if limit is None else min(limit, img_dims[0])
    X = np.frombuffer(img, dtype=np.uint8).reshape(img_dims[0], -1)[:n] / 255.0
    y = np.frombuffer(lab, dtype=np.uint8)[:n].astype(np.int64)
    if n < 3:
        raise ValueError(f"need at least 3 samples to form train/val/test splits, got {n}")
    rng = np.random.default_rng(seed)
    return Dataset("mnist", X, y, *_splits(n, rng, fractions), clamp=(0.0, 1.0))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images ``(n, rows, cols)`` and labels in IDX layout."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, *images.shape) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def make_dataset(name: str, n: int, noise: float, seed: int) -> Dataset:
    if name == "two_moons":
        return gen_two_moons(n, noise, seed)
    if name == "blobs":
        return gen_blobs(n, seed)
    if name == "circles":
        return gen_circles(n, noise, seed)
    raise ValueError(f"unknown dataset {name!r}")
