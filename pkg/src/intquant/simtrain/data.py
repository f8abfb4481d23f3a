"""Desk-scale datasets and the IQDS binary format.

IQDS layout (little-endian)::

    b"IQDS"  version:u16  count:u32  H:u32  W:u32  C:u32  classes:u16
    count x ( H*W*C x f32 features, label:u16 )
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IQDS_MAGIC = b"IQDS"
IQDS_VERSION = 1
_HEADER = struct.Struct("<4sHIIIIH")


class DatasetFormatError(ValueError):
    pass


@dataclass(eq=False)
class Dataset:
    x: np.ndarray  # (N, H, W, C) float32
    y: np.ndarray  # (N,) int
    num_classes: int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        if self.x.ndim != 4:
            raise ValueError(f"features must be (N, H, W, C), got {self.x.shape}")
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.y.shape != (self.x.shape[0],):
            raise ValueError("one label per sample required")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError("label out of range")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def sample_shape(self) -> tuple[int, ...]:
        """Model input shape: flat features for 1x1 images, else (H, W, C)."""
        h, w, c = self.x.shape[1:]
        return (c,) if h == w == 1 else (h, w, c)

    def features(self) -> np.ndarray:
        return self.x.reshape((len(self),) + self.sample_shape).astype(np.float64)

    def split(self, eval_fraction: float, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        perm = np.random.default_rng(seed).permutation(len(self))
        n_eval = int(round(len(self) * eval_fraction))
        ev, tr = perm[:n_eval], perm[n_eval:]
        return (
            Dataset(self.x[tr], self.y[tr], self.num_classes),
            Dataset(self.x[ev], self.y[ev], self.num_classes),
        )

    def to_bytes(self) -> bytes:
        n, h, w, c = self.x.shape
        rec = np.dtype([("x", "<f4", (h * w * c,)), ("y", "<u2")])
        body = np.empty(n, dtype=rec)
        body["x"] = self.x.reshape(n, -1)
        body["y"] = self.y
        return _HEADER.pack(IQDS_MAGIC, IQDS_VERSION, n, h, w, c, self.num_classes) + body.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Dataset":
        if len(data) < _HEADER.size:
            raise DatasetFormatError("truncated IQDS header")
        magic, version, n, h, w, c, classes = _HEADER.unpack_from(data)
        if magic != IQDS_MAGIC:
            raise DatasetFormatError(f"bad magic {magic!r}")
        if version != IQDS_VERSION:
            raise DatasetFormatError(f"unsupported IQDS version {version}")
        rec = np.dtype([("x", "<f4", (h * w * c,)), ("y", "<u2")])
        if len(data) - _HEADER.size != n * rec.itemsize:
            raise DatasetFormatError(
                f"expected {n * rec.itemsize} payload bytes, found {len(data) - _HEADER.size}"
            )
        body = np.frombuffer(data, dtype=rec, offset=_HEADER.size)
        x = body["x"].reshape(n, h, w, c)
        if not np.all(np.isfinite(x)):
            raise DatasetFormatError("non-finite feature values")
        try:
            return cls(x, body["y"].astype(np.int64), classes)
        except ValueError as exc:
            raise DatasetFormatError(str(exc)) from None


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(ds.to_bytes())


def load_dataset(path) -> Dataset:
    return Dataset.from_bytes(Path(path).read_bytes())


def _points(x: np.ndarray, y: np.ndarray, classes: int) -> Dataset:
    return Dataset(x.reshape(-1, 1, 1, x.shape[1]), y, classes)


def make_blobs(n: int = 1000, seed: int = 0, separation: float = 3.0) -> Dataset:
    """Two well-separated Gaussian blobs in 2-D (linearly separable)."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    centers = np.array([[-separation / 2, 0.0], [separation / 2, 0.0]])
    x = centers[y] + rng.normal(scale=0.5, size=(n, 2))
    return _points(x, y, 2)


def make_spiral(n: int = 1500, classes: int = 3, seed: int = 0, noise: float = 0.15) -> Dataset:
    """Interleaved 2-D spiral arms, one per class."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, classes, n)
    t = rng.uniform(0.15, 1.0, n)
    angle = 3.5 * t + 2 * np.pi * y / classes
    r = 2.0 * t
    x = np.stack([r * np.cos(angle), r * np.sin(angle)], axis=1)
    x += rng.normal(scale=noise * t[:, None], size=x.shape)
    return _points(x, y, classes)


def make_bars(n: int = 800, size: int = 8, seed: int = 0, noise: float = 0.3) -> Dataset:
    """Tiny images containing a horizontal, vertical, diagonal or anti-diagonal bar."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 4, n)
    x = rng.normal(scale=noise, size=(n, size, size, 1))
    idx = np.arange(size)
    for i in range(n):
        k = rng.integers(1, size - 1)
        if y[i] == 0:
            x[i, k, :, 0] += 1.5
        elif y[i] == 1:
            x[i, :, k, 0] += 1.5
        elif y[i] == 2:
            x[i, idx, idx, 0] += 1.5
        else:
            x[i, idx, size - 1 - idx, 0] += 1.5
    return Dataset(x, y, 4)


SYNTHETIC = {"blobs": make_blobs, "spiral": make_spiral, "bars": make_bars}


def make_synthetic(kind: str, n: int, seed: int = 0) -> Dataset:
    try:
        return SYNTHETIC[kind](n=n, seed=seed)
    except KeyError:
        raise ValueError(f"unknown synthetic dataset {kind!r}; choose from {sorted(SYNTHETIC)}") from None
