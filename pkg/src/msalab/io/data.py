"""Datasets: CIFAR-10 binary records and synthetic frequency/shape tasks."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..fourier import band_limit
from .files import write_bytes

RECORD = 3073
CIFAR_SIDE = 32
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)


class DataError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class Dataset:
    """Images as float (N, C, H, W) plus integer labels."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError("image and label counts differ")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self) -> tuple:
        return self.images.shape[1:]

    def subset(self, idx) -> Dataset:
        return Dataset(self.images[idx], self.labels[idx], self.class_count, self.split)

    def head(self, n: int) -> Dataset:
        return self.subset(slice(0, n))


def _norm_consts(mean, std, channels):
    if mean is None:
        return np.zeros((1, channels, 1, 1)), np.ones((1, channels, 1, 1))
    return (np.asarray(mean, dtype=np.float64).reshape(1, -1, 1, 1),
            np.asarray(std, dtype=np.float64).reshape(1, -1, 1, 1))


def load_cifar10_binary(path, limit: int | None = None, mean=CIFAR_MEAN, std=CIFAR_STD,
                        split: str = "train") -> Dataset:
    """Parse 3073-byte records (label, then 1024 R, 1024 G, 1024 B bytes).

    Pixels are scaled to [0, 1] and then normalized per channel with
    ``mean``/``std``; pass ``mean=None`` to skip normalization.
    """
    raw = Path(path).read_bytes()
    n_full = len(raw) // RECORD
    if len(raw) % RECORD:
        raise DataError(f"{path}: truncated record", n_full * RECORD)
    n = n_full if limit is None else min(int(limit), n_full)
    buf = np.frombuffer(raw, dtype=np.uint8, count=n * RECORD).reshape(n, RECORD)
    labels = buf[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= 10)
    if bad.size:
        raise DataError(f"{path}: label {labels[bad[0]]} out of range", int(bad[0]) * RECORD)
    images = buf[:, 1:].reshape(n, 3, CIFAR_SIDE, CIFAR_SIDE).astype(np.float64) / 255.0
    m, s = _norm_consts(mean, std, 3)
    return Dataset((images - m) / s, labels, 10, split)


def write_cifar10_binary(path, data: Dataset, mean=CIFAR_MEAN, std=CIFAR_STD) -> Path:
    """Inverse of :func:`load_cifar10_binary` (pixels rounded to bytes)."""
    if data.shape != (3, CIFAR_SIDE, CIFAR_SIDE):
        raise DataError(f"CIFAR records need (3, 32, 32) images, got {data.shape}")
    m, s = _norm_consts(mean, std, 3)
    pixels = np.clip(np.rint((data.images * s + m) * 255.0), 0, 255).astype(np.uint8)
    out = np.empty((len(data), RECORD), dtype=np.uint8)
    out[:, 0] = data.labels
    out[:, 1:] = pixels.reshape(len(data), -1)
    return write_bytes(path, out.tobytes())


# ---------------------------------------------------------------------------
# synthetic tasks
# ---------------------------------------------------------------------------
def class_bands(class_count: int) -> np.ndarray:
    """Disjoint radial bands [lo, hi) tiling [0, pi], one per class."""
    edges = np.linspace(0.0, math.pi, class_count + 1)
    return np.stack([edges[:-1], edges[1:]], axis=1)


def _standardize(x):
    s = x.std(axis=(-2, -1), keepdims=True)
    return x / np.where(s > 0, s, 1.0)


def _textures(rng, labels, channels, extent, class_count, noise):
    bands = class_bands(class_count)
    out = np.empty((len(labels), channels, extent, extent))
    white = rng.standard_normal(out.shape)
    for c in range(class_count):
        idx = np.flatnonzero(labels == c)
        if idx.size:
            lo, hi = bands[c]
            tex = band_limit(white[idx], lo, hi)
            if not np.any(tex):
                raise DataError(f"class band {c} holds no frequency bins at extent {extent}")
            out[idx] = _standardize(tex)
    return out + noise * rng.standard_normal(out.shape)


def _silhouette(kind, u, v):
    r = np.sqrt(u ** 2 + v ** 2)
    au, av = np.abs(u), np.abs(v)
    return [
        r < 0.6,
        np.maximum(au, av) < 0.5,
        au + av < 0.7,
        (r > 0.35) & (r < 0.7),
        ((au < 0.2) & (av < 0.7)) | ((av < 0.2) & (au < 0.7)),
        (av < 0.2) & (au < 0.8),
        (au < 0.2) & (av < 0.8),
        (v > -0.5) & (v < 0.6 - 1.6 * au),
        (np.abs(au - av) < 0.18) & (np.maximum(au, av) < 0.7),
        np.sqrt((au - 0.45) ** 2 + v ** 2) < 0.28,
    ][kind % 10]


def _shapes(rng, labels, channels, extent, noise):
    grid = (np.arange(extent) + 0.5) / extent * 2.0 - 1.0
    out = np.empty((len(labels), channels, extent, extent))
    for i, c in enumerate(labels):
        scale = rng.uniform(0.8, 1.2)
        dy, dx = rng.uniform(-0.2, 0.2, size=2)
        v = (grid[:, None] - dy) / scale
        u = (grid[None, :] - dx) / scale
        mask = _silhouette(int(c), u, v).astype(np.float64)
        color = rng.uniform(0.5, 1.0, size=channels) * rng.choice([-1.0, 1.0], size=channels)
        out[i] = color[:, None, None] * mask[None]
    tex = _standardize(band_limit(rng.standard_normal(out.shape), 0.6 * math.pi, math.pi))
    return out + noise * tex


def gen_synthetic(kind: str, n: int, extent: int = 16, class_count: int = 10, seed: int = 0,
                  channels: int = 3, noise: float | None = None, split: str = "train") -> Dataset:
    """Deterministic synthetic classification set.

    ``frequency_textures``: class c is a texture band-limited to the c-th
    radial band plus weak broadband noise.  ``shapes``: low-frequency
    silhouettes with a high-frequency texture nuisance.
    """
    if extent < 2 or extent & (extent - 1):
        raise DataError(f"extent {extent} is not a power of two")
    if kind == "shapes" and class_count > 10:
        raise DataError("shapes supports at most 10 classes")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % class_count
    rng.shuffle(labels)
    if n == 0:
        return Dataset(np.zeros((0, channels, extent, extent)), labels, class_count, split)
    if kind == "frequency_textures":
        images = _textures(rng, labels, channels, extent, class_count, 0.2 if noise is None else noise)
    elif kind == "shapes":
        images = _shapes(rng, labels, channels, extent, 0.5 if noise is None else noise)
    else:
        raise DataError(f"unknown synthetic kind {kind!r}")
    return Dataset(images, labels, class_count, split)
