"""Synthetic token-grid datasets and the SBPD on-disk format.

SBPD layout (little-endian): magic b"SBPD", u32 version, u32 count, then the
four sample dims as u32 (T, H, W, C), then count * T * H * W * C float32
features. Labels travel in a sibling text file, one integer per line.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

MAGIC = b"SBPD"
VERSION = 1


@dataclass
class Dataset:
    x: np.ndarray        # count x H x W x C, float64
    labels: np.ndarray   # count, int64

    def __post_init__(self):
        if self.x.shape[0] != self.labels.shape[0]:
            raise ConfigurationError("feature/label counts differ")

    @property
    def count(self) -> int:
        return int(self.x.shape[0])

    def batches(self, batch_size: int):
        for start in range(0, self.count, batch_size):
            sl = slice(start, start + batch_size)
            yield self.x[sl], self.labels[sl]


def make_blobs(count: int, grid=(8, 8), channels: int = 3, n_classes: int = 2,
               noise: float = 0.5, seed: int = 0) -> Dataset:
    """Balanced classes, each a smooth spatial bump in a distinct corner plus noise."""
    h, w = grid
    rng = np.random.Generator(np.random.PCG64(seed))
    centers = [(h * (0.25 + 0.5 * (k % 2)), w * (0.25 + 0.5 * ((k // 2) % 2)))
               for k in range(n_classes)]
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    labels = np.arange(count, dtype=np.int64) % n_classes
    x = np.empty((count, h, w, channels))
    sigma2 = (0.15 * (h + w)) ** 2
    for i in range(count):
        cy, cx = centers[labels[i]]
        bump = np.exp(-((rr - cy) ** 2 + (cc - cx) ** 2) / sigma2)
        x[i] = bump[:, :, None] + noise * rng.normal(size=(h, w, channels))
    perm = rng.permutation(count)
    return Dataset(np.ascontiguousarray(x[perm]), labels[perm])


def write_sbpd(path, dataset: Dataset):
    x32 = np.ascontiguousarray(dataset.x, dtype="<f4")
    count, h, w, c = dataset.x.shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IIIIII", VERSION, count, 1, h, w, c))
        f.write(x32.tobytes())
    with open(str(path) + ".labels", "w") as f:
        for v in dataset.labels:
            f.write(f"{int(v)}\n")


def read_sbpd(path) -> Dataset:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ConfigurationError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version, count, t, h, w, c = struct.unpack("<IIIIII", f.read(24))
        if version != VERSION:
            raise ConfigurationError(f"unsupported dataset version {version}")
        n = count * t * h * w * c
        raw = f.read(4 * n)
        if len(raw) != 4 * n:
            raise ConfigurationError("dataset file truncated")
        if f.read(1):
            raise ConfigurationError("trailing bytes after features")
    x = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    x = x.reshape(count, t * h, w, c) if t != 1 else x.reshape(count, h, w, c)
    with open(str(path) + ".labels") as f:
        labels = np.array([int(ln) for ln in f if ln.strip()], dtype=np.int64)
    if labels.shape[0] != count:
        raise ConfigurationError("label count does not match dataset header")
    return Dataset(np.ascontiguousarray(x), labels)
