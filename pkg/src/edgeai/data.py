"""Procedural image-classification datasets and the EDAI binary file format.

The generator draws simple colored motifs (disk, ring, cross, stripes, ...)
with randomized position/scale/color plus Gaussian pixel noise, so every
experiment runs from scratch with no downloads. A second, disjoint motif
bank provides an "alternate distribution" dataset for transfer experiments.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

EDAI_MAGIC = b"EDAI"
EDAI_VERSION = 1


class DatasetFormatError(ValueError):
    """Bad magic / truncated payload / checksum mismatch while reading EDAI."""


@dataclass
class Dataset:
    images: np.ndarray  # N,C,H,W float32 in [0,1]
    labels: np.ndarray  # N int
    class_names: list[str]
    split: str = "train"

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("image/label count mismatch")
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        self.images = np.asarray(self.images, dtype=np.float32)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self):
        return self.images.shape[0]


# ---------------------------------------------------------------------------
# motif bank


def _grid(size):
    c = (size - 1) / 2.0
    y, x = np.mgrid[0:size, 0:size]
    return (x - c) / c, (y - c) / c  # in [-1, 1]


def _disk(x, y, r):
    return (x * x + y * y) <= r * r


def _ring(x, y, r):
    d = np.sqrt(x * x + y * y)
    return (d <= r) & (d >= r * 0.55)


def _cross(x, y, r):
    return (np.abs(x) <= r * 0.3) | (np.abs(y) <= r * 0.3)


def _stripes(x, y, r, angle):
    t = x * np.cos(angle) + y * np.sin(angle)
    return (np.mod(t / (r * 0.5), 2.0) < 1.0) & (np.maximum(np.abs(x), np.abs(y)) <= 1.0)


def _checker(x, y, r):
    return ((np.floor(x / (r * 0.6)) + np.floor(y / (r * 0.6))) % 2 == 0)


def _blob(x, y, r):
    return np.exp(-(x * x + 2 * y * y) / (r * r)) > 0.4


def _triangle(x, y, r):
    return (y >= -r) & (y <= r) & (np.abs(x) <= (r - y) * 0.6)


def _ellipse(x, y, r):
    return (x * x / (r * r) + y * y / (r * r * 0.56)) <= 1.0


def _annulus(x, y, r):
    d = np.sqrt(x * x + y * y)
    return (d <= r) & (d >= r * 0.4)


def _plus(x, y, r):
    return (np.abs(x) <= r * 0.45) | (np.abs(y) <= r * 0.45)


def _blobtall(x, y, r):
    return np.exp(-(2 * x * x + y * y) / (r * r)) > 0.4


def _wedge(x, y, r):
    return (-y >= -r) & (-y <= r) & (np.abs(x) <= (r + y) * 0.6)


MOTIFS = {
    "disk": lambda x, y, r: _disk(x, y, r),
    "ring": lambda x, y, r: _ring(x, y, r),
    "cross": lambda x, y, r: _cross(x, y, r),
    "stripes0": lambda x, y, r: _stripes(x, y, r, 0.0),
    "stripes45": lambda x, y, r: _stripes(x, y, r, np.pi / 4),
    "stripes90": lambda x, y, r: _stripes(x, y, r, np.pi / 2),
    "stripes135": lambda x, y, r: _stripes(x, y, r, 3 * np.pi / 4),
    "checker": lambda x, y, r: _checker(x, y, r),
    "blob": lambda x, y, r: _blob(x, y, r),
    "triangle": lambda x, y, r: _triangle(x, y, r),
}

# Disjoint motif bank for the alternate-distribution experiments. Each motif
# is a close relative of one primary motif (offset stripe angle, different
# eccentricity / thickness / orientation) so the bank plays the role of a
# nearby-but-different data distribution: no image overlaps the primary set,
# yet a model trained on the primary bank still responds to all classes.
ALT_MOTIFS = {
    "ellipse": lambda x, y, r: _ellipse(x, y, r),
    "annulus": lambda x, y, r: _annulus(x, y, r),
    "plus": lambda x, y, r: _plus(x, y, r),
    "stripes10": lambda x, y, r: _stripes(x, y, r, np.pi / 18),
    "stripes55": lambda x, y, r: _stripes(x, y, r, np.pi / 4 + np.pi / 18),
    "stripes100": lambda x, y, r: _stripes(x, y, r, np.pi / 2 + np.pi / 18),
    "stripes145": lambda x, y, r: _stripes(x, y, r, 3 * np.pi / 4 + np.pi / 18),
    "checkerfine": lambda x, y, r: _checker(x, y, r * 0.75),
    "blobtall": lambda x, y, r: _blobtall(x, y, r),
    "wedge": lambda x, y, r: _wedge(x, y, r),
}


@dataclass
class ShapesConfig:
    num_classes: int = 10
    image_size: int = 32
    per_class: int = 500
    noise: float = 0.05
    seed: int = 0
    motif_bank: str = "primary"  # "primary" or "alternate"
    channels: int = 3
    split: str = "train"
    class_offset: int = 0  # skip the first few motifs (alternate class subsets)

    def motifs(self) -> list[str]:
        bank = MOTIFS if self.motif_bank == "primary" else ALT_MOTIFS
        names = list(bank)[self.class_offset : self.class_offset + self.num_classes]
        if len(names) < self.num_classes:
            raise ValueError(
                f"{self.num_classes} classes requested but only {len(names)} motifs available"
            )
        return names

    def validate(self):
        if not (0.0 <= self.noise <= 0.5):
            raise ValueError(f"noise must be in [0,0.5], got {self.noise}")
        if self.per_class < 1 or self.image_size < 8:
            raise ValueError("per_class and image_size must be sensible")
        self.motifs()


def gen_shapes(cfg: ShapesConfig) -> Dataset:
    """Deterministic per seed; each image is one motif at random pose/color."""
    cfg.validate()
    bank = MOTIFS if cfg.motif_bank == "primary" else ALT_MOTIFS
    names = cfg.motifs()
    rng = np.random.default_rng(cfg.seed)
    N = cfg.num_classes * cfg.per_class
    images = np.zeros((N, cfg.channels, cfg.image_size, cfg.image_size), dtype=np.float32)
    labels = np.repeat(np.arange(cfg.num_classes, dtype=np.uint8), cfg.per_class)
    gx, gy = _grid(cfg.image_size)
    for i in range(N):
        motif = bank[names[labels[i]]]
        cx, cy = rng.uniform(-0.25, 0.25, size=2)
        scale = rng.uniform(0.45, 0.75)
        fg = rng.uniform(0.55, 1.0, size=cfg.channels)
        bg = rng.uniform(0.0, 0.3, size=cfg.channels)
        mask = motif((gx - cx) / scale, (gy - cy) / scale, 0.8)
        img = np.empty((cfg.channels, cfg.image_size, cfg.image_size), dtype=np.float32)
        for ch in range(cfg.channels):
            img[ch] = np.where(mask, fg[ch], bg[ch])
        if cfg.noise > 0:
            img += rng.normal(0.0, cfg.noise, size=img.shape).astype(np.float32)
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, names, split=cfg.split)


def random_noise_dataset(n: int, num_classes: int, image_size: int, seed: int,
                         channels: int = 3) -> Dataset:
    """Uniform-noise images with placeholder labels (KD uses teacher targets)."""
    rng = np.random.default_rng(seed)
    images = rng.uniform(0.0, 1.0, size=(n, channels, image_size, image_size)).astype(np.float32)
    labels = (np.arange(n) % num_classes).astype(np.uint8)
    return Dataset(images, labels, [f"class_{i}" for i in range(num_classes)], split="synthetic")


# ---------------------------------------------------------------------------
# EDAI binary format
#
# little-endian: magic "EDAI", u16 version, u32 N, u8 C, u16 H, u16 W, u8 L,
# N x u8 labels, N*C*H*W x f32 pixels, u32 CRC32 of everything before it
# (header + labels + pixels). Class names / split are not stored.

_HEADER = struct.Struct("<4sHIBHHB")


def save_dataset(ds: Dataset, path):
    N, C, H, W = ds.images.shape
    L = ds.num_classes
    header = _HEADER.pack(EDAI_MAGIC, EDAI_VERSION, N, C, H, W, L)
    payload = ds.labels.astype("<u1").tobytes() + ds.images.astype("<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(header + payload)))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise DatasetFormatError("truncated file: header incomplete")
    magic, version, N, C, H, W, L = _HEADER.unpack_from(blob, 0)
    if magic != EDAI_MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}")
    if version != EDAI_VERSION:
        raise DatasetFormatError(f"unsupported version {version}")
    payload_len = N + N * C * H * W * 4
    expected = _HEADER.size + payload_len + 4
    if len(blob) != expected:
        raise DatasetFormatError(
            f"truncated or oversized file: declared {expected} bytes, got {len(blob)}"
        )
    payload = blob[_HEADER.size : _HEADER.size + payload_len]
    (crc,) = struct.unpack_from("<I", blob, _HEADER.size + payload_len)
    if zlib.crc32(blob[: _HEADER.size + payload_len]) != crc:
        raise DatasetFormatError("checksum mismatch")
    labels = np.frombuffer(payload[:N], dtype="<u1").copy()
    images = np.frombuffer(payload[N:], dtype="<f4").reshape(N, C, H, W).copy()
    if labels.size and labels.max() >= L:
        raise DatasetFormatError(f"label {labels.max()} out of range [0,{L})")
    return Dataset(images, labels, [f"class_{i}" for i in range(L)], split="loaded")


def split_batches(ds: Dataset, batch: int, shuffle_seed: int):
    """Seed-deterministic shuffled batches covering the dataset exactly once."""
    if batch < 1:
        raise ValueError("batch size must be >= 1")
    order = np.random.default_rng(shuffle_seed).permutation(len(ds))
    return [
        (ds.images[order[i : i + batch]], ds.labels[order[i : i + batch]])
        for i in range(0, len(ds), batch)
    ]
