"""Image datasets: a seeded synthetic pattern generator and a binary file format.

Binary layout (little-endian)::

    b"S2DD" u8 version
    u32 N, u16 C, u16 H, u16 W, u16 label_count
    N*C*H*W u8 pixels (row-major), N u16 labels
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"S2DD"
VERSION = 1
_HEAD = struct.Struct("<4sBIHHHH")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # uint8 [N, C, H, W]
    labels: np.ndarray  # int64 [N]
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.dtype != np.uint8:
            raise DatasetError("images must be uint8 [N, C, H, W]")
        if len(self.images) == 0 or len(self.labels) != len(self.images):
            raise DatasetError("need N > 0 images with one label each")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DatasetError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def x(self, dtype=np.float32) -> np.ndarray:
        dtype = np.dtype(dtype)
        return self.images.astype(dtype) / dtype.type(255.0)

    def subset(self, idx, split: str | None = None) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, split or self.split)

    def holdout(self, fraction: float = 0.1, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        """Random (train, val) partition with ``round(fraction * N)`` validation rows."""
        perm = np.random.default_rng(seed).permutation(len(self))
        n_val = int(round(fraction * len(self)))
        return self.subset(np.sort(perm[n_val:]), "train"), self.subset(np.sort(perm[:n_val]), "val")


# -- synthetic patterns ------------------------------------------------------

def synthetic(
    classes: int = 3,
    n: int = 600,
    size: int = 16,
    seed: int = 7,
    channels: int = 3,
    split: str = "train",
) -> Dataset:
    """Oriented gratings, one orientation per class, with a spread of difficulty.

    Each image draws a difficulty ``d ~ U(0, 1)``; contrast falls and pixel
    noise grows with ``d``, so the set mixes easy and hard samples.  A faint
    Gaussian blob at a random position acts as a distractor.
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, size=n)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.empty((n, channels, size, size), dtype=np.uint8)
    for i in range(n):
        theta = np.pi * labels[i] / classes + rng.normal(0.0, 0.06)
        freq = rng.uniform(0.25, 0.45)
        phase = rng.uniform(0, 2 * np.pi)
        d = rng.uniform()
        contrast = 0.45 * (1.0 - 0.9 * d)
        wave = np.sin(freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        cy, cx = rng.uniform(0, size, 2)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (size / 5) ** 2))
        tint = rng.uniform(0.6, 1.0, channels)
        base = rng.uniform(0.35, 0.65)
        img = base + contrast * tint[:, None, None] * wave[None] + 0.2 * rng.uniform(-1, 1) * blob[None]
        img = img + rng.normal(0.0, 0.05 + 0.25 * d, img.shape)
        images[i] = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return Dataset(images, labels.astype(np.int64), classes, split)


def synthetic_splits(
    classes: int = 3,
    sizes: tuple[int, int, int] = (2400, 300, 300),
    size: int = 16,
    seed: int = 7,
) -> tuple[Dataset, Dataset, Dataset]:
    """Train/val/test cut from one generated set, in that order."""
    full = synthetic(classes, sum(sizes), size, seed)
    a, b = sizes[0], sizes[0] + sizes[1]
    return (
        full.subset(slice(0, a), "train"),
        full.subset(slice(a, b), "val"),
        full.subset(slice(b, None), "test"),
    )


def parse_synthetic_spec(spec: str) -> dict:
    """``synthetic:classes=3,n=600,size=16,seed=7`` -> keyword arguments."""
    body = spec.split(":", 1)[1] if ":" in spec else ""
    out: dict = {}
    for part in filter(None, body.split(",")):
        key, _, val = part.partition("=")
        if key not in ("classes", "n", "size", "seed", "channels", "split"):
            raise DatasetError(f"unknown synthetic option {key!r}")
        out[key] = val if key == "split" else int(val)
    return out


# -- binary IO ---------------------------------------------------------------

def dumps(ds: Dataset) -> bytes:
    N, C, H, W = ds.images.shape
    body = _HEAD.pack(MAGIC, VERSION, N, C, H, W, ds.num_classes)
    body += np.ascontiguousarray(ds.images).tobytes()
    body += ds.labels.astype("<u2").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def loads(buf: bytes, split: str = "train") -> Dataset:
    if len(buf) < _HEAD.size:
        raise DatasetError(f"truncated dataset: header ends at offset {_HEAD.size}, file has {len(buf)} bytes")
    magic, version, N, C, H, W, K = _HEAD.unpack_from(buf)
    if magic != MAGIC:
        raise DatasetError("bad magic, not a dataset file")
    if version != VERSION:
        raise DatasetError(f"unsupported dataset version {version}")
    pix_end = _HEAD.size + N * C * H * W
    lab_end = pix_end + 2 * N
    if len(buf) < lab_end + 4:
        raise DatasetError(f"truncated dataset at offset {len(buf)}: expected {lab_end + 4} bytes")
    if len(buf) > lab_end + 4:
        raise DatasetError(f"{len(buf) - lab_end - 4} trailing bytes after offset {lab_end + 4}")
    (crc,) = struct.unpack_from("<I", buf, lab_end)
    if zlib.crc32(buf[:lab_end]) != crc:
        raise DatasetError("checksum mismatch")
    images = np.frombuffer(buf, np.uint8, N * C * H * W, _HEAD.size).reshape(N, C, H, W).copy()
    labels = np.frombuffer(buf, "<u2", N, pix_end).astype(np.int64)
    return Dataset(images, labels, K, split)


def save_dataset(path: str | Path, ds: Dataset) -> None:
    Path(path).write_bytes(dumps(ds))


def load_dataset(source: str | Path, split: str = "train") -> Dataset:
    """Load a binary dataset file or generate from a ``synthetic:...`` spec."""
    if isinstance(source, str) and source.startswith("synthetic"):
        kw = parse_synthetic_spec(source)
        kw.setdefault("split", split)
        return synthetic(**kw)
    return loads(Path(source).read_bytes(), split)


def augment(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Zero-pad, random crop back to size, random horizontal flip."""
    N, C, H, W = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(x)
    offs = rng.integers(0, 2 * pad + 1, size=(N, 2))
    flips = rng.random(N) < 0.5
    for i in range(N):
        a, b = offs[i]
        crop = padded[i, :, a:a + H, b:b + W]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out
