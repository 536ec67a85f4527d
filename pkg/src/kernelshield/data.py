"""Datasets: CIFAR-10 binary batches and synthetic template images."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


class DataFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


@dataclass
class Dataset:
    name: str
    images: np.ndarray  # (N, C, H, W) in [0, 1]
    labels: np.ndarray  # (N,) in [0, K)
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("images must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx, split: Optional[str] = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.name, self.images[idx], self.labels[idx], self.num_classes,
                       split or self.split)

    def balanced_subset(self, count: int, seed: int = 0) -> "Dataset":
        """``count`` examples split as evenly as possible across classes."""
        rng = np.random.default_rng(seed)
        per = [np.flatnonzero(self.labels == k) for k in range(self.num_classes)]
        quota = [count // self.num_classes + (1 if k < count % self.num_classes else 0)
                 for k in range(self.num_classes)]
        chosen = []
        for idx, q in zip(per, quota):
            if q > len(idx):
                raise ValueError(f"class has only {len(idx)} examples, {q} requested")
            chosen.append(rng.choice(idx, size=q, replace=False))
        return self.subset(np.sort(np.concatenate(chosen)))


def split_dataset(ds: Dataset, sizes: Sequence[int], names: Sequence[str],
                  seed: int = 0) -> Tuple[Dataset, ...]:
    """Disjoint random splits of the given sizes."""
    if sum(sizes) > len(ds):
        raise ValueError(f"split sizes {list(sizes)} exceed dataset size {len(ds)}")
    perm = np.random.default_rng(seed).permutation(len(ds))
    out, start = [], 0
    for size, name in zip(sizes, names):
        out.append(ds.subset(np.sort(perm[start:start + size]), name))
        start += size
    return tuple(out)


# ---------------------------------------------------------------------------
# CIFAR-10
# ---------------------------------------------------------------------------

def parse_cifar_batch(blob: bytes) -> Tuple[np.ndarray, np.ndarray]:
    """Decode 3073-byte records: label byte + 1024 R + 1024 G + 1024 B bytes."""
    if len(blob) % CIFAR_RECORD:
        whole = len(blob) - len(blob) % CIFAR_RECORD
        raise DataFormatError(f"trailing partial record of {len(blob) - whole} bytes", whole)
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DataFormatError(f"label byte {labels[bad[0]]} out of range", int(bad[0]) * CIFAR_RECORD)
    images = raw[:, 1:].reshape((-1,) + CIFAR_SHAPE).astype(np.float64) / 255.0
    return images, labels


def ingest_cifar10(path: Union[str, Path], split: str = "test", count: Optional[int] = None,
                   balanced: bool = False, seed: int = 0) -> Dataset:
    path = Path(path)
    files = CIFAR_TRAIN_FILES if split == "train" else (CIFAR_TEST_FILE,)
    imgs, labs = [], []
    for name in files:
        fp = path / name
        if not fp.exists():
            raise FileNotFoundError(f"missing CIFAR-10 batch file {fp}")
        x, y = parse_cifar_batch(fp.read_bytes())
        imgs.append(x)
        labs.append(y)
    ds = Dataset("cifar10-subset", np.concatenate(imgs), np.concatenate(labs), 10, split)
    if count is not None:
        ds = ds.balanced_subset(count, seed) if balanced else ds.subset(np.arange(count))
    return ds


# ---------------------------------------------------------------------------
# synthetic sets
# ---------------------------------------------------------------------------

def _blob_templates(k: int, shape, rng) -> np.ndarray:
    """A bright gaussian blob per class at a class-specific position and colour."""
    c, h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    templates = np.empty((k,) + tuple(shape))
    for cls in range(k):
        angle = 2 * np.pi * cls / k
        cy = (h - 1) / 2 + 0.28 * h * np.sin(angle)
        cx = (w - 1) / 2 + 0.28 * w * np.cos(angle)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (0.16 * h) ** 2))
        colour = 0.3 + 0.7 * rng.random(c)
        templates[cls] = 0.2 + 0.6 * colour[:, None, None] * bump[None]
    return templates


def _ring_templates(k: int, shape, rng) -> np.ndarray:
    """Concentric rings whose radius identifies the class."""
    c, h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    r = np.hypot(yy - (h - 1) / 2, xx - (w - 1) / 2)
    rmax = r.max()
    templates = np.empty((k,) + tuple(shape))
    for cls in range(k):
        radius = rmax * (cls + 0.5) / k
        ring = np.exp(-((r - radius) ** 2) / (2 * (0.08 * rmax + 0.3) ** 2))
        colour = 0.3 + 0.7 * rng.random(c)
        templates[cls] = 0.2 + 0.6 * colour[:, None, None] * ring[None]
    return templates


def make_synthetic(kind: str, n: int, num_classes: int, noise: float, seed: int,
                   shape: Tuple[int, int, int] = (3, 8, 8), texture: float = 0.0,
                   split: str = "train") -> Dataset:
    """Class-balanced images: per-class template plus gaussian pixel noise.

    ``texture`` adds a fixed, low-amplitude, class-specific random pattern to
    every template: weakly visible to the eye yet strongly predictive when
    pooled over all pixels.  Templates depend only on ``seed``.
    """
    if n < num_classes:
        raise ValueError(f"n={n} must be at least num_classes={num_classes}")
    rng = np.random.default_rng(seed)
    if kind in ("blobs", "synthetic-blobs"):
        templates = _blob_templates(num_classes, shape, rng)
    elif kind in ("rings", "synthetic-rings"):
        templates = _ring_templates(num_classes, shape, rng)
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    if texture:
        templates = templates + texture * rng.choice([-1.0, 1.0], size=templates.shape)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    sample_rng = np.random.default_rng([seed, 1])
    images = templates[labels] + noise * sample_rng.normal(size=(n,) + tuple(shape))
    name = kind if kind.startswith("synthetic-") else f"synthetic-{kind}"
    return Dataset(name, np.clip(images, 0.0, 1.0), labels, num_classes, split)
