"""Synthetic four-class surface-defect images, augmentations, splitting, and
the on-disk dataset layout.

Images are single-channel float arrays in [-1, 1]. Every image is drawn from
its own generator seeded by ``(seed, class, index)`` so generation order does
not matter.
"""

from __future__ import annotations

import csv
import enum
import os
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParameterError, ShapeError
from .io import load_pgm, load_sections, save_pgm, save_sections

SUPPORTED_SIZES = (8, 16, 32)


class DefectClass(enum.IntEnum):
    CORROSION = 0
    DENT = 1
    SCRATCH = 2
    SMOOTH = 3

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value: str | int) -> DefectClass:
        if isinstance(value, str) and not value.isdigit():
            try:
                return cls[value.upper()]
            except KeyError:
                raise ParameterError(f"unknown defect class {value!r}") from None
        try:
            return cls(int(value))
        except ValueError:
            raise ParameterError(f"unknown defect class {value!r}") from None


CLASS_NAMES = tuple(c.label for c in DefectClass)


def _grid(h: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:h, 0:h].astype(np.float64)
    return yy + 0.5, xx + 0.5


def _segment_distance(yy, xx, p0, p1) -> np.ndarray:
    d = p1 - p0
    tt = np.clip(((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / max(float(d @ d), 1e-12), 0.0, 1.0)
    return np.hypot(yy - (p0[0] + tt * d[0]), xx - (p0[1] + tt * d[1]))


BASE_GRAY = 0.0
BRIGHT_SPOT_RATE = 0.9  # corrosion spots are mostly light oxide, a few dark pits


def _render(cls: DefectClass, h: int, rng: np.random.Generator) -> np.ndarray:
    scale = h / 16.0
    img = BASE_GRAY + rng.normal(0.0, 0.02, size=(h, h))
    yy, xx = _grid(h)
    if cls is DefectClass.DENT:
        for _ in range(rng.integers(1, 4)):
            cy, cx = rng.uniform(0.2 * h, 0.8 * h, size=2)
            width = rng.uniform(1.0, 2.5) * scale
            depth = rng.uniform(0.4, 0.9)
            img -= depth * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
    elif cls is DefectClass.SCRATCH:
        for _ in range(rng.integers(1, 3)):
            angle = rng.uniform(0.0, np.pi)
            length = rng.uniform(0.4 * h, 0.9 * h)
            center = rng.uniform(0.3 * h, 0.7 * h, size=2)
            half = 0.5 * length * np.array([np.sin(angle), np.cos(angle)])
            dist = _segment_distance(yy, xx, center - half, center + half)
            # pixel coverage of a line of width `scale`, box-filtered
            coverage = np.clip(0.5 * scale + 0.5 - dist, 0.0, 1.0)
            img -= rng.uniform(0.5, 0.9) * coverage
    elif cls is DefectClass.CORROSION:
        density = rng.uniform(0.02, 0.06)
        mask = rng.random((h, h)) < density
        if not mask.any():
            mask[rng.integers(h), rng.integers(h)] = True
        sign = np.where(rng.random((h, h)) < BRIGHT_SPOT_RATE, 1.0, -1.0)
        img += mask * sign * rng.uniform(0.4, 0.8, size=(h, h))
    return np.clip(img, -1.0, 1.0)


def gen_synthetic(cls: DefectClass | int | str, count: int, h: int = 16, seed: int = 0) -> np.ndarray:
    """``count`` images of one class, shape (count, 1, h, h)."""
    if h not in SUPPORTED_SIZES:
        raise ParameterError(f"image size must be one of {SUPPORTED_SIZES}, got {h}")
    if count < 0:
        raise ParameterError("count must be non-negative")
    cls = DefectClass.parse(cls) if not isinstance(cls, DefectClass) else cls
    out = np.empty((count, 1, h, h))
    for i in range(count):
        out[i, 0] = _render(cls, h, np.random.default_rng([seed, int(cls), i]))
    return out


# ---------------------------------------------------------------------------
# augmentations: each takes (..., H, W) and preserves shape and [-1, 1] range


def augment_flip(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(img)[..., ::-1])


def augment_edge_pad(img: np.ndarray, pad: int, dy: int = 0, dx: int = 0) -> np.ndarray:
    """Replicate border pixels ``pad`` deep, then crop HxW back out.

    The crop window sits at the centre shifted by (dy, dx), |dy|, |dx| <= pad;
    a random shift turns this into the usual pad-and-random-crop.
    """
    if pad < 0:
        raise ParameterError("pad must be non-negative")
    if abs(dy) > pad or abs(dx) > pad:
        raise ParameterError(f"crop shift ({dy}, {dx}) exceeds pad {pad}")
    img = np.asarray(img)
    if pad == 0:
        return img.copy()
    h, w = img.shape[-2:]
    widths = [(0, 0)] * (img.ndim - 2) + [(pad, pad), (pad, pad)]
    padded = np.pad(img, widths, mode="edge")
    return np.ascontiguousarray(padded[..., pad + dy : pad + dy + h, pad + dx : pad + dx + w])


def augment_contrast(img: np.ndarray, factor: float) -> np.ndarray:
    """x -> clamp(mean + factor * (x - mean)), mean taken per image."""
    if factor <= 0:
        raise ParameterError("contrast factor must be positive")
    img = np.asarray(img)
    if factor == 1:
        return img.copy()
    mu = img.mean(axis=(-2, -1), keepdims=True)
    return np.clip(mu + factor * (img - mu), -1.0, 1.0)


def random_view(
    img: np.ndarray,
    rng: np.random.Generator,
    pad: int = 4,
    contrast: tuple[float, float] = (0.7, 1.3),
) -> np.ndarray:
    """Random flip, contrast jitter, and edge-pad-then-random-crop of one image."""
    if rng.random() < 0.5:
        img = augment_flip(img)
    img = augment_contrast(img, rng.uniform(*contrast))
    dy, dx = rng.integers(-pad, pad + 1, size=2)
    return augment_edge_pad(img, pad, int(dy), int(dx))


def random_views(batch: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    return np.stack([random_view(img, rng, pad) for img in batch])


# ---------------------------------------------------------------------------
# datasets


@dataclass
class LabeledDataset:
    images: np.ndarray  # (n, 1, H, W) in [-1, 1]
    labels: np.ndarray  # (n,) class codes
    train_idx: np.ndarray
    test_idx: np.ndarray

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ShapeError("images and labels differ in length")

    @property
    def size(self) -> int:
        return int(self.images.shape[2])

    def subset(self, which: str, cls: DefectClass | int | None = None) -> tuple[np.ndarray, np.ndarray]:
        idx = {"train": self.train_idx, "test": self.test_idx, "all": np.arange(len(self.labels))}[which]
        if cls is not None:
            idx = idx[self.labels[idx] == int(cls)]
        return self.images[idx], self.labels[idx]


def stratified_split(labels: np.ndarray, train_frac: float) -> tuple[np.ndarray, np.ndarray]:
    """Per class, the first round(train_frac * count) members (in order) go to train."""
    if not 0 < train_frac < 1:
        raise ParameterError(f"train_frac must lie in (0, 1), got {train_frac}")
    train, test = [], []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        k = int(round(train_frac * members.size))
        train.append(members[:k])
        test.append(members[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def build_dataset(
    counts: Sequence[int] | Mapping[int, int] | int = 400,
    h: int = 16,
    seed: int = 0,
    train_frac: float = 0.8,
) -> LabeledDataset:
    """Generate every class, shuffle with ``seed``, split stratified at ``train_frac``."""
    if not 0 < train_frac < 1:
        raise ParameterError(f"train_frac must lie in (0, 1), got {train_frac}")
    if isinstance(counts, int):
        counts = [counts] * len(DefectClass)
    elif isinstance(counts, Mapping):
        counts = [counts[int(c)] for c in DefectClass]
    if len(counts) != len(DefectClass) or min(counts) < 1:
        raise ParameterError("need a count >= 1 for each of the four classes")
    images = np.concatenate([gen_synthetic(c, n, h, seed) for c, n in zip(DefectClass, counts)])
    labels = np.concatenate([np.full(n, int(c)) for c, n in zip(DefectClass, counts)])
    perm = np.random.default_rng([seed, 0xDA7A]).permutation(labels.size)
    images, labels = images[perm], labels[perm]
    train_idx, test_idx = stratified_split(labels, train_frac)
    return LabeledDataset(images, labels, train_idx, test_idx)


def write_dataset(ds: LabeledDataset, root: str | os.PathLike) -> None:
    """``class_<k>/img_<i>.pgm`` per image, ``labels.csv`` and a lossless ``dataset.dft``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    per_class = {int(c): 0 for c in DefectClass}
    rows = []
    for img, lab in zip(ds.images, ds.labels):
        lab = int(lab)
        rel = f"class_{lab}/img_{per_class[lab]}.pgm"
        per_class[lab] += 1
        (root / rel).parent.mkdir(exist_ok=True)
        save_pgm(root / rel, img)
        rows.append((rel, lab))
    with open(root / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "class"])
        writer.writerows(rows)
    save_sections(
        root / "dataset.dft",
        {
            "images": ds.images,
            "labels": ds.labels.astype(np.float64),
            "train_idx": ds.train_idx.astype(np.float64),
            "test_idx": ds.test_idx.astype(np.float64),
        },
    )


def read_dataset(root: str | os.PathLike, train_frac: float = 0.8) -> LabeledDataset:
    """Load ``dataset.dft`` when present, otherwise the PGMs listed in ``labels.csv``."""
    root = Path(root)
    if (root / "dataset.dft").exists():
        s = load_sections(root / "dataset.dft")
        return LabeledDataset(
            s["images"], s["labels"].astype(np.int64), s["train_idx"].astype(np.int64), s["test_idx"].astype(np.int64)
        )
    with open(root / "labels.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    images = np.stack([load_pgm(root / r["path"])[None] for r in rows])
    labels = np.array([int(r["class"]) for r in rows])
    return LabeledDataset(images, labels, *stratified_split(labels, train_frac))
