"""Labeled image datasets and long-tail subset synthesis"""
import logging
from dataclasses import dataclass, field
from decimal import Decimal, ROUND_FLOOR, ROUND_HALF_EVEN, localcontext
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from app.dataset.corpus import (
    DEFAULT_IMAGE_SIZE,
    DEFAULT_NUM_CLASSES,
    TEST_FILES,
    TRAIN_FILES,
    read_batch_file,
    synthesize_corpus,
    write_corpus,
)
from app.errors import EmptyDatasetError, InvalidSpecError, LabelError

logger = logging.getLogger(__name__)

__all__ = [
    "ImageRecord",
    "LabeledDataset",
    "ImbalanceSpec",
    "Corpus",
    "load_corpus",
    "imbalanced_counts",
    "make_imbalanced",
    "rescaled_counts",
    "make_balanced_rescaled",
    "class_histogram",
    "export_distribution",
    "subset_label",
    "synthesize_corpus",
    "write_corpus",
]


@dataclass(frozen=True)
class ImageRecord:
    """One labeled image, pixels H×W×3 uint8"""
    label: int
    pixels: np.ndarray


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Ordered records plus class bookkeeping

    images and labels are stored column-wise; `indices` holds each record's
    position in the corpus split it was drawn from, so subsets stay traceable.
    """
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    indices: Optional[np.ndarray] = None

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", labels)
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise ValueError(f"images must be N×H×W×3, got {self.images.shape}")
        if len(self.images) != len(labels):
            raise ValueError("images and labels differ in length")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise LabelError(f"labels must lie in [0, {self.num_classes})")
        if self.indices is None:
            object.__setattr__(self, "indices", np.arange(len(labels), dtype=np.int64))

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> ImageRecord:
        return ImageRecord(label=int(self.labels[i]), pixels=self.images[i])

    @property
    def records(self) -> List[ImageRecord]:
        return [self[i] for i in range(len(self))]

    @property
    def per_class_counts(self) -> List[int]:
        return np.bincount(self.labels, minlength=self.num_classes).tolist()

    @property
    def image_size(self) -> int:
        return int(self.images.shape[1])

    def subset(self, positions: Sequence[int]) -> "LabeledDataset":
        """Records at `positions` (into this dataset), order preserved"""
        positions = np.asarray(positions, dtype=np.int64)
        return LabeledDataset(
            images=self.images[positions],
            labels=self.labels[positions],
            num_classes=self.num_classes,
            indices=self.indices[positions],
        )

    @classmethod
    def empty(cls, num_classes: int, image_size: int = DEFAULT_IMAGE_SIZE) -> "LabeledDataset":
        return cls(
            images=np.zeros((0, image_size, image_size, 3), dtype=np.uint8),
            labels=np.zeros(0, dtype=np.int64),
            num_classes=num_classes,
        )


@dataclass(frozen=True)
class ImbalanceSpec:
    """Exponential long-tail profile; rounding is always floor"""
    p: float
    num_classes: int = DEFAULT_NUM_CLASSES
    rounding: str = field(default="floor", init=False)

    def __post_init__(self):
        if not self.p >= 1:
            raise InvalidSpecError(f"imbalance factor must be >= 1, got {self.p}")
        if self.num_classes < 1:
            raise InvalidSpecError("num_classes must be >= 1")


@dataclass(frozen=True)
class Corpus:
    train: LabeledDataset
    test: LabeledDataset


def load_corpus(
    path: Union[str, Path],
    num_classes: int = DEFAULT_NUM_CLASSES,
    image_size: int = DEFAULT_IMAGE_SIZE,
) -> Corpus:
    """Load the train (five files) and test (one file) splits, in file order"""
    path = Path(path)

    def _load(names: List[str]) -> LabeledDataset:
        parts = [read_batch_file(path / n, num_classes, image_size) for n in names]
        images = np.concatenate([p[0] for p in parts])
        labels = np.concatenate([p[1] for p in parts])
        return LabeledDataset(images=images, labels=labels, num_classes=num_classes)

    corpus = Corpus(train=_load(TRAIN_FILES), test=_load(TEST_FILES))
    logger.info(f"Corpus loaded from {path}: train={len(corpus.train)} test={len(corpus.test)}")
    return corpus


def imbalanced_counts(n_per_class: int, p: float, num_classes: int) -> List[int]:
    """floor(N_c · p^(−c/(C−1))) per class, in 60-digit decimal arithmetic"""
    if not p >= 1:
        raise InvalidSpecError(f"imbalance factor must be >= 1, got {p}")
    if num_classes == 1:
        return [n_per_class]

    counts = []
    with localcontext() as ctx:
        ctx.prec = 60
        base = Decimal(repr(float(p)))
        for c in range(num_classes):
            exponent = Decimal(-c) / Decimal(num_classes - 1)
            exact = Decimal(n_per_class) * base ** exponent
            # snap values that are mathematically integral but carry exponent rounding
            nearest = exact.to_integral_value(rounding=ROUND_HALF_EVEN)
            if abs(exact - nearest) < Decimal("1e-40"):
                exact = nearest
            counts.append(int(exact.to_integral_value(rounding=ROUND_FLOOR)))
    return counts


def _require_balanced(ds: LabeledDataset) -> int:
    counts = ds.per_class_counts
    if len(set(counts)) != 1:
        raise InvalidSpecError(f"dataset is not class-balanced: {counts}")
    return counts[0]


def _sample_per_class(ds: LabeledDataset, quotas: List[int], seed: int) -> LabeledDataset:
    rng = np.random.default_rng(seed)
    chosen = []
    for c, quota in enumerate(quotas):
        positions = np.flatnonzero(ds.labels == c)
        chosen.append(rng.choice(positions, size=quota, replace=False))
    selected = np.sort(np.concatenate(chosen)) if chosen else np.zeros(0, dtype=np.int64)
    return ds.subset(selected)


def make_imbalanced(ds: LabeledDataset, spec: ImbalanceSpec, seed: int) -> LabeledDataset:
    """Long-tail subset: class c keeps floor(N_c · p^(−c/(C−1))) records"""
    if spec.num_classes != ds.num_classes:
        raise InvalidSpecError(
            f"spec has {spec.num_classes} classes, dataset has {ds.num_classes}"
        )
    n_per_class = _require_balanced(ds)
    quotas = imbalanced_counts(n_per_class, spec.p, ds.num_classes)
    out = _sample_per_class(ds, quotas, seed)
    logger.info(f"Imbalanced subset p={spec.p}: {len(out)} records {quotas}")
    return out


def rescaled_counts(total: int, num_classes: int) -> List[int]:
    """floor(total/C) each, remainder one-by-one to the lowest class indices"""
    base, remainder = divmod(total, num_classes)
    return [base + (1 if c < remainder else 0) for c in range(num_classes)]


def make_balanced_rescaled(ds: LabeledDataset, total: int, seed: int) -> LabeledDataset:
    """Uniformly rescaled balanced subset with `total` records"""
    if total < 0 or total > len(ds):
        raise InvalidSpecError(f"cannot draw {total} records from {len(ds)}")
    n_per_class = _require_balanced(ds)
    quotas = rescaled_counts(total, ds.num_classes)
    if max(quotas) > n_per_class:
        raise InvalidSpecError(f"class quota {max(quotas)} exceeds {n_per_class} available")
    out = _sample_per_class(ds, quotas, seed)
    logger.info(f"Balanced rescaled subset: {len(out)} records")
    return out


def class_histogram(ds: LabeledDataset) -> List[int]:
    return ds.per_class_counts


def export_distribution(ds: LabeledDataset, path: Union[str, Path]) -> Path:
    """Write `class,count` rows for every class"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    counts = class_histogram(ds)
    frame = pd.DataFrame({"class": range(ds.num_classes), "count": counts})
    frame.to_csv(path, index=False)
    return path


def subset_label(kind: str, p: Optional[float] = None, total: Optional[int] = None) -> str:
    """Row label used in result tables"""
    if kind == "imbalanced":
        return f"Imbalanced (p={p:g})"
    if kind == "balanced":
        return f"Balanced (rs.{total})"
    if kind == "full":
        return "Balanced (full)"
    raise InvalidSpecError(f"unknown subset kind: {kind}")
