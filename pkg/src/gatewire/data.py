"""Datasets: a two-tier Gaussian generator, CSV serialization, and seeded splits.

The generator calibrates per-dimension noise to 1/sqrt(d) so each cluster has
RMS radius 1; center separations are therefore expressed in cluster-sigma
units. Easy classes sit on distinct coordinate axes at the requested
separation; hard classes crowd around one far-away base point with pairwise
spacing min(separation/10, 0.8), deliberately inside one sigma.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DataError, SpecError


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # n x d float64
    labels: np.ndarray  # n int64 in [0, num_classes)
    num_classes: int

    def __post_init__(self):
        f, y = self.features, self.labels
        if f.ndim != 2 or y.ndim != 1 or f.shape[0] != y.shape[0]:
            raise DataError(f"inconsistent dataset shapes {f.shape} / {y.shape}")
        if not np.isfinite(f).all():
            raise DataError("non-finite feature values")
        if y.size == 0:
            raise DataError("empty dataset")
        if y.min() < 0 or y.max() >= self.num_classes:
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        present = np.unique(y)
        if len(present) != self.num_classes:
            missing = sorted(set(range(self.num_classes)) - set(present.tolist()))
            raise DataError(f"classes without examples: {missing}")

    def __len__(self):
        return self.labels.shape[0]


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 6
    per_class: int = 584
    dim: int = 16
    easy_fraction: float = 0.5
    separation: float = 8.0
    seed: int = 0

    def validate(self):
        if self.num_classes < 2:
            raise SpecError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.per_class < 1:
            raise SpecError(f"per_class must be >= 1, got {self.per_class}")
        if self.dim < 1:
            raise SpecError(f"dim must be >= 1, got {self.dim}")
        if not 0.0 <= self.easy_fraction <= 1.0:
            raise SpecError(f"easy_fraction must lie in [0, 1], got {self.easy_fraction}")
        if self.separation <= 0:
            raise SpecError(f"separation must be positive, got {self.separation}")

    @property
    def n_easy(self) -> int:
        return int(round(self.easy_fraction * self.num_classes))

    def easy_classes(self):
        return tuple(range(self.n_easy))


def gen_synthetic(spec: SyntheticSpec) -> Dataset:
    spec.validate()
    n_easy = spec.n_easy
    n_hard = spec.num_classes - n_easy
    if spec.dim < max(n_easy, n_hard, 1):
        raise SpecError(
            f"dim {spec.dim} too small to place {n_easy} easy and {n_hard} hard clusters"
        )
    hard_sep = min(spec.separation / 10.0, 0.8)

    centers = []
    for i in range(n_easy):
        c = np.zeros(spec.dim)
        c[i] = spec.separation
        centers.append(c)
    # Hard clusters share a base far from every easy center; offsets along
    # distinct axes make all pairwise hard-hard distances exactly hard_sep.
    base = np.zeros(spec.dim)
    base[0] = -spec.separation
    for k in range(n_hard):
        c = base.copy()
        c[k] += hard_sep / np.sqrt(2.0)
        centers.append(c)

    rng = np.random.default_rng(spec.seed)
    noise_std = 1.0 / np.sqrt(spec.dim)  # cluster RMS radius 1
    feats, labels = [], []
    for ci, center in enumerate(centers):
        feats.append(center + noise_std * rng.standard_normal((spec.per_class, spec.dim)))
        labels.append(np.full(spec.per_class, ci, dtype=np.int64))
    return Dataset(np.vstack(feats), np.concatenate(labels), spec.num_classes)


def save_csv(dataset: Dataset, path):
    """Header label,f0,...,f{d-1}; floats written in shortest round-trip form."""
    d = dataset.features.shape[1]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["label"] + [f"f{i}" for i in range(d)])
        for y, row in zip(dataset.labels, dataset.features):
            w.writerow([int(y)] + [repr(v) for v in row.tolist()])


def load_csv(path) -> Dataset:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        d = len(header) - 1
        if d < 1 or header != ["label"] + [f"f{i}" for i in range(d)]:
            raise DataError(f"{path}: bad header {header!r}")
        feats, labels = [], []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != d + 1:
                raise DataError(f"{path}: line {lineno}: expected {d + 1} fields, got {len(rec)}")
            try:
                labels.append(int(rec[0]))
            except ValueError:
                raise DataError(f"{path}: line {lineno}: non-integer label {rec[0]!r}") from None
            try:
                feats.append([float(v) for v in rec[1:]])
            except ValueError:
                raise DataError(f"{path}: line {lineno}: malformed feature value") from None
    if not labels:
        raise DataError(f"{path}: no data rows")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0:
        raise DataError(f"{path}: negative label {int(labels.min())}")
    return Dataset(np.asarray(feats, dtype=np.float64), labels, int(labels.max()) + 1)


@dataclass(frozen=True)
class SplitResult:
    train: Dataset
    val: Dataset
    test: Dataset
    indices: tuple  # (train_idx, val_idx, test_idx) into the source dataset
    mean: np.ndarray | None  # train-feature statistics, None when not standardized
    std: np.ndarray | None


def split(dataset: Dataset, fractions, seed: int, standardize: bool = True) -> SplitResult:
    """Seeded permutation partition into train/val/test using cumulative-rounded
    boundaries. Standardization statistics come from the train portion only and
    are applied to all three splits."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise SpecError(f"need three positive fractions, got {fractions!r}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise SpecError(f"fractions must sum to 1, got {sum(fractions)!r}")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    b1 = int(round(fractions[0] * n))
    b2 = int(round((fractions[0] + fractions[1]) * n))
    idx = (perm[:b1], perm[b1:b2], perm[b2:])
    if any(len(part) == 0 for part in idx):
        raise DataError(f"split of {n} rows with fractions {fractions} leaves an empty part")

    mean = std = None
    feats = dataset.features
    if standardize:
        train_feats = feats[idx[0]]
        mean = train_feats.mean(axis=0)
        std = train_feats.std(axis=0)
        std = np.where(std == 0.0, 1.0, std)
        feats = (feats - mean) / std

    def part(i):
        labels = dataset.labels[idx[i]]
        return Dataset(feats[idx[i]], labels, dataset.num_classes)

    return SplitResult(part(0), part(1), part(2), idx, mean, std)
