"""Dataset containers, CSV ingestion and synthetic stand-ins."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, ParseError
from .numeric import make_rng


@dataclass
class DatasetSplit:
    features: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int | None = None
    feature_names: list = field(default_factory=list)
    feature_ranges: tuple | None = None  # (lo, hi) used for rescaling, if any

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise DomainError("features must be n×k with one label per row")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if self.labels.size else 0
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DomainError(f"labels must lie in [0, {self.num_classes})")
        if np.any(np.abs(self.features) > 1.0):
            raise DomainError("features must lie in [-1, 1]")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def k(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "DatasetSplit":
        return DatasetSplit(self.features[idx], self.labels[idx], self.split,
                            self.num_classes, self.feature_names, self.feature_ranges)


def ingest_csv(path, *, label_column="label", rescale=False, feature_ranges=None,
               num_classes=None, split="train") -> DatasetSplit:
    """Read a CSV with a header row of feature columns plus a label column.

    With ``rescale`` every feature is min-max mapped to [-1, 1], using
    ``feature_ranges=(lo, hi)`` when given (e.g. the training split's ranges
    for a test file) and the file's own column ranges otherwise.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file", row=1) from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise ParseError(f"{path}: no {label_column!r} column in header", row=1)
        label_idx = header.index(label_column)
        names = [h for i, h in enumerate(header) if i != label_idx]
        rows, labels = [], []
        for lineno, record in enumerate(reader, start=2):
            if not record or all(not c.strip() for c in record):
                continue
            if len(record) != len(header):
                raise ParseError(
                    f"{path}: row {lineno} has {len(record)} cells, expected {len(header)}", row=lineno
                )
            values = []
            for col, cell in enumerate(record):
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(
                        f"{path}: row {lineno}, column {header[col]!r}: not a number: {cell!r}",
                        row=lineno, col=col,
                    ) from None
                if not np.isfinite(v):
                    raise ParseError(f"{path}: row {lineno}, column {header[col]!r}: non-finite value",
                                     row=lineno, col=col)
                if col == label_idx:
                    if v != int(v) or v < 0 or (num_classes is not None and v >= num_classes):
                        raise DomainError(f"{path}: row {lineno}: label {cell!r} out of range")
                    labels.append(int(v))
                else:
                    values.append(v)
            rows.append(values)
    x = np.array(rows, dtype=np.float64).reshape(len(rows), len(names))
    ranges = None
    if rescale:
        x, ranges = rescale_features(x, feature_ranges)
    elif np.any(np.abs(x) > 1.0):
        raise DomainError(f"{path}: features outside [-1, 1]; pass rescale=True")
    return DatasetSplit(x, np.array(labels, dtype=np.int64), split, num_classes, names, ranges)


def rescale_features(x, feature_ranges=None):
    if feature_ranges is None:
        lo, hi = x.min(axis=0), x.max(axis=0)
    else:
        lo, hi = (np.asarray(a, dtype=np.float64) for a in feature_ranges)
    span = np.where(hi > lo, hi - lo, 1.0)
    out = np.clip(2.0 * (x - lo) / span - 1.0, -1.0, 1.0)
    out[:, hi <= lo] = 0.0
    return out, (lo, hi)


def write_csv(split: DatasetSplit, path) -> None:
    names = split.feature_names or [f"f{i}" for i in range(split.k)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*names, "label"])
        for row, label in zip(split.features, split.labels):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


@dataclass
class SyntheticConfig:
    """Gaussian class clusters; within-class noise confined to a low-dimensional
    subspace plus a small independent per-feature noise floor."""

    num_classes: int = 6
    k: int = 561
    n_train: int = 7352
    n_test: int = 2947
    spread: float = 0.15
    intrinsic_dim: int | None = 8
    center_scale: float = 0.5
    noise_floor: float = 0.03
    seed: int = 0

    @classmethod
    def har_like(cls, seed=0):
        """Same shape as the UCI HAR smartphone data: 561 features, 6 activities, 7352/2947 rows."""
        return cls(seed=seed)

    @classmethod
    def small(cls, seed=0):
        return cls(num_classes=4, k=24, n_train=800, n_test=400, intrinsic_dim=3, seed=seed)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def make_synthetic(num_classes, k, n, spread, rng, *, intrinsic_dim=None, center_scale=0.5,
                   noise_floor=0.0, centers=None, basis=None, split="train") -> DatasetSplit:
    """Balanced Gaussian clusters clipped to [-1, 1].

    With ``intrinsic_dim`` the within-class noise lives in a shared random
    subspace of that dimension; otherwise it is isotropic. ``noise_floor``
    adds independent per-feature noise of that standard deviation on top.
    """
    if num_classes < 2:
        raise DomainError("need at least 2 classes")
    if centers is None:
        centers = rng.uniform(-center_scale, center_scale, size=(num_classes, k))
    if intrinsic_dim and basis is None:
        basis = rng.standard_normal((intrinsic_dim, k)) / np.sqrt(intrinsic_dim)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    if intrinsic_dim:
        noise = rng.standard_normal((n, intrinsic_dim)) @ basis
    else:
        noise = rng.standard_normal((n, k))
    x = centers[labels] + spread * noise
    if noise_floor:
        x += noise_floor * rng.standard_normal((n, k))
    np.clip(x, -1.0, 1.0, out=x)
    return DatasetSplit(x, labels, split, num_classes)


def synthetic_splits(cfg: SyntheticConfig):
    """Train and test splits drawn from the same cluster geometry."""
    rng = make_rng(cfg.seed, 0xDA7A)
    centers = rng.uniform(-cfg.center_scale, cfg.center_scale, size=(cfg.num_classes, cfg.k))
    basis = None
    if cfg.intrinsic_dim:
        basis = rng.standard_normal((cfg.intrinsic_dim, cfg.k)) / np.sqrt(cfg.intrinsic_dim)
    common = dict(intrinsic_dim=cfg.intrinsic_dim, noise_floor=cfg.noise_floor,
                  centers=centers, basis=basis)
    train = make_synthetic(cfg.num_classes, cfg.k, cfg.n_train, cfg.spread, rng, split="train", **common)
    test = make_synthetic(cfg.num_classes, cfg.k, cfg.n_test, cfg.spread, rng, split="test", **common)
    return train, test


HAR_ENV = "LEAKGUARD_HAR_DIR"


def find_har_dir(explicit=None):
    """Locate an extracted "UCI HAR Dataset" directory, or return None."""
    candidates = [explicit, os.environ.get(HAR_ENV), "data/UCI HAR Dataset", "data/har"]
    for c in candidates:
        if c and (Path(c) / "train" / "X_train.txt").exists():
            return Path(c)
    return None


def load_uci_har(root):
    """Train/test splits from the UCI HAR layout (X_*.txt already in [-1, 1], labels 1..6)."""
    root = Path(root)
    out = []
    for split in ("train", "test"):
        x = np.loadtxt(root / split / f"X_{split}.txt", dtype=np.float64, ndmin=2)
        y = np.loadtxt(root / split / f"y_{split}.txt", dtype=np.int64, ndmin=1) - 1
        out.append(DatasetSplit(np.clip(x, -1.0, 1.0), y, split, 6))
    return tuple(out)
