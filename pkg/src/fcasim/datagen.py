"""Synthetic long-tailed Gaussian mixtures and a CSV loader."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

STD_FLOOR = 1e-8
DEFAULT_CLASS_COUNTS = (2000, 1200, 600, 250, 60)


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features must be n x d with one label per row")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 5
    dim: int = 8
    class_counts: tuple[int, ...] = DEFAULT_CLASS_COUNTS
    cluster_separation: float = 3.0
    within_class_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "class_counts", tuple(int(c) for c in self.class_counts))
        if len(self.class_counts) != self.num_classes:
            raise ValueError("class_counts must have one entry per class")
        if min(self.class_counts) < 1:
            raise ValueError("class counts must be positive")
        if not (self.cluster_separation > 0 and self.within_class_std > 0):
            raise ValueError("separation and std must be positive")


def generate(spec: SynthSpec) -> Dataset:
    """Class c ~ N(mu_c, std^2 I) with means at radius ``cluster_separation`` on a random sphere."""
    rng = np.random.default_rng(spec.seed)
    directions = rng.standard_normal((spec.num_classes, spec.dim))
    means = spec.cluster_separation * directions / np.linalg.norm(directions, axis=1, keepdims=True)
    feats, labels = [], []
    for c, n in enumerate(spec.class_counts):
        feats.append(means[c] + spec.within_class_std * rng.standard_normal((n, spec.dim)))
        labels.append(np.full(n, c, dtype=np.int64))
    return Dataset(np.concatenate(feats), np.concatenate(labels), spec.num_classes)


def load_csv(path, feature_columns: Sequence[str], label_column: str,
             num_classes: Optional[int] = None) -> Dataset:
    """Read a headed CSV of decimal features and an integer label column."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        for col in [*feature_columns, label_column]:
            if col not in header:
                raise SchemaError(f"{path}: missing column '{col}'")
        f_idx = [header.index(c) for c in feature_columns]
        y_idx = header.index(label_column)
        rows, labels = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise SchemaError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
            vals = []
            for i in f_idx:
                try:
                    v = float(row[i])
                except ValueError:
                    v = float("nan")
                if not math.isfinite(v):
                    raise SchemaError(f"{path}:{line_no}: column '{header[i]}' is not a finite number: {row[i]!r}")
                vals.append(v)
            raw = row[y_idx].strip()
            try:
                y = int(raw)
            except ValueError:
                raise SchemaError(f"{path}:{line_no}: label '{raw}' is not an integer") from None
            if y < 0 or (num_classes is not None and y >= num_classes):
                raise SchemaError(f"{path}:{line_no}: label {y} outside [0, {num_classes})")
            rows.append(vals)
            labels.append(y)
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    labels_arr = np.asarray(labels, dtype=np.int64)
    C = num_classes if num_classes is not None else int(labels_arr.max()) + 1
    return Dataset(np.asarray(rows, dtype=np.float64), labels_arr, C)


def normalize(dataset: Dataset, train_indices) -> Dataset:
    """Standardize every row with mean/std of the training rows only."""
    train_indices = np.asarray(train_indices, dtype=np.int64)
    if train_indices.size == 0:
        raise ValueError("normalization needs at least one training row")
    train = dataset.features[train_indices]
    mean = train.mean(axis=0)
    raw_std = train.std(axis=0)
    std = np.maximum(raw_std, STD_FLOOR)
    out = (dataset.features - mean) / std
    # a constant train column can have a mean off by an ulp; pin it to zero
    out[:, raw_std <= STD_FLOOR] = 0.0
    return replace(dataset, features=out, mean=mean, std=std)
