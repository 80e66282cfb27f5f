"""Non-IID federated splits: per-class Dirichlet allocation with class removal."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from fcasim.losses import ClassPrior

MAX_RETRIES = 16

# Concentrations listed from the most to the least frequent class. The rarest
# class gets the skewed 0.5, the most frequent classes the near-uniform 50.
SPLIT1_MAJORITY_ALPHA, SPLIT1_MINORITY_ALPHA = 50.0, 0.5
SPLIT2_ALPHA_BY_FREQUENCY = (50.0, 30.0, 10.0, 5.0, 0.5)
SPLIT2_MISSING_PROB = 0.3


class PartitionError(RuntimeError):
    pass


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int
    per_class_alpha: tuple[float, ...]
    missing_class_prob: float = 0.0
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "per_class_alpha", tuple(float(a) for a in self.per_class_alpha))
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if not self.per_class_alpha or min(self.per_class_alpha) <= 0:
            raise ValueError("Dirichlet concentrations must be positive")
        if not 0.0 <= self.missing_class_prob <= 1.0:
            raise ValueError("missing_class_prob must lie in [0, 1]")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")


@dataclass
class Partition:
    """Per-client sample indices. ``assignment[k] == sorted(train[k] + test[k])``."""

    num_classes: int
    train: list[np.ndarray]
    test: list[np.ndarray]
    removed_classes: list[frozenset]
    dropped: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    seed_used: int = 0

    @property
    def num_clients(self) -> int:
        return len(self.train)

    @property
    def assignment(self) -> list[np.ndarray]:
        return [np.sort(np.concatenate([tr, te])) for tr, te in zip(self.train, self.test)]

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "seed_used": self.seed_used,
            "clients": [
                {"train": tr.tolist(), "test": te.tolist(), "removed_classes": sorted(rc)}
                for tr, te, rc in zip(self.train, self.test, self.removed_classes)
            ],
            "dropped": self.dropped.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Partition":
        clients = d["clients"]
        return cls(
            num_classes=int(d["num_classes"]),
            train=[np.asarray(c["train"], dtype=np.int64) for c in clients],
            test=[np.asarray(c["test"], dtype=np.int64) for c in clients],
            removed_classes=[frozenset(int(x) for x in c["removed_classes"]) for c in clients],
            dropped=np.asarray(d.get("dropped", []), dtype=np.int64),
            seed_used=int(d.get("seed_used", 0)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "Partition":
        return cls.from_dict(json.loads(Path(path).read_text()))


def largest_remainder(total: int, proportions: np.ndarray) -> np.ndarray:
    """Integer counts proportional to ``proportions`` that sum to ``total`` exactly."""
    raw = total * np.asarray(proportions, dtype=np.float64)
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _draw(labels: np.ndarray, spec: PartitionSpec, num_classes: int, seed: int) -> Partition:
    rng = np.random.default_rng(seed)
    K = spec.num_clients
    per_client = [[[] for _ in range(num_classes)] for _ in range(K)]
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(K, spec.per_class_alpha[c]))
        counts = largest_remainder(idx.size, props)
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for k in range(K):
            per_client[k][c] = idx[bounds[k]:bounds[k + 1]]

    removed = [frozenset(np.flatnonzero(rng.random(num_classes) < spec.missing_class_prob).tolist())
               for _ in range(K)]

    train, test, dropped = [], [], []
    for k in range(K):
        tr, te = [], []
        for c in range(num_classes):
            idx = per_client[k][c]
            if c in removed[k]:
                dropped.append(idx)
                continue
            n_train = int(np.floor(spec.train_fraction * idx.size + 0.5))
            tr.append(idx[:n_train])
            te.append(idx[n_train:])
        train.append(np.sort(np.concatenate(tr)) if tr else np.zeros(0, dtype=np.int64))
        test.append(np.sort(np.concatenate(te)) if te else np.zeros(0, dtype=np.int64))
    dropped_arr = np.sort(np.concatenate(dropped)) if dropped else np.zeros(0, dtype=np.int64)
    return Partition(num_classes, train, test, removed, dropped_arr.astype(np.int64), seed)


def dirichlet_partition(labels: Sequence[int], spec: PartitionSpec) -> Partition:
    """Allocate each class across clients by Dirichlet(alpha_c) proportions.

    Each (client, class) pair is then removed with ``missing_class_prob`` and
    what remains is split per class into train/test. A draw leaving any client
    with an empty train or test shard is redrawn with ``seed + attempt`` up to
    ``MAX_RETRIES`` times.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("labels must be non-empty")
    num_classes = int(labels.max()) + 1
    if num_classes > len(spec.per_class_alpha):
        raise ValueError(f"labels contain {num_classes} classes but only "
                         f"{len(spec.per_class_alpha)} concentrations were given")
    num_classes = len(spec.per_class_alpha)
    for attempt in range(MAX_RETRIES + 1):
        part = _draw(labels, spec, num_classes, spec.seed + attempt)
        if all(tr.size > 0 for tr in part.train) and all(te.size > 0 for te in part.test):
            return part
    raise PartitionError(f"no valid partition after {MAX_RETRIES} redraws "
                         f"(K={spec.num_clients}, alpha={spec.per_class_alpha})")


def compute_prior(partition: Partition, client: int, labels: Sequence[int]) -> ClassPrior:
    """Class frequencies of ``client``'s train shard."""
    if not 0 <= client < partition.num_clients:
        raise IndexError(f"no client {client}")
    idx = partition.train[client]
    if idx.size == 0:
        raise PartitionError(f"client {client} has an empty train shard")
    return ClassPrior.from_labels(np.asarray(labels)[idx], partition.num_classes, client)


def alpha_by_frequency(labels, schedule: Sequence[float], num_classes: int = None) -> tuple[float, ...]:
    """Give ``schedule[i]`` to the i-th most frequent class (ties by class id)."""
    labels = np.asarray(labels, dtype=np.int64)
    C = num_classes or int(labels.max()) + 1
    if len(schedule) != C:
        raise ValueError(f"schedule has {len(schedule)} entries for {C} classes")
    order = np.argsort(-np.bincount(labels, minlength=C), kind="stable")
    alpha = np.empty(C)
    alpha[order] = schedule
    return tuple(float(a) for a in alpha)


def split1_spec(labels, num_clients: int = 5, seed: int = 0, train_fraction: float = 0.8,
                num_classes: int = None) -> PartitionSpec:
    C = num_classes or int(np.max(labels)) + 1
    schedule = (SPLIT1_MAJORITY_ALPHA,) * (C - 1) + (SPLIT1_MINORITY_ALPHA,)
    return PartitionSpec(num_clients, alpha_by_frequency(labels, schedule, C), 0.0, train_fraction, seed)


def split2_spec(labels, num_clients: int = 10, seed: int = 0, train_fraction: float = 0.8,
                num_classes: int = None) -> PartitionSpec:
    return PartitionSpec(num_clients, alpha_by_frequency(labels, SPLIT2_ALPHA_BY_FREQUENCY, num_classes),
                         SPLIT2_MISSING_PROB, train_fraction, seed)


def make_split1(labels, num_clients: int = 5, seed: int = 0, train_fraction: float = 0.8) -> Partition:
    return dirichlet_partition(labels, split1_spec(labels, num_clients, seed, train_fraction))


def make_split2(labels, num_clients: int = 10, seed: int = 0, train_fraction: float = 0.8) -> Partition:
    return dirichlet_partition(labels, split2_spec(labels, num_clients, seed, train_fraction))


def class_counts(partition: Partition, labels, split: str = "train") -> np.ndarray:
    """``K x C`` matrix of per-client class counts."""
    labels = np.asarray(labels)
    shards = partition.train if split == "train" else partition.test
    return np.stack([np.bincount(labels[s], minlength=partition.num_classes) for s in shards])
