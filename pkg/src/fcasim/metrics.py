"""Balanced accuracy / balanced AUC and the specialization-generalization protocol."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class PredictionBatch:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "scores", np.asarray(self.scores, dtype=np.float64))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        if self.scores.ndim != 2 or self.scores.shape[0] != self.labels.shape[0]:
            raise MetricError(f"scores {self.scores.shape} do not match {self.labels.shape[0]} labels")

    @classmethod
    def from_logits(cls, logits: np.ndarray, labels) -> "PredictionBatch":
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z)
        return cls(p / p.sum(axis=1, keepdims=True), labels)


def balanced_accuracy(preds: PredictionBatch) -> float:
    """Mean recall over the classes present in ``preds.labels``."""
    if preds.labels.size == 0:
        raise MetricError("balanced accuracy of an empty batch")
    predicted = preds.scores.argmax(axis=1)
    recalls = [np.mean(predicted[preds.labels == c] == c) for c in np.unique(preds.labels)]
    return float(np.mean(recalls))


def class_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney AUC of ``scores`` for a boolean positive mask; ties count 1/2."""
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def balanced_auc(preds: PredictionBatch) -> float:
    """Mean one-vs-rest AUC over classes that have both positives and negatives."""
    aucs = []
    for c in range(preds.scores.shape[1]):
        positive = preds.labels == c
        if positive.any() and not positive.all():
            aucs.append(class_auc(preds.scores[:, c], positive))
    if not aucs:
        raise MetricError("no class has both positive and negative samples")
    return float(np.mean(aucs))


def score(preds: PredictionBatch) -> tuple[float, float]:
    """(bACC, bAUC); bAUC is NaN when no class is scoreable."""
    try:
        auc = balanced_auc(preds)
    except MetricError:
        auc = float("nan")
    return balanced_accuracy(preds), auc


def _nanmean(xs) -> float:
    xs = np.asarray(xs, dtype=np.float64)
    return float(np.mean(xs[~np.isnan(xs)])) if np.any(~np.isnan(xs)) else float("nan")


@dataclass
class MetricsRecord:
    round: int
    client_bacc: list[float]
    client_bauc: list[float]
    spec_bacc: float
    spec_bauc: float
    gen_bacc: float
    gen_bauc: float
    method: str = ""
    seed: int = 0
    # local learning reports one generalization score per client model
    gen_client_bacc: Optional[list[float]] = None
    gen_client_bauc: Optional[list[float]] = None

    @property
    def avg_bacc(self) -> float:
        return (self.spec_bacc + self.gen_bacc) / 2

    @property
    def avg_bauc(self) -> float:
        return (self.spec_bauc + self.gen_bauc) / 2

    def as_dict(self) -> dict:
        return {
            "round": self.round, "method": self.method, "seed": self.seed,
            "spec_bacc": self.spec_bacc, "spec_bauc": self.spec_bauc,
            "gen_bacc": self.gen_bacc, "gen_bauc": self.gen_bauc,
            "avg_bacc": self.avg_bacc, "avg_bauc": self.avg_bauc,
            "client_bacc": list(self.client_bacc), "client_bauc": list(self.client_bauc),
        }


def evaluate_specialization(client_batches: Sequence[PredictionBatch]) -> tuple[float, float, list, list]:
    """Unweighted mean over clients of each client's own test-set metrics.

    ``client_batches[k]`` holds client k's predictions on its own test shard,
    already made with the head that client uses for specialization. Clients
    whose shard has a single class have no bAUC and are left out of that mean.
    """
    if not client_batches:
        raise MetricError("no clients to evaluate")
    accs, aucs = [], []
    for k, batch in enumerate(client_batches):
        if batch.labels.size == 0:
            raise MetricError(f"client {k} has an empty test shard")
        a, u = score(batch)
        accs.append(a)
        aucs.append(u)
    return float(np.mean(accs)), _nanmean(aucs), accs, aucs


def evaluate_generalization(batches: Sequence[PredictionBatch]) -> tuple[float, float, list, list]:
    """Metrics on the aggregated test set.

    One batch for a single federated model; for local learning pass one batch
    per client model (each over the full aggregated set) and the scores are
    averaged.
    """
    if not batches:
        raise MetricError("nothing to evaluate")
    accs, aucs = zip(*(score(b) for b in batches))
    return float(np.mean(accs)), _nanmean(aucs), list(accs), list(aucs)
