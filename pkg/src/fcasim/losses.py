"""Training objectives: CE, focal, balanced softmax, KL consistency, FedProx.

All losses take logits of shape ``batch x C`` and integer labels and return a
scalar :class:`~fcasim.autodiff.Tensor` (mean over the batch).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from fcasim import autodiff as ad
from fcasim.autodiff import DimensionError, Tensor

# log(pi_c) for classes with zero training samples
LOG_PRIOR_FLOOR = math.log(1e-12)


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class ClassPrior:
    counts: tuple[int, ...]
    client_id: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if any(c < 0 for c in self.counts):
            raise ValueError("class counts must be non-negative")

    @classmethod
    def from_labels(cls, labels: Sequence[int], num_classes: int, client_id=None) -> "ClassPrior":
        counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes)
        return cls(tuple(counts.tolist()), client_id)

    @classmethod
    def uniform(cls, num_classes: int) -> "ClassPrior":
        return cls((1,) * num_classes)

    @property
    def num_classes(self) -> int:
        return len(self.counts)

    @property
    def pi(self) -> np.ndarray:
        counts = np.asarray(self.counts, dtype=np.float64)
        total = counts.sum()
        return counts / total if total > 0 else counts

    @property
    def log_pi(self) -> np.ndarray:
        pi = self.pi
        with np.errstate(divide="ignore"):
            return np.where(pi > 0, np.log(np.where(pi > 0, pi, 1.0)), LOG_PRIOR_FLOOR)


class Direction(str, enum.Enum):
    PERSONALIZED_GUIDES_FEDERATED = "personalized_guides_federated"
    FEDERATED_GUIDES_PERSONALIZED = "federated_guides_personalized"
    BIDIRECTIONAL = "bidirectional"


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    direction: Direction = Direction.PERSONALIZED_GUIDES_FEDERATED
    consistency: bool = True
    # KL on prior-shifted logits instead of raw logits
    calibrated_consistency: bool = True

    def __post_init__(self):
        object.__setattr__(self, "direction", Direction(self.direction))
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


LAMBDA_PRESETS = {
    "table5_best": (1.0, 3.0),
    "equal": (1.0, 1.0),
}


def _check_labels(logits: Tensor, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.values.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} and labels {labels.shape} disagree")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    return labels


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = _check_labels(logits, labels)
    return ad.scale(ad.mean(ad.pick(ad.log_softmax(logits), labels)), -1.0)


def focal_loss(logits: Tensor, labels, gamma: float = 2.0) -> Tensor:
    """Mean of ``-(1 - p_t)**gamma * log p_t``."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    labels = _check_labels(logits, labels)
    log_pt = ad.pick(ad.log_softmax(logits), labels)
    if gamma == 0:
        return ad.scale(ad.mean(log_pt), -1.0)
    one_minus = ad.sub(Tensor(np.ones(log_pt.shape)), ad.exp(log_pt))
    return ad.scale(ad.mean(ad.mul(ad.power(one_minus, gamma), log_pt)), -1.0)


def balanced_softmax(logits: Tensor, labels, prior: ClassPrior) -> Tensor:
    """Cross-entropy on ``logits + log(pi)``; zero-count classes use a floored log prior."""
    labels = _check_labels(logits, labels)
    if prior.num_classes != logits.shape[1]:
        raise DimensionError(f"prior has {prior.num_classes} classes, logits have {logits.shape[1]}")
    counts = np.asarray(prior.counts)
    if labels.size and np.any(counts[labels] == 0):
        bad = sorted(set(labels[counts[labels] == 0].tolist()))
        raise ContractError(f"labels {bad} have zero count in the prior")
    return cross_entropy(ad.add(logits, Tensor(prior.log_pi)), labels)


def _directed_kl(guide_logits: Tensor, pred_logits: Tensor) -> Tensor:
    """Batch mean of KL(softmax(guide) || softmax(pred)); the guide is detached."""
    guide_logp = ad.stop_gradient(ad.log_softmax(guide_logits))
    guide_p = Tensor(np.exp(guide_logp.values))
    pred_logp = ad.log_softmax(pred_logits)
    per_elem = ad.mul(guide_p, ad.sub(guide_logp, pred_logp))
    return ad.scale(ad.sum(per_elem), 1.0 / guide_logits.shape[0])


def kl_consistency(fed_logits: Tensor, personal_logits: Tensor,
                   direction: Direction | str = Direction.PERSONALIZED_GUIDES_FEDERATED) -> Tensor:
    """KL consistency between the two heads.

    ``personalized_guides_federated``: KL(p_personal || p_fed) with the
    personal side detached, so only the federated path receives gradient.
    ``federated_guides_personalized`` swaps the roles, and ``bidirectional``
    adds both directed terms.
    """
    if fed_logits.shape != personal_logits.shape:
        raise DimensionError(f"logit shapes differ: {fed_logits.shape} vs {personal_logits.shape}")
    direction = Direction(direction)
    if direction is Direction.PERSONALIZED_GUIDES_FEDERATED:
        return _directed_kl(personal_logits, fed_logits)
    if direction is Direction.FEDERATED_GUIDES_PERSONALIZED:
        return _directed_kl(fed_logits, personal_logits)
    return ad.add(_directed_kl(personal_logits, fed_logits),
                  _directed_kl(fed_logits, personal_logits))


def fca_client_loss(fed_logits: Tensor, personal_logits: Tensor, labels, prior: ClassPrior,
                    weights: LossWeights) -> Tensor:
    """``lambda1 * BSM(fed) + lambda2 * BSM(personal) + KL consistency``.

    Terms with zero weight are left out of the graph entirely, so e.g. with
    ``lambda2 == 0`` the personal head is reachable only through the
    stop-gradient edge and its gradient is exactly zero.
    """
    terms = []
    if weights.lambda1 != 0:
        terms.append(ad.scale(balanced_softmax(fed_logits, labels, prior), weights.lambda1))
    if weights.lambda2 != 0:
        terms.append(ad.scale(balanced_softmax(personal_logits, labels, prior), weights.lambda2))
    if weights.consistency:
        f, p = fed_logits, personal_logits
        if weights.calibrated_consistency:
            shift = Tensor(prior.log_pi)
            f, p = ad.add(f, shift), ad.add(p, shift)
        terms.append(kl_consistency(f, p, weights.direction))
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def proximal_term(current: Mapping[str, Tensor], anchor: Mapping[str, np.ndarray], mu: float) -> Tensor:
    """``mu/2 * ||current - anchor||^2`` summed over every parameter array."""
    if set(current) != set(anchor):
        raise DimensionError("proximal term: parameter names differ")
    total = None
    for name in sorted(current):
        cur, anc = current[name], np.asarray(anchor[name])
        if cur.shape != anc.shape:
            raise DimensionError(f"proximal term: {name} has shape {cur.shape} vs {anc.shape}")
        diff = ad.sub(cur, Tensor(anc))
        sq = ad.sum(ad.mul(diff, diff))
        total = sq if total is None else ad.add(total, sq)
    if total is None:
        return Tensor(0.0)
    return ad.scale(total, mu / 2.0)
