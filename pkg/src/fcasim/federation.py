"""Synchronous round-based federation: local updates, weighted aggregation, evaluation.

Methods:
    local         each client trains its own model with balanced softmax, no aggregation
    fedavg_ce     FedAvg, cross-entropy
    fedavg_focal  FedAvg, focal loss
    fedavg_bsm    FedAvg, balanced softmax
    fedprox       FedAvg, balanced softmax + proximal term to the round-start model
    fca           shared extractor + federated head, plus a locally kept personal head
"""
from __future__ import annotations

import collections
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from fcasim import autodiff as ad
from fcasim import losses as L
from fcasim.autodiff import Tensor
from fcasim.datagen import Dataset
from fcasim.metrics import (MetricsRecord, PredictionBatch, evaluate_generalization,
                            evaluate_specialization)
from fcasim.model import (ModelConfig, ModelParams, ParamDelta, apply_delta, as_leaves,
                          deserialize_arrays, forward_features, forward_head, init_model,
                          predict_logits, serialize_arrays)
from fcasim.partition import Partition, compute_prior, largest_remainder

log = logging.getLogger(__name__)

METHODS = ("local", "fedavg_ce", "fedavg_focal", "fedavg_bsm", "fedprox", "fca")

# per-method minibatch counters, used to check that methods do not share code paths
call_counts: collections.Counter = collections.Counter()


class DivergenceError(RuntimeError):
    pass


class AggregationError(ValueError):
    pass


@dataclass(frozen=True)
class RoundPlan:
    rounds: int = 60
    local_epochs: int = 1
    batch_size: int = 64
    lr: float = 1e-3
    milestones: tuple[int, ...] = (45, 52)
    lr_decay: float = 0.1
    weight_decay: float = 5e-4
    method: str = "fca"
    loss_weights: L.LossWeights = field(default_factory=L.LossWeights)
    focal_gamma: float = 2.0
    prox_mu: float = 0.01
    hidden_dims: tuple[int, ...] = (32, 16)
    seed: int = 0
    eval_every: int = 10

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.local_epochs < 0 or self.batch_size < 1:
            raise ValueError("local_epochs must be >= 0 and batch_size >= 1")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")
        if self.milestones and (self.milestones[0] < 0 or self.milestones[-1] >= self.rounds):
            raise ValueError("milestones must lie in [0, rounds)")
        if self.method not in METHODS:
            raise ValueError(f"unknown method '{self.method}', expected one of {METHODS}")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")

    @classmethod
    def scaled(cls, rounds: int, **kw) -> "RoundPlan":
        """Milestones at 0.75 and 0.875 of ``rounds``, i.e. 60 and 70 of 80."""
        ms = sorted({int(round(0.75 * rounds)), int(round(0.875 * rounds))} - {0, rounds})
        return cls(rounds=rounds, milestones=tuple(m for m in ms if 0 < m < rounds), **kw)


def lr_schedule(t: int, plan: RoundPlan) -> float:
    return plan.lr * plan.lr_decay ** sum(1 for m in plan.milestones if m <= t)


class Adam:
    """Adam with decoupled weight decay over a dict of named arrays."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
             lr: float) -> dict[str, np.ndarray]:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        out = {}
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = self.v.get(name)
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            p = p * (1 - lr * self.weight_decay)
            out[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {f"m.{k}": v for k, v in self.m.items()}
        arrays.update({f"v.{k}": v for k, v in self.v.items()})
        arrays["t"] = np.array([float(self.t)])
        return arrays

    @classmethod
    def from_state(cls, arrays: Mapping[str, np.ndarray], **kw) -> "Adam":
        opt = cls(**kw)
        opt.t = int(arrays["t"][0])
        for k, v in arrays.items():
            if k.startswith("m."):
                opt.m[k[2:]] = v.copy()
            elif k.startswith("v."):
                opt.v[k[2:]] = v.copy()
        return opt


@dataclass
class ClientState:
    client_id: int
    train_idx: np.ndarray
    test_idx: np.ndarray
    prior: L.ClassPrior
    personal_head: Optional[dict[str, np.ndarray]] = None
    personal_opt: Optional[Adam] = None
    # the client's own full model, local-learning baseline only
    local_params: Optional[ModelParams] = None


@dataclass
class ServerState:
    params: ModelParams
    weights: tuple[float, ...]
    round: int = 0


def aggregation_weights(train_sizes: Sequence[int]) -> tuple[float, ...]:
    """``|D_k| / sum |D_i|`` rounded to multiples of 2**-52 so they sum to exactly 1."""
    sizes = np.asarray(train_sizes, dtype=np.float64)
    if sizes.size == 0 or np.any(sizes <= 0):
        raise AggregationError("every client needs a non-empty train shard")
    units = largest_remainder(2 ** 52, sizes / sizes.sum())
    return tuple(float(u) * 2.0 ** -52 for u in units)


def _personal_head_trained(w: L.LossWeights) -> bool:
    if w.lambda2 != 0:
        return True
    return w.consistency and w.direction is not L.Direction.PERSONALIZED_GUIDES_FEDERATED


def _batch_loss(method: str, plan: RoundPlan, feats: Tensor, head: dict, personal: Optional[dict],
                yb: np.ndarray, prior: L.ClassPrior, prox_leaves: Optional[dict],
                anchor: Optional[Mapping[str, np.ndarray]]) -> Tensor:
    call_counts[method] += 1
    fed = forward_head(head, feats)
    if method == "fca":
        per = forward_head(personal, feats)
        return L.fca_client_loss(fed, per, yb, prior, plan.loss_weights)
    if method == "fedavg_ce":
        return L.cross_entropy(fed, yb)
    if method == "fedavg_focal":
        return L.focal_loss(fed, yb, plan.focal_gamma)
    loss = L.balanced_softmax(fed, yb, prior)
    if method == "fedprox":
        loss = ad.add(loss, L.proximal_term(prox_leaves, anchor, plan.prox_mu))
    return loss


def _flat_names(params: ModelParams) -> dict[str, np.ndarray]:
    out = {f"extractor.{k}": v for k, v in params.extractor.items()}
    out.update({f"head.{k}": v for k, v in params.head.items()})
    return out


def _unflatten(flat: Mapping[str, np.ndarray]) -> ModelParams:
    ext = {k[len("extractor."):]: v for k, v in flat.items() if k.startswith("extractor.")}
    head = {k[len("head."):]: v for k, v in flat.items() if k.startswith("head.")}
    return ModelParams(ext, head)


def batch_rng(seed: int, round_idx: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, round_idx, client_id])


def train_local(shared: ModelParams, X: np.ndarray, y: np.ndarray, prior: L.ClassPrior,
                plan: RoundPlan, round_idx: int, client_id: int,
                personal_head: Optional[dict] = None, personal_opt: Optional[Adam] = None,
                trace: Optional[list] = None):
    """Run ``plan.local_epochs`` of minibatch Adam on one client's train shard.

    Returns ``(new_shared, new_personal_head)``. The shared-block optimizer is
    fresh every call; ``personal_opt`` is mutated in place. When ``trace`` is
    a list, one ``(shared_before, personal_before, batch_idx, personal_grads, loss)``
    tuple is appended per step (test hook).
    """
    method = plan.method
    if X.shape[0] == 0:
        raise ValueError(f"client {client_id} has no training data")
    lr = lr_schedule(round_idx, plan)
    opt = Adam(weight_decay=plan.weight_decay)
    flat = _flat_names(shared)
    anchor = dict(flat) if method == "fedprox" else None
    step_personal = method == "fca" and _personal_head_trained(plan.loss_weights)
    rng = batch_rng(plan.seed, round_idx, client_id)
    n = X.shape[0]
    for _ in range(plan.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, plan.batch_size):
            b = order[start:start + plan.batch_size]
            leaves = as_leaves(flat)
            ext = {k[len("extractor."):]: v for k, v in leaves.items() if k.startswith("extractor.")}
            head = {k[len("head."):]: v for k, v in leaves.items() if k.startswith("head.")}
            personal = as_leaves(personal_head) if method == "fca" else None
            feats = forward_features(ext, Tensor(X[b]))
            loss = _batch_loss(method, plan, feats, head, personal, y[b], prior, leaves, anchor)
            if not math.isfinite(loss.item()):
                raise DivergenceError(f"non-finite loss {loss.item()} "
                                      f"(round {round_idx}, client {client_id}, method {method})")
            ad.backward(loss)
            if trace is not None:
                trace.append((dict(flat), personal_head, b,
                              {k: t.grad for k, t in personal.items()} if personal else None,
                              loss.item()))
            flat = opt.step(flat, {k: t.grad for k, t in leaves.items()}, lr)
            if step_personal:
                personal_head = personal_opt.step(personal_head, {k: t.grad for k, t in personal.items()}, lr)
    return _unflatten(flat), personal_head


def init_clients(dataset: Dataset, partition: Partition, fed_params: ModelParams,
                 method: str) -> list[ClientState]:
    clients = []
    for k in range(partition.num_clients):
        prior = compute_prior(partition, k, dataset.labels)
        c = ClientState(k, partition.train[k], partition.test[k], prior)
        if method == "fca":
            # personal heads start as copies of the federated head
            c.personal_head = {n: v.copy() for n, v in fed_params.head.items()}
            c.personal_opt = Adam()
        if method == "local":
            c.local_params = fed_params.copy()
        clients.append(c)
    return clients


def local_update(client: ClientState, fed_params: ModelParams, plan: RoundPlan, dataset: Dataset,
                 round_idx: int = 0) -> tuple[ParamDelta, ClientState]:
    """Download, train locally, return the shared-block delta and the updated client.

    Only the extractor and federated head appear in the delta; the personal
    head stays in the returned :class:`ClientState`.
    """
    if client.train_idx.size == 0:
        raise ValueError(f"client {client.client_id} has an empty train shard")
    if plan.local_epochs == 0:
        return ParamDelta.between(fed_params, fed_params), client
    X, y = dataset.features[client.train_idx], dataset.labels[client.train_idx]
    opt = client.personal_opt
    if opt is not None:
        opt = Adam.from_state(opt.state_arrays())
        opt.weight_decay = plan.weight_decay
    new_shared, new_head = train_local(fed_params, X, y, client.prior, plan, round_idx,
                                       client.client_id, client.personal_head, opt)
    return ParamDelta.between(fed_params, new_shared), replace(client, personal_head=new_head,
                                                               personal_opt=opt)


def aggregate(server: ServerState, deltas: Sequence[tuple[int, ParamDelta]]) -> ServerState:
    """``params + sum_k w_k * delta_k`` over all clients, summed in client-id order."""
    ids = [cid for cid, _ in deltas]
    if len(set(ids)) != len(ids):
        raise AggregationError(f"duplicate client ids in {ids}")
    expected = set(range(len(server.weights)))
    if set(ids) != expected:
        raise AggregationError(f"missing deltas for clients {sorted(expected - set(ids))}")
    ordered = sorted(deltas, key=lambda cd: cd[0])
    params = apply_delta(server.params, [(server.weights[cid], d) for cid, d in ordered])
    return ServerState(params, server.weights, server.round + 1)


@dataclass
class ExperimentResult:
    records: list[MetricsRecord]
    server: ServerState
    clients: list[ClientState]


def _predict(dataset: Dataset, idx: np.ndarray, extractor, head) -> PredictionBatch:
    return PredictionBatch.from_logits(predict_logits(extractor, head, dataset.features[idx]),
                                       dataset.labels[idx])


def evaluate(server: ServerState, clients: Sequence[ClientState], dataset: Dataset,
             method: str, round_idx: int, seed: int = 0, label: str = "") -> MetricsRecord:
    union = np.concatenate([c.test_idx for c in clients])
    gen_clients = None
    if method == "local":
        spec_batches = [_predict(dataset, c.test_idx, c.local_params.extractor, c.local_params.head)
                        for c in clients]
        gen = evaluate_generalization([_predict(dataset, union, c.local_params.extractor,
                                                c.local_params.head) for c in clients])
        gen_clients = (gen[2], gen[3])
    else:
        ext = server.params.extractor
        spec_batches = [
            _predict(dataset, c.test_idx, ext,
                     c.personal_head if method == "fca" else server.params.head)
            for c in clients]
        gen = evaluate_generalization([_predict(dataset, union, ext, server.params.head)])
    s_acc, s_auc, accs, aucs = evaluate_specialization(spec_batches)
    return MetricsRecord(round_idx, accs, aucs, s_acc, s_auc, gen[0], gen[1],
                         method=label or method, seed=seed,
                         gen_client_bacc=gen_clients[0] if gen_clients else None,
                         gen_client_bauc=gen_clients[1] if gen_clients else None)


def run_experiment(dataset: Dataset, partition: Partition, plan: RoundPlan, label: str = "",
                   checkpoint_dir: Optional[Path] = None, checkpoint_every: int = 0,
                   resume_from: Optional[Path] = None) -> ExperimentResult:
    """Run ``plan.rounds`` synchronous rounds with full participation."""
    if partition.num_classes != dataset.num_classes:
        raise ValueError(f"partition has {partition.num_classes} classes, dataset {dataset.num_classes}")
    cfg = ModelConfig(dataset.dim, plan.hidden_dims, dataset.num_classes, plan.seed)
    fed = init_model(cfg)
    clients = init_clients(dataset, partition, fed, plan.method)
    weights = aggregation_weights([c.train_idx.size for c in clients])
    server = ServerState(fed, weights, 0)
    if resume_from is not None:
        server, clients = load_checkpoint(resume_from, server, clients)

    records = []
    for t in range(server.round, plan.rounds):
        try:
            server, clients = run_round(server, clients, plan, dataset, t)
        except DivergenceError:
            raise
        except Exception as exc:
            raise RuntimeError(f"round {t}: {exc}") from exc
        done = t + 1
        if done % plan.eval_every == 0 or done == plan.rounds:
            rec = evaluate(server, clients, dataset, plan.method, done, plan.seed, label)
            log.debug("%s seed=%d round=%d S-bACC=%.4f G-bACC=%.4f", rec.method, plan.seed,
                      done, rec.spec_bacc, rec.gen_bacc)
            records.append(rec)
        if checkpoint_dir is not None and checkpoint_every and done % checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"round_{done:04d}.bin", server, clients)
    return ExperimentResult(records, server, clients)


def run_round(server: ServerState, clients: list[ClientState], plan: RoundPlan, dataset: Dataset,
              t: int) -> tuple[ServerState, list[ClientState]]:
    if plan.method == "local":
        updated = []
        for c in clients:
            X, y = dataset.features[c.train_idx], dataset.labels[c.train_idx]
            params, _ = train_local(c.local_params, X, y, c.prior, plan, t, c.client_id)
            updated.append(replace(c, local_params=params))
        return ServerState(server.params, server.weights, server.round + 1), updated
    deltas, updated = [], []
    for c in clients:
        delta, c2 = local_update(c, server.params, plan, dataset, t)
        deltas.append((c.client_id, delta))
        updated.append(c2)
    return aggregate(server, deltas), updated


def save_checkpoint(path: Path, server: ServerState, clients: Sequence[ClientState]) -> None:
    blocks: dict[str, dict[str, np.ndarray]] = {
        "extractor": dict(server.params.extractor),
        "head": dict(server.params.head),
        "server": {"round": np.array([float(server.round)]),
                   "weights": np.asarray(server.weights)},
    }
    for c in clients:
        if c.personal_head is not None:
            blocks[f"personal.{c.client_id}"] = dict(c.personal_head)
            blocks[f"personal_opt.{c.client_id}"] = c.personal_opt.state_arrays()
        if c.local_params is not None:
            blocks[f"local.{c.client_id}.extractor"] = dict(c.local_params.extractor)
            blocks[f"local.{c.client_id}.head"] = dict(c.local_params.head)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(serialize_arrays(blocks))


def load_checkpoint(path: Path, server: ServerState,
                    clients: Sequence[ClientState]) -> tuple[ServerState, list[ClientState]]:
    """Restore server and client state saved by :func:`save_checkpoint` onto fresh templates."""
    blocks = deserialize_arrays(Path(path).read_bytes())
    srv = ServerState(ModelParams(blocks["extractor"], blocks["head"]),
                      tuple(blocks["server"]["weights"].tolist()),
                      int(blocks["server"]["round"][0]))
    restored = []
    for c in clients:
        k = c.client_id
        c = replace(c)
        if f"personal.{k}" in blocks:
            c.personal_head = blocks[f"personal.{k}"]
            c.personal_opt = Adam.from_state(blocks[f"personal_opt.{k}"])
        if f"local.{k}.extractor" in blocks:
            c.local_params = ModelParams(blocks[f"local.{k}.extractor"], blocks[f"local.{k}.head"])
        restored.append(c)
    return srv, restored
