"""Experiment configuration: YAML in, validated dataclasses out, and back.

Every mapping is checked against a closed set of keys so that a typo such as
``lamda1`` fails loudly instead of silently falling back to a default.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional, Union

import yaml

from fcasim.datagen import DEFAULT_CLASS_COUNTS, SynthSpec
from fcasim.federation import METHODS, RoundPlan
from fcasim.losses import LAMBDA_PRESETS, Direction, LossWeights
from fcasim.partition import PartitionSpec, split1_spec, split2_spec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CsvSource:
    path: str
    feature_columns: tuple[str, ...]
    label_column: str
    num_classes: Optional[int] = None


@dataclass(frozen=True)
class PartitionConfig:
    preset: str = "split2"
    num_clients: Optional[int] = None
    seed: int = 0
    train_fraction: float = 0.8
    per_class_alpha: Optional[tuple[float, ...]] = None
    missing_class_prob: float = 0.0

    def spec(self, labels, num_classes: Optional[int] = None) -> PartitionSpec:
        """Presets place their concentrations by the class frequencies in ``labels``."""
        if self.preset == "split1":
            return split1_spec(labels, self.num_clients or 5, self.seed, self.train_fraction, num_classes)
        if self.preset == "split2":
            return split2_spec(labels, self.num_clients or 10, self.seed, self.train_fraction, num_classes)
        return PartitionSpec(self.num_clients, self.per_class_alpha, self.missing_class_prob,
                             self.train_fraction, self.seed)


@dataclass(frozen=True)
class MethodVariant:
    label: str
    method: str
    loss: LossWeights = field(default_factory=LossWeights)


@dataclass(frozen=True)
class ExperimentConfig:
    data: Union[SynthSpec, CsvSource]
    partition: PartitionConfig
    plan: RoundPlan
    methods: tuple[MethodVariant, ...]
    seeds: tuple[int, ...]
    output_dir: str = "runs/default"
    methods_preset: Optional[str] = None

    def plan_for(self, variant: MethodVariant, seed: int) -> RoundPlan:
        return replace(self.plan, method=variant.method, loss_weights=variant.loss, seed=seed)


TABLE5_GRID = ((1, 1), (1, 2), (1, 3), (2, 1), (3, 1))
_DIRECTION_TAGS = {
    Direction.PERSONALIZED_GUIDES_FEDERATED: "fed_from_personal",
    Direction.FEDERATED_GUIDES_PERSONALIZED: "personal_from_fed",
    Direction.BIDIRECTIONAL: "bidirectional",
}


def expand_methods_preset(name: str, base: LossWeights) -> tuple[MethodVariant, ...]:
    if name == "table4":
        return tuple(MethodVariant(m, m, base) for m in
                     ("local", "fedavg_ce", "fedavg_focal", "fedavg_bsm", "fedprox", "fca"))
    if name == "table5":
        return tuple(
            MethodVariant(f"fca_l{l1}_l{l2}_cr_{'on' if cr else 'off'}", "fca",
                          replace(base, lambda1=float(l1), lambda2=float(l2), consistency=cr))
            for l1, l2 in TABLE5_GRID for cr in (False, True))
    if name == "table6":
        return tuple(MethodVariant(f"fca_{tag}", "fca", replace(base, direction=d, consistency=True))
                     for d, tag in _DIRECTION_TAGS.items())
    raise ConfigError(f"methods: unknown preset '{name}' (expected table4, table5 or table6)")


# --- parsing -----------------------------------------------------------------

_TOP_KEYS = {"data", "partition", "training", "loss", "methods", "seeds", "output_dir"}
_SYNTH_KEYS = {"num_classes", "dim", "class_counts", "cluster_separation", "within_class_std", "seed"}
_CSV_KEYS = {"path", "feature_columns", "label_column", "num_classes"}
_PARTITION_KEYS = {"preset", "num_clients", "seed", "train_fraction", "per_class_alpha",
                   "missing_class_prob"}
_TRAINING_KEYS = {"rounds", "local_epochs", "batch_size", "lr", "milestones", "lr_decay",
                  "weight_decay", "hidden_dims", "focal_gamma", "prox_mu", "eval_every"}
_LOSS_KEYS = {"preset", "lambda1", "lambda2", "consistency", "direction", "calibrated_consistency"}
_VARIANT_KEYS = {"method", "label"} | (_LOSS_KEYS - {"preset"})

DEFAULT_DIM = 8
DEFAULT_LAMBDA_PRESET = "table5_best"
_LABEL_RE = re.compile(r"^[A-Za-z0-9_.\-]+$")


def _mapping(value, where: str) -> dict:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(value).__name__}")
    return value


def _check_keys(d: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(repr(k) for k in unknown)}")


def _num(d: dict, key: str, where: str, default, kind=float):
    if key not in d or d[key] is None:
        return default
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{where}.{key}: expected a number, got {v!r}")
    if kind is int and float(v) != int(v):
        raise ConfigError(f"{where}.{key}: expected an integer, got {v!r}")
    return kind(v)


def _bool(d: dict, key: str, where: str, default: bool) -> bool:
    if key not in d:
        return default
    if not isinstance(d[key], bool):
        raise ConfigError(f"{where}.{key}: expected true/false, got {d[key]!r}")
    return d[key]


def _parse_loss(d: dict, where: str, base: LossWeights, allowed: set) -> LossWeights:
    _check_keys(d, allowed, where)
    l1, l2 = base.lambda1, base.lambda2
    if "preset" in d:
        if d["preset"] not in LAMBDA_PRESETS:
            raise ConfigError(f"{where}.preset: unknown lambda preset {d['preset']!r} "
                              f"(known: {', '.join(sorted(LAMBDA_PRESETS))})")
        if "lambda1" in d or "lambda2" in d:
            raise ConfigError(f"{where}: give either preset or lambda1/lambda2, not both")
        l1, l2 = LAMBDA_PRESETS[d["preset"]]
    l1 = _num(d, "lambda1", where, l1)
    l2 = _num(d, "lambda2", where, l2)
    direction = d.get("direction", base.direction)
    try:
        direction = Direction(direction)
    except ValueError:
        raise ConfigError(f"{where}.direction: unknown direction {direction!r} "
                          f"(expected one of {[x.value for x in Direction]})") from None
    try:
        return LossWeights(l1, l2, direction, _bool(d, "consistency", where, base.consistency),
                           _bool(d, "calibrated_consistency", where, base.calibrated_consistency))
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _parse_data(raw) -> Union[SynthSpec, CsvSource]:
    d = _mapping(raw, "data")
    if not d:
        return SynthSpec(dim=DEFAULT_DIM)
    _check_keys(d, {"synthetic", "csv"}, "data")
    if len(d) != 1:
        raise ConfigError("data: give exactly one of 'synthetic' or 'csv'")
    if "csv" in d:
        c = _mapping(d["csv"], "data.csv")
        _check_keys(c, _CSV_KEYS, "data.csv")
        for key in ("path", "feature_columns", "label_column"):
            if key not in c:
                raise ConfigError(f"data.csv.{key}: required")
        if not isinstance(c["feature_columns"], list) or not c["feature_columns"]:
            raise ConfigError("data.csv.feature_columns: expected a non-empty list")
        return CsvSource(str(c["path"]), tuple(str(x) for x in c["feature_columns"]),
                         str(c["label_column"]), _num(c, "num_classes", "data.csv", None, int))
    s = _mapping(d["synthetic"], "data.synthetic")
    _check_keys(s, _SYNTH_KEYS, "data.synthetic")
    counts = tuple(s.get("class_counts", DEFAULT_CLASS_COUNTS))
    try:
        return SynthSpec(
            num_classes=_num(s, "num_classes", "data.synthetic", len(counts), int),
            dim=_num(s, "dim", "data.synthetic", DEFAULT_DIM, int),
            class_counts=counts,
            cluster_separation=_num(s, "cluster_separation", "data.synthetic", 3.0),
            within_class_std=_num(s, "within_class_std", "data.synthetic", 1.0),
            seed=_num(s, "seed", "data.synthetic", 0, int),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"data.synthetic: {exc}") from None


def _parse_partition(raw) -> PartitionConfig:
    if isinstance(raw, str):
        raw = {"preset": raw}
    d = _mapping(raw, "partition")
    _check_keys(d, _PARTITION_KEYS, "partition")
    preset = d.get("preset", "split2")
    if preset not in ("split1", "split2", "custom"):
        raise ConfigError(f"partition.preset: expected split1, split2 or custom, got {preset!r}")
    alpha = d.get("per_class_alpha")
    if preset == "custom":
        if alpha is None or "num_clients" not in d:
            raise ConfigError("partition: custom preset needs num_clients and per_class_alpha")
    elif alpha is not None or "missing_class_prob" in d:
        raise ConfigError(f"partition: per_class_alpha/missing_class_prob are fixed by preset {preset}")
    cfg = PartitionConfig(preset, _num(d, "num_clients", "partition", None, int),
                          _num(d, "seed", "partition", 0, int),
                          _num(d, "train_fraction", "partition", 0.8),
                          tuple(float(a) for a in alpha) if alpha is not None else None,
                          _num(d, "missing_class_prob", "partition", 0.0))
    if not 0.0 < cfg.train_fraction < 1.0:
        raise ConfigError("partition.train_fraction: must lie in (0, 1)")
    if cfg.num_clients is not None and cfg.num_clients < 1:
        raise ConfigError("partition.num_clients: must be >= 1")
    if preset == "custom":
        try:
            cfg.spec(None)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"partition: {exc}") from None
    return cfg


def _parse_training(raw) -> RoundPlan:
    d = _mapping(raw, "training")
    _check_keys(d, _TRAINING_KEYS, "training")
    where = "training"
    rounds = _num(d, "rounds", where, 60, int)
    kw = dict(
        local_epochs=_num(d, "local_epochs", where, 1, int),
        batch_size=_num(d, "batch_size", where, 64, int),
        lr=_num(d, "lr", where, 1e-3),
        lr_decay=_num(d, "lr_decay", where, 0.1),
        weight_decay=_num(d, "weight_decay", where, 5e-4),
        hidden_dims=tuple(d.get("hidden_dims", (32, 16))),
        focal_gamma=_num(d, "focal_gamma", where, 2.0),
        prox_mu=_num(d, "prox_mu", where, 0.01),
        eval_every=_num(d, "eval_every", where, 10, int),
    )
    try:
        if d.get("milestones") is None:
            return RoundPlan.scaled(rounds, **kw)
        return RoundPlan(rounds=rounds, milestones=tuple(d["milestones"]), **kw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"training: {exc}") from None


def _parse_methods(raw, base: LossWeights) -> tuple[tuple[MethodVariant, ...], Optional[str]]:
    if raw is None:
        raise ConfigError("methods: required")
    if isinstance(raw, str):
        return expand_methods_preset(raw, base), raw
    if not isinstance(raw, list) or not raw:
        raise ConfigError("methods: expected a preset name or a non-empty list")
    variants = []
    for i, item in enumerate(raw):
        where = f"methods[{i}]"
        if isinstance(item, str):
            item = {"method": item}
        item = _mapping(item, where)
        _check_keys(item, _VARIANT_KEYS, where)
        method = item.get("method")
        if method not in METHODS:
            raise ConfigError(f"{where}.method: unknown method {method!r} (expected one of {METHODS})")
        loss = _parse_loss({k: v for k, v in item.items() if k not in ("method", "label")},
                           where, base, _VARIANT_KEYS)
        label = str(item.get("label", method))
        if not _LABEL_RE.match(label):
            raise ConfigError(f"{where}.label: {label!r} may only use letters, digits, '_', '.', '-'")
        variants.append(MethodVariant(label, method, loss))
    labels = [v.label for v in variants]
    dupes = sorted({x for x in labels if labels.count(x) > 1})
    if dupes:
        raise ConfigError(f"methods: duplicate labels {dupes}; give each variant a distinct 'label'")
    return tuple(variants), None


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = _mapping(raw, "config")
    _check_keys(raw, _TOP_KEYS, "config")
    base_loss = _parse_loss(_mapping(raw.get("loss"), "loss"), "loss",
                            LossWeights(*LAMBDA_PRESETS[DEFAULT_LAMBDA_PRESET]), _LOSS_KEYS)
    methods, preset = _parse_methods(raw.get("methods"), base_loss)
    seeds = raw.get("seeds", [0])
    if (not isinstance(seeds, list) or not seeds
            or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds)):
        raise ConfigError("seeds: expected a non-empty list of non-negative integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds: duplicates")
    plan = _parse_training(raw.get("training"))
    return ExperimentConfig(
        data=_parse_data(raw.get("data")),
        partition=_parse_partition(raw.get("partition")),
        plan=replace(plan, loss_weights=base_loss),
        methods=methods,
        seeds=tuple(seeds),
        output_dir=str(raw.get("output_dir", "runs/default")),
        methods_preset=preset,
    )


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        loc = f":{mark.line + 1}:{mark.column + 1}" if mark else ""
        raise ConfigError(f"{path}{loc}: YAML parse error: {getattr(exc, 'problem', exc)}") from None
    return config_from_dict(raw if raw is not None else {})


# --- emitting ----------------------------------------------------------------

def _loss_dict(w: LossWeights) -> dict:
    return {"lambda1": w.lambda1, "lambda2": w.lambda2, "consistency": w.consistency,
            "direction": w.direction.value, "calibrated_consistency": w.calibrated_consistency}


def config_to_dict(cfg: ExperimentConfig) -> dict:
    if isinstance(cfg.data, SynthSpec):
        s = cfg.data
        data = {"synthetic": {"num_classes": s.num_classes, "dim": s.dim,
                              "class_counts": list(s.class_counts),
                              "cluster_separation": s.cluster_separation,
                              "within_class_std": s.within_class_std, "seed": s.seed}}
    else:
        c = cfg.data
        data = {"csv": {"path": c.path, "feature_columns": list(c.feature_columns),
                        "label_column": c.label_column}}
        if c.num_classes is not None:
            data["csv"]["num_classes"] = c.num_classes
    p = cfg.partition
    part = {"preset": p.preset, "seed": p.seed, "train_fraction": p.train_fraction}
    if p.num_clients is not None:
        part["num_clients"] = p.num_clients
    if p.preset == "custom":
        part["per_class_alpha"] = list(p.per_class_alpha)
        part["missing_class_prob"] = p.missing_class_prob
    pl = cfg.plan
    training = {"rounds": pl.rounds, "local_epochs": pl.local_epochs, "batch_size": pl.batch_size,
                "lr": pl.lr, "milestones": list(pl.milestones), "lr_decay": pl.lr_decay,
                "weight_decay": pl.weight_decay, "hidden_dims": list(pl.hidden_dims),
                "focal_gamma": pl.focal_gamma, "prox_mu": pl.prox_mu, "eval_every": pl.eval_every}
    methods = [{"method": v.method, "label": v.label, **_loss_dict(v.loss)} for v in cfg.methods]
    return {"data": data, "partition": part, "training": training,
            "loss": _loss_dict(pl.loss_weights), "methods": methods,
            "seeds": list(cfg.seeds), "output_dir": cfg.output_dir}


def emit_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)
