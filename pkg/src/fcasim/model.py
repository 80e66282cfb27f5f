"""MLP feature extractor, classifier heads and parameter snapshots.

A model is ``{extractor, head}``: the extractor is a stack of relu layers and
the head is a single affine map to ``C`` logits. Personalized heads have the
same shape as the federated head.

Snapshots (:class:`ModelParams`) are immutable dicts of numpy arrays. Deltas
are stored as an exact two-term expansion ``hi + lo == after - before`` so
that ``base + delta`` reproduces ``after`` bit for bit and weighted
aggregation can be summed with a single rounding.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from fcasim import autodiff as ad
from fcasim.autodiff import DimensionError, Tensor


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (32, 16)
    num_classes: int = 5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if not self.hidden_dims or min(self.hidden_dims) < 1:
            raise ValueError("hidden_dims needs at least one positive layer width")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    @property
    def feature_dim(self) -> int:
        return self.hidden_dims[-1]

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        fan_in = self.input_dim
        for i, width in enumerate(self.hidden_dims):
            shapes.append((f"layer{i}.weight", (fan_in, width)))
            shapes.append((f"layer{i}.bias", (width,)))
            fan_in = width
        return shapes

    def head_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [("weight", (self.feature_dim, self.num_classes)), ("bias", (self.num_classes,))]


def param_count(cfg: ModelConfig) -> int:
    return int(sum(math.prod(s) for _, s in cfg.layer_shapes() + cfg.head_shapes()))


@dataclass(frozen=True)
class ModelParams:
    """Snapshot of the shared model: extractor layers plus one classifier head.

    Weights are stored ``fan_in x fan_out`` so a layer is ``x @ W + b``.
    """

    extractor: Mapping[str, np.ndarray]
    head: Mapping[str, np.ndarray]

    def blocks(self) -> dict[str, Mapping[str, np.ndarray]]:
        return {"extractor": self.extractor, "head": self.head}

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for _, v in _iter_arrays(self)])

    def num_params(self) -> int:
        return int(sum(v.size for _, v in _iter_arrays(self)))

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.extractor.items()},
                           {k: v.copy() for k, v in self.head.items()})

    def with_head(self, head: Mapping[str, np.ndarray]) -> "ModelParams":
        return ModelParams(self.extractor, head)

    def equals(self, other: "ModelParams") -> bool:
        """Bitwise equality of every array."""
        a, b = list(_iter_arrays(self)), list(_iter_arrays(other))
        return len(a) == len(b) and all(
            ka == kb and va.shape == vb.shape and va.tobytes() == vb.tobytes()
            for (ka, va), (kb, vb) in zip(a, b))


def _iter_arrays(p: ModelParams) -> Iterable[tuple[str, np.ndarray]]:
    for block, arrays in p.blocks().items():
        for name in sorted(arrays):
            yield f"{block}.{name}", arrays[name]


@dataclass(frozen=True)
class ParamDelta:
    """``after - before`` for every array, kept exactly as ``hi + lo``.

    ``hi`` is the rounded difference and ``lo`` the rounding error, so the
    pair is an error-free representation of the true difference. Sign
    convention: adding the delta to ``before`` moves it to ``after``.
    """

    hi: ModelParams
    lo: ModelParams

    @property
    def values(self) -> ModelParams:
        return self.hi

    @classmethod
    def between(cls, before: ModelParams, after: ModelParams) -> "ParamDelta":
        _check_compatible(before, after)
        hi_blocks, lo_blocks = {}, {}
        for block in ("extractor", "head"):
            b, a = before.blocks()[block], after.blocks()[block]
            hi_blocks[block], lo_blocks[block] = {}, {}
            for name in a:
                s, e = _two_sum(a[name], -b[name])
                hi_blocks[block][name] = s
                lo_blocks[block][name] = e
        return cls(ModelParams(hi_blocks["extractor"], hi_blocks["head"]),
                   ModelParams(lo_blocks["extractor"], lo_blocks["head"]))

    @classmethod
    def from_values(cls, values: ModelParams) -> "ParamDelta":
        zeros = ModelParams({k: np.zeros_like(v) for k, v in values.extractor.items()},
                            {k: np.zeros_like(v) for k, v in values.head.items()})
        return cls(values, zeros)

    def is_zero(self) -> bool:
        return not np.any(self.hi.flat()) and not np.any(self.lo.flat())


def _check_compatible(a: ModelParams, b: ModelParams) -> None:
    for block in ("extractor", "head"):
        xa, xb = a.blocks()[block], b.blocks()[block]
        if set(xa) != set(xb) or any(xa[k].shape != xb[k].shape for k in xa):
            raise DimensionError(f"parameter block '{block}' shapes differ")


# Error-free transformations (Knuth TwoSum, Dekker TwoProduct). Exact for
# binary64 round-to-nearest barring overflow/underflow.
_SPLITTER = 2.0 ** 27 + 1.0


def _two_sum(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    s = a + b
    bb = s - a
    err = (a - (s - bb)) + (b - bb)
    return s, err


def _split(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c = _SPLITTER * a
    hi = c - (c - a)
    return hi, a - hi


def _two_prod(a: np.ndarray, b) -> tuple[np.ndarray, np.ndarray]:
    b = np.broadcast_to(np.asarray(b, dtype=np.float64), np.shape(a))
    p = a * b
    ah, al = _split(a)
    bh, bl = _split(b)
    err = ((ah * bh - p) + ah * bl + al * bh) + al * bl
    return p, err


def _exact_sum(terms: Sequence[np.ndarray]) -> np.ndarray:
    """Correctly rounded elementwise sum; independent of term order."""
    stacked = np.stack([np.asarray(t, dtype=np.float64).ravel() for t in terms])
    out = np.fromiter((math.fsum(col) for col in stacked.T), dtype=np.float64,
                      count=stacked.shape[1])
    return out.reshape(np.shape(terms[0]))


def apply_delta(base: ModelParams, deltas: Sequence[tuple[float, ParamDelta]]) -> ModelParams:
    """``base + sum_i w_i * delta_i`` with a single rounding per element.

    Each weighted product is split exactly into two floats and the whole
    expansion is summed with ``math.fsum``, so the result does not depend on
    the order of ``deltas`` and a unit-weight delta reproduces the original
    ``after`` snapshot exactly.
    """
    if not deltas:
        return base
    for w, d in deltas:
        if not math.isfinite(w):
            raise ValueError(f"aggregation weight {w} is not finite")
        _check_compatible(base, d.hi)
    out = {}
    for block in ("extractor", "head"):
        out[block] = {}
        for name, b in base.blocks()[block].items():
            terms = [b]
            for w, d in deltas:
                for part in (d.hi, d.lo):
                    p, e = _two_prod(part.blocks()[block][name], w)
                    terms.extend((p, e))
            out[block][name] = _exact_sum(terms)
    return ModelParams(out["extractor"], out["head"])


def init_model(cfg: ModelConfig) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(cfg.seed)
    extractor = {}
    for name, shape in cfg.layer_shapes():
        extractor[name] = _init_array(rng, name, shape)
    head = {name: _init_array(rng, name, shape) for name, shape in cfg.head_shapes()}
    return ModelParams(extractor, head)


def _init_array(rng: np.random.Generator, name: str, shape) -> np.ndarray:
    if name.endswith("bias"):
        return np.zeros(shape)
    bound = 1.0 / math.sqrt(shape[0])
    return rng.uniform(-bound, bound, size=shape)


def as_leaves(arrays: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    """Wrap arrays as fresh requires-grad leaves (copies, so snapshots stay immutable)."""
    return {k: Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}


def as_constants(arrays: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in arrays.items()}


def forward_features(extractor: Mapping[str, Tensor], x: Tensor) -> Tensor:
    n_layers = len(extractor) // 2
    h = x
    for i in range(n_layers):
        w = extractor[f"layer{i}.weight"]
        if h.shape[1] != w.shape[0]:
            raise DimensionError(f"layer{i}: input has {h.shape[1]} columns, weight expects {w.shape[0]}")
        h = ad.relu(ad.add(ad.matmul(h, w), extractor[f"layer{i}.bias"]))
    return h


def forward_head(head: Mapping[str, Tensor], feats: Tensor) -> Tensor:
    w = head["weight"]
    if feats.shape[1] != w.shape[0]:
        raise DimensionError(f"head expects {w.shape[0]} features, got {feats.shape[1]}")
    return ad.add(ad.matmul(feats, w), head["bias"])


def predict_logits(extractor: Mapping[str, np.ndarray], head: Mapping[str, np.ndarray],
                   x: np.ndarray) -> np.ndarray:
    """Graph-free forward pass for evaluation."""
    h = np.asarray(x, dtype=np.float64)
    for i in range(len(extractor) // 2):
        h = np.maximum(h @ extractor[f"layer{i}.weight"] + extractor[f"layer{i}.bias"], 0.0)
    return h @ head["weight"] + head["bias"]


# Serialization: magic line, one JSON manifest line, then raw little-endian f64.
_MAGIC = b"FCASIM-PARAMS 1\n"


def serialize_arrays(blocks: Mapping[str, Mapping[str, np.ndarray]]) -> bytes:
    manifest, chunks = [], []
    for block in sorted(blocks):
        for name in sorted(blocks[block]):
            arr = np.ascontiguousarray(blocks[block][name], dtype="<f8")
            manifest.append({"block": block, "name": name, "shape": list(arr.shape)})
            chunks.append(arr.tobytes())
    header = json.dumps({"arrays": manifest}, sort_keys=True).encode() + b"\n"
    return _MAGIC + header + b"".join(chunks)


def deserialize_arrays(data: bytes) -> dict[str, dict[str, np.ndarray]]:
    buf = io.BytesIO(data)
    if buf.readline() != _MAGIC:
        raise ValueError("not a serialized parameter file")
    manifest = json.loads(buf.readline())
    out: dict[str, dict[str, np.ndarray]] = {}
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        n = math.prod(shape)
        raw = buf.read(8 * n)
        if len(raw) != 8 * n:
            raise ValueError(f"truncated data for {entry['block']}.{entry['name']}")
        out.setdefault(entry["block"], {})[entry["name"]] = (
            np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape))
    if buf.read(1):
        raise ValueError("trailing bytes after parameter payload")
    return out


def serialize(params: ModelParams) -> bytes:
    return serialize_arrays(params.blocks())


def deserialize(data: bytes) -> ModelParams:
    blocks = deserialize_arrays(data)
    return ModelParams(blocks.get("extractor", {}), blocks.get("head", {}))
