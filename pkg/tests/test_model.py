import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fcasim import autodiff as ad
from fcasim.autodiff import DimensionError, Tensor
from fcasim.model import (ModelConfig, ModelParams, ParamDelta, apply_delta, as_constants,
                          deserialize, forward_features, forward_head, init_model, param_count,
                          predict_logits, serialize)

TABLE1_TRAIN = (1807, 9930, 655, 2691, 351, 3163)


@pytest.fixture
def cfg():
    return ModelConfig(input_dim=3, hidden_dims=(5, 4), num_classes=3, seed=7)


def test_init_deterministic(cfg):
    assert init_model(cfg).equals(init_model(cfg))


def test_init_biases_zero_and_weights_bounded(cfg):
    p = init_model(cfg)
    assert not np.any(p.extractor["layer0.bias"]) and not np.any(p.head["bias"])
    assert np.all(np.abs(p.extractor["layer0.weight"]) <= 1 / np.sqrt(3))
    assert np.all(np.abs(p.head["weight"]) <= 1 / np.sqrt(4))


def test_param_count_formula():
    cfg = ModelConfig(input_dim=2, hidden_dims=(16,), num_classes=5)
    assert param_count(cfg) == 2 * 16 + 16 + 16 * 5 + 5 == 133
    assert init_model(cfg).num_params() == 133


def test_config_needs_hidden_layer():
    with pytest.raises(ValueError):
        ModelConfig(input_dim=2, hidden_dims=(), num_classes=3)


def test_zero_weights_give_zero_features(cfg):
    p = init_model(cfg)
    zeros = {k: np.zeros_like(v) for k, v in p.extractor.items()}
    out = forward_features(as_constants(zeros), Tensor(np.random.default_rng(0).normal(size=(6, 3))))
    assert out.shape == (6, 4) and not np.any(out.values)


def test_features_hand_example():
    ext = {"layer0.weight": np.array([[1.0, -1.0], [2.0, 0.5]]), "layer0.bias": np.array([0.5, -1.0])}
    x = np.array([[1.0, 1.0], [-1.0, 2.0]])
    # row 0: [1+2+0.5, -1+0.5-1] = [3.5, -1.5] -> relu [3.5, 0]
    # row 1: [-1+4+0.5, 1+1-1]   = [3.5, 1]
    out = forward_features(as_constants(ext), Tensor(x)).values
    assert np.array_equal(out, [[3.5, 0.0], [3.5, 1.0]])


def test_head_zero_identity_and_hand_example():
    feats = Tensor([[1.0, -2.0], [0.5, 3.0]])
    zero = {"weight": np.zeros((2, 3)), "bias": np.zeros(3)}
    assert not np.any(forward_head(as_constants(zero), feats).values)
    ident = {"weight": np.eye(2), "bias": np.zeros(2)}
    assert np.array_equal(forward_head(as_constants(ident), feats).values, feats.values)
    head = {"weight": np.array([[1.0, 0.0, 2.0], [1.0, -1.0, 0.0]]), "bias": np.array([0.0, 1.0, -1.0])}
    assert np.array_equal(forward_head(as_constants(head), feats).values,
                          [[-1.0, 3.0, 1.0], [3.5, -2.0, 0.0]])


def test_dimension_mismatch(cfg):
    p = init_model(cfg)
    with pytest.raises(DimensionError):
        forward_features(as_constants(p.extractor), Tensor(np.ones((2, 4))))
    with pytest.raises(DimensionError):
        forward_head(as_constants(p.head), Tensor(np.ones((2, 5))))


def test_batch_permutation_equivariance(cfg):
    p = init_model(cfg)
    x = np.random.default_rng(3).normal(size=(7, 3))
    perm = np.random.default_rng(4).permutation(7)
    out = predict_logits(p.extractor, p.head, x)
    assert np.array_equal(predict_logits(p.extractor, p.head, x[perm]), out[perm])


def test_block_split_matches_monolithic(cfg):
    p = init_model(cfg)
    x = np.random.default_rng(5).normal(size=(4, 3))
    h = x
    for i in range(2):
        h = np.maximum(h @ p.extractor[f"layer{i}.weight"] + p.extractor[f"layer{i}.bias"], 0)
    mono = h @ p.head["weight"] + p.head["bias"]
    split = forward_head(as_constants(p.head), forward_features(as_constants(p.extractor), Tensor(x)))
    assert np.array_equal(split.values, mono)
    assert np.array_equal(predict_logits(p.extractor, p.head, x), mono)


def _shifted(p: ModelParams, seed, scale=0.1) -> ModelParams:
    rng = np.random.default_rng(seed)
    return ModelParams({k: v + scale * rng.normal(size=v.shape) for k, v in p.extractor.items()},
                       {k: v + scale * rng.normal(size=v.shape) for k, v in p.head.items()})


def test_delta_roundtrip_exact(cfg):
    base = init_model(cfg)
    after = _shifted(base, 1, scale=3.0)
    assert apply_delta(base, [(1.0, ParamDelta.between(base, after))]).equals(after)


def test_apply_delta_single_and_halves(cfg):
    base = init_model(cfg)
    after = _shifted(base, 2)
    d = ParamDelta.between(base, after)
    once = apply_delta(base, [(1.0, d)])
    assert once.equals(after)
    assert apply_delta(base, [(0.5, d), (0.5, d)]).equals(once)


def test_apply_delta_empty_returns_base(cfg):
    base = init_model(cfg)
    assert apply_delta(base, []) is base


def test_apply_delta_shape_mismatch(cfg):
    base = init_model(cfg)
    other = init_model(ModelConfig(3, (5, 5), 3))
    with pytest.raises(DimensionError):
        apply_delta(base, [(1.0, ParamDelta.from_values(other))])


def test_apply_delta_table1_weights(cfg):
    base = init_model(cfg)
    total = sum(TABLE1_TRAIN)
    assert total == 18597
    weights = [n / total for n in TABLE1_TRAIN]
    assert weights[0] == pytest.approx(0.09716, abs=1e-5)
    d = ParamDelta.from_values(ModelParams({k: np.ones_like(v) for k, v in base.extractor.items()},
                                           {k: np.ones_like(v) for k, v in base.head.items()}))
    zero = ParamDelta.from_values(ModelParams({k: np.zeros_like(v) for k, v in base.extractor.items()},
                                              {k: np.zeros_like(v) for k, v in base.head.items()}))
    out = apply_delta(base, [(weights[0], d)] + [(w, zero) for w in weights[1:]])
    np.testing.assert_allclose(out.flat() - base.flat(), 1807 / 18597, rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.01, 10), min_size=1, max_size=6), st.integers(0, 2 ** 31))
def test_apply_delta_order_independent(raw_weights, seed):
    base = init_model(ModelConfig(2, (3,), 2, seed=seed % 100))
    deltas = [(w, ParamDelta.between(base, _shifted(base, seed + i))) for i, w in enumerate(raw_weights)]
    fwd = apply_delta(base, deltas)
    rev = apply_delta(base, deltas[::-1])
    assert fwd.equals(rev)


def test_serialize_roundtrip(cfg):
    p = _shifted(init_model(cfg), 9)
    blob = serialize(p)
    assert blob.startswith(b"FCASIM-PARAMS 1\n")
    assert deserialize(blob).equals(p)


def test_deserialize_rejects_truncation(cfg):
    blob = serialize(init_model(cfg))
    with pytest.raises(ValueError):
        deserialize(blob[:-8])
    with pytest.raises(ValueError):
        deserialize(b"junk\n" + blob)


def test_snapshots_not_mutated_by_training_leaves(cfg):
    from fcasim.model import as_leaves
    p = init_model(cfg)
    before = serialize(p)
    leaves = as_leaves(p.head)
    leaves["weight"].values += 1.0
    assert serialize(p) == before
