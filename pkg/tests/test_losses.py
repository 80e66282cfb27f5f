import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fcasim import autodiff as ad
from fcasim import losses as L
from fcasim.autodiff import Tensor
from fcasim.gradcheck import check

rng = np.random.default_rng(99)
PGF = L.Direction.PERSONALIZED_GUIDES_FEDERATED


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


def test_cross_entropy_uniform_and_gradient():
    z = leaf([[0.0, 0.0]])
    loss = L.cross_entropy(z, [0])
    assert loss.item() == pytest.approx(math.log(2), abs=1e-15)
    ad.backward(loss)
    np.testing.assert_allclose(z.grad, [[-0.5, 0.5]], atol=1e-15)


def test_cross_entropy_confident_limit():
    assert L.cross_entropy(Tensor([[60.0, 0.0]]), [0]).item() < 1e-20


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        L.cross_entropy(Tensor([[0.0, 0.0]]), [2])


def test_focal_gamma_zero_is_ce():
    z = rng.normal(size=(8, 4))
    y = rng.integers(0, 4, 8)
    assert L.focal_loss(Tensor(z), y, 0.0).item() == pytest.approx(L.cross_entropy(Tensor(z), y).item(),
                                                                    abs=1e-12, rel=0)


def test_focal_hand_value():
    # p_t = 0.5 -> (1 - 0.5)^2 * ln 2
    assert L.focal_loss(Tensor([[0.0, 0.0]]), [1], 2.0).item() == pytest.approx(0.25 * math.log(2), abs=1e-15)


def test_focal_decays_faster_than_ce():
    for margin in (2.0, 5.0, 10.0):
        z = Tensor([[margin, 0.0]])
        assert L.focal_loss(z, [0], 2.0).item() < L.cross_entropy(z, [0]).item()


def test_prior_from_table3_client1():
    prior = L.ClassPrior((0, 0, 1112, 2245, 4033))
    assert sum(prior.counts) == 7390
    np.testing.assert_allclose(prior.pi, [0, 0, 1112 / 7390, 2245 / 7390, 4033 / 7390])
    np.testing.assert_allclose(prior.pi[2:], [0.1505, 0.3038, 0.5457], atol=5e-5)
    assert prior.log_pi[0] == L.LOG_PRIOR_FLOOR == pytest.approx(math.log(1e-12))


def test_balanced_softmax_hand_value():
    prior = L.ClassPrior((9, 1))
    loss = L.balanced_softmax(Tensor([[1.0, 0.0]]), [1], prior).item()
    a, b = 1 + math.log(0.9), math.log(0.1)
    expected = -math.log(math.exp(b) / (math.exp(a) + math.exp(b)))
    assert loss == pytest.approx(expected, abs=1e-12)
    assert loss == pytest.approx(3.237, abs=5e-4)


def test_balanced_softmax_uniform_prior_is_ce():
    for _ in range(20):
        z = rng.normal(size=(6, 5)) * 3
        y = rng.integers(0, 5, 6)
        assert abs(L.balanced_softmax(Tensor(z), y, L.ClassPrior.uniform(5)).item()
                   - L.cross_entropy(Tensor(z), y).item()) < 1e-9


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(-20, 20)), st.floats(-100, 100))
def test_balanced_softmax_shift_invariant(z, c):
    prior = L.ClassPrior((5, 2, 9))
    y = [0, 1, 2, 0]
    a = L.balanced_softmax(Tensor(z), y, prior).item()
    b = L.balanced_softmax(Tensor(z + c), y, prior).item()
    assert abs(a - b) < 1e-9


def test_balanced_softmax_rejects_zero_count_label():
    with pytest.raises(L.ContractError):
        L.balanced_softmax(Tensor([[0.0, 0.0, 0.0]]), [0], L.ClassPrior((0, 3, 1)))


def test_kl_identical_rows_zero():
    z = rng.normal(size=(5, 4))
    for d in L.Direction:
        assert L.kl_consistency(Tensor(z), Tensor(z.copy()), d).item() == 0.0


def test_kl_hand_value():
    guide = Tensor([[math.log(0.9), math.log(0.1)]])
    pred = Tensor([[0.0, 0.0]])
    expected = 0.9 * math.log(1.8) + 0.1 * math.log(0.2)
    assert L.kl_consistency(pred, guide, PGF).item() == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.3681, abs=5e-5)


def test_kl_personal_side_gets_no_gradient():
    fed, per = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(3, 4)))
    ad.backward(L.kl_consistency(fed, per, PGF))
    assert not np.any(per.grad)
    assert np.any(fed.grad)


def test_kl_other_directions_route_gradient():
    fed, per = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(3, 4)))
    ad.backward(L.kl_consistency(fed, per, L.Direction.FEDERATED_GUIDES_PERSONALIZED))
    assert not np.any(fed.grad) and np.any(per.grad)
    fed, per = leaf(fed.values), leaf(per.values)
    ad.backward(L.kl_consistency(fed, per, L.Direction.BIDIRECTIONAL))
    assert np.any(fed.grad) and np.any(per.grad)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-10, 10)),
       arrays(np.float64, (3, 4), elements=st.floats(-10, 10)))
def test_kl_nonnegative(a, b):
    for d in L.Direction:
        assert L.kl_consistency(Tensor(a), Tensor(b), d).item() >= -1e-12


def test_kl_shape_mismatch():
    with pytest.raises(ad.DimensionError):
        L.kl_consistency(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))


def _fca_parts(seed=0):
    r = np.random.default_rng(seed)
    return r.normal(size=(6, 4)), r.normal(size=(6, 4)), r.integers(0, 4, 6), L.ClassPrior((3, 1, 5, 2))


def test_fca_identical_heads_no_consistency():
    f, _, y, prior = _fca_parts()
    w = L.LossWeights(1.0, 1.0)
    total = L.fca_client_loss(Tensor(f), Tensor(f.copy()), y, prior, w).item()
    expected = 2 * L.balanced_softmax(Tensor(f), y, prior).item()
    assert total == pytest.approx(expected, abs=1e-14)


def test_fca_zero_lambdas_is_pure_consistency():
    f, p, y, prior = _fca_parts()
    raw = L.LossWeights(0.0, 0.0, calibrated_consistency=False)
    total = L.fca_client_loss(Tensor(f), Tensor(p), y, prior, raw).item()
    assert total == L.kl_consistency(Tensor(f), Tensor(p)).item()
    cal = L.fca_client_loss(Tensor(f), Tensor(p), y, prior, L.LossWeights(0.0, 0.0)).item()
    shift = Tensor(prior.log_pi)
    assert cal == L.kl_consistency(ad.add(Tensor(f), shift), ad.add(Tensor(p), shift)).item()


def test_fca_consistency_descends():
    f, p, y, prior = _fca_parts(3)
    fed = leaf(f)
    before = L.kl_consistency(fed, Tensor(p)).item()
    ad.backward(L.fca_client_loss(fed, Tensor(p), y, prior, L.LossWeights(0.0, 0.0, calibrated_consistency=False)))
    after = L.kl_consistency(Tensor(f - 1e-3 * fed.grad), Tensor(p)).item()
    assert after < before


def test_fca_disable_consistency():
    f, p, y, prior = _fca_parts()
    w = L.LossWeights(1.0, 2.0, consistency=False)
    total = L.fca_client_loss(Tensor(f), Tensor(p), y, prior, w).item()
    expected = (L.balanced_softmax(Tensor(f), y, prior).item()
                + 2.0 * L.balanced_softmax(Tensor(p), y, prior).item())
    assert total == pytest.approx(expected, abs=1e-14)


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        L.LossWeights(-1.0, 1.0)
    with pytest.raises(ValueError):
        L.LossWeights(1.0, float("inf"))
    assert L.LossWeights(direction="bidirectional").direction is L.Direction.BIDIRECTIONAL


def test_proximal_term_values_and_gradient():
    anchor = {"w": np.array([1.0, 2.0]), "b": np.array([0.5])}
    same = {k: leaf(v) for k, v in anchor.items()}
    assert L.proximal_term(same, anchor, 1.0).item() == 0.0
    cur = {"w": leaf([3.0, 2.0]), "b": leaf([0.5])}
    loss = L.proximal_term(cur, anchor, 1.0)
    assert loss.item() == 2.0
    mu = 0.3
    cur = {"w": leaf([3.0, -1.0]), "b": leaf([2.0])}
    ad.backward(L.proximal_term(cur, anchor, mu))
    np.testing.assert_allclose(cur["w"].grad, mu * np.array([2.0, -3.0]))
    np.testing.assert_allclose(cur["b"].grad, mu * np.array([1.5]))


def test_proximal_shape_mismatch():
    with pytest.raises(ad.DimensionError):
        L.proximal_term({"w": leaf([1.0])}, {"w": np.array([1.0, 2.0])}, 1.0)


Y = np.array([0, 1, 2, 3, 2])
PRIOR = L.ClassPrior((4, 1, 7, 2))


def _bsm(z, w=1.0):
    return ad.scale(L.balanced_softmax(z, Y, PRIOR), w)


# Each case: (loss under test, same loss with the stop-gradient inputs frozen).
# The frozen side is assembled from directed KL terms with constant guides so it
# does not reuse the stop-gradient path it checks.
GRAD_CASES = {
    "ce": (lambda t: L.cross_entropy(t["z"], Y), None),
    "focal0": (lambda t: L.focal_loss(t["z"], Y, 0.0), None),
    "focal2": (lambda t: L.focal_loss(t["z"], Y, 2.0), None),
    "bsm": (lambda t: _bsm(t["z"]), None),
    "kl_pgf": (lambda t: L.kl_consistency(t["z"], t["q"], PGF),
               lambda t, b: L.kl_consistency(t["z"], b["q"], PGF)),
    "kl_fgp": (lambda t: L.kl_consistency(t["z"], t["q"], "federated_guides_personalized"),
               lambda t, b: L.kl_consistency(b["z"], t["q"], "federated_guides_personalized")),
    "kl_bi": (lambda t: L.kl_consistency(t["z"], t["q"], "bidirectional"),
              lambda t, b: ad.add(L.kl_consistency(t["z"], b["q"], PGF),
                                  L.kl_consistency(b["z"], t["q"], "federated_guides_personalized"))),
    "fca": (lambda t: L.fca_client_loss(t["z"], t["q"], Y, PRIOR,
                                        L.LossWeights(1.0, 3.0, calibrated_consistency=False)),
            lambda t, b: ad.add(ad.add(_bsm(t["z"]), _bsm(t["q"], 3.0)),
                                L.kl_consistency(t["z"], b["q"], PGF))),
    "fca_cal": (lambda t: L.fca_client_loss(t["z"], t["q"], Y, PRIOR,
                                            L.LossWeights(2.0, 1.0, calibrated_consistency=True)),
                lambda t, b: ad.add(ad.add(_bsm(t["z"], 2.0), _bsm(t["q"])),
                                    L.kl_consistency(ad.add(t["z"], Tensor(PRIOR.log_pi)),
                                                     ad.add(b["q"], Tensor(PRIOR.log_pi)), PGF))),
}


@pytest.mark.parametrize("name", list(GRAD_CASES))
def test_loss_gradients_finite_differences(name):
    build, frozen = GRAD_CASES[name]
    arrs = {"z": rng.uniform(-2, 2, (5, 4)), "q": rng.uniform(-2, 2, (5, 4))}
    assert check(build, arrs, frozen_build=frozen) < 1e-4
