import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mlrwl.core import DecisionFunctionParams, NonFiniteError, TrialDataset
from mlrwl.loss import empirical_objective, margins, penalty_terms, psi_loss, t_s
from oracles import objective_by_hand, psi_by_hand

margin_vectors = arrays(np.float64, st.integers(1, 5), elements=st.floats(-5, 5, allow_nan=False))


def random_margins(n=100_000, seed=0):
    rng = np.random.default_rng(seed)
    K = rng.integers(1, 6, size=n)
    Z = rng.normal(0.5, 1.0, size=(n, 5))
    # pad unused columns with a large value so min() ignores them
    Z[np.arange(5)[None, :] >= K[:, None]] = 1e6
    # exact breakpoints 0 and 1 occur often enough to be tested
    snap = rng.random(Z.shape) < 0.05
    Z[snap] = rng.choice([0.0, 1.0], size=int(snap.sum()))
    return Z


@pytest.mark.parametrize(
    "z, expect",
    [([2.0, 3.0], 0.0), ([1.0, 1.0], 0.0), ([0.5, 2.0], 0.5), ([0.0, 4.0], 1.0), ([-3.0, 4.0], 1.0), ([0.25], 0.75)],
)
def test_psi_known_values(z, expect):
    assert psi_loss(z) == pytest.approx(expect)
    assert psi_by_hand(z) == pytest.approx(expect)


def test_t_s_values():
    assert t_s(1, [0.25, 2.0]) == 0.75
    assert t_s(0, [0.25, 2.0]) == 0.0
    assert t_s(0, [-0.5, 2.0]) == 0.5


def test_psi_suite_on_many_vectors():
    Z = random_margins()
    psi = psi_loss(Z)
    assert np.all((0 <= psi) & (psi <= 1))
    np.testing.assert_allclose(psi, t_s(1, Z) - t_s(0, Z), rtol=0, atol=4 * np.finfo(float).eps)
    misclassified = (Z.min(axis=1) <= 0).astype(float)
    assert np.all(psi >= misclassified)
    rng = np.random.default_rng(1)
    bump = np.zeros_like(Z)
    bump[np.arange(Z.shape[0]), rng.integers(0, 5, Z.shape[0])] = rng.exponential(1.0, Z.shape[0])
    assert np.all(psi_loss(Z + bump) <= psi)


@given(margin_vectors)
def test_psi_matches_case_definition(z):
    assert psi_loss(z) == pytest.approx(psi_by_hand(z), abs=1e-12)


@given(margin_vectors, st.integers(0, 4), st.floats(0, 10))
def test_psi_monotone_in_each_margin(z, k, step):
    z2 = z.copy()
    z2[k % len(z)] += step
    assert psi_loss(z2) <= psi_loss(z)


def test_psi_rejects_nan():
    with pytest.raises(NonFiniteError):
        psi_loss([np.nan, 1.0])


def _toy(seed, n=15, K=2, p=3):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    A = rng.choice([-1, 1], size=(n, K))
    w = rng.normal(size=n)
    B0, B1 = rng.normal(size=K), rng.normal(size=(K, p))
    return X, A, w, B0, B1


@pytest.mark.parametrize("seed", range(10))
def test_objective_matches_row_by_row_sum(seed):
    X, A, w, B0, B1 = _toy(seed)
    params = DecisionFunctionParams("linear", B0, linear_coefs=B1)
    got = empirical_objective(params, TrialDataset(X, A, np.zeros(len(w))), w, 0.7)
    assert got.total == pytest.approx(objective_by_hand(B0, B1, X, A, w, 0.7), rel=1e-12)
    assert got.penalty == pytest.approx(0.35 * np.sum(B1**2))
    assert got.convex_part + got.concave_part == pytest.approx(got.total)


def test_objective_split_signs():
    # the concave part is never positive and the convex part never negative
    X, A, w, B0, B1 = _toy(3, n=40)
    params = DecisionFunctionParams("linear", B0, linear_coefs=B1)
    got = empirical_objective(params, TrialDataset(X, A, np.zeros(40)), w, 1.0)
    assert got.concave_part <= 0 <= got.convex_part


def test_margins_and_penalty():
    params = DecisionFunctionParams("linear", [1.0, -1.0], linear_coefs=[[1.0, 0.0], [0.0, 2.0]])
    z = margins(params, np.array([[1.0, 1.0]]), np.array([[1, -1]]))
    np.testing.assert_allclose(z, [[2.0, -1.0]])
    np.testing.assert_allclose(penalty_terms(params), [1.0, 4.0])
