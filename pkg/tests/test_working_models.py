import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.special import logsumexp

from mlrwl import simgen
from mlrwl.core import InvalidInputError, PositivityError, RankDeficiencyError, TrialDataset, combination_codes
from mlrwl.working_models import (
    fit_propensity,
    fit_treatment_free,
    plugin_weights,
    predict_propensity,
    residual_weights,
)


def _neg_loglik(theta, Z, codes, J, lam, n):
    d = Z.shape[1]
    T = np.vstack([theta.reshape(J - 1, d), np.zeros((1, d))])
    eta = Z @ T.T
    ll = np.sum(eta[np.arange(len(codes)), codes] - logsumexp(eta, axis=1))
    slopes = T[:-1, 1:]
    ints = T[:-1, 0]
    return -ll + lam * np.sum(slopes**2) + 1e-8 * n * np.sum(ints**2)


def test_propensity_matches_generic_optimizer():
    ds = simgen.simulate(1, 300, np.random.default_rng(0), design="observational")
    lam = 0.5
    model = fit_propensity(ds, ridge_lambda=lam)
    Z = np.column_stack([np.ones(ds.n), ds.X])
    codes = combination_codes(ds.A) - 1
    res = minimize(_neg_loglik, np.zeros(3 * 11), args=(Z, codes, 4, lam, ds.n), method="BFGS", options={"gtol": 1e-8})
    ref = np.vstack([res.x.reshape(3, 11), np.zeros((1, 11))])
    np.testing.assert_allclose(model.tau, ref, atol=1e-4)
    assert model.grad_norm <= 1e-6


def test_propensity_recovers_truth_roughly():
    ds = simgen.simulate(1, 4000, np.random.default_rng(1), design="observational")
    model = fit_propensity(ds, ridge_lambda=1e-3)
    est = model.predict(ds.X, ds.A)
    assert np.mean(np.abs(est - ds.propensity)) < 0.03


def test_propensity_rows_sum_to_one_and_floor():
    ds = simgen.simulate(2, 200, np.random.default_rng(2))
    model = fit_propensity(ds, floor=0.2)
    np.testing.assert_allclose(model.probabilities(ds.X).sum(axis=1), 1.0)
    assert np.all(model.predict(ds.X, ds.A) >= 0.2)
    assert predict_propensity(model, ds.X[0], ds.A[0]) == pytest.approx(model.predict(ds.X[:1], ds.A[:1])[0])


def test_treatment_free_is_weighted_least_squares():
    ds = simgen.simulate(1, 150, np.random.default_rng(3), design="observational")
    g = fit_treatment_free(ds, ds.propensity)
    Z = np.column_stack([np.ones(ds.n), ds.X])
    W = np.diag(1 / ds.propensity)
    ref = np.linalg.solve(Z.T @ W @ Z, Z.T @ W @ ds.Y)
    np.testing.assert_allclose(g.eta, ref, rtol=1e-8, atol=1e-10)


def test_treatment_free_rank_deficiency():
    X = np.column_stack([np.arange(5.0), 2 * np.arange(5.0)])
    ds = TrialDataset(X, np.ones((5, 1)), np.arange(5.0), np.full(5, 0.5))
    with pytest.raises(RankDeficiencyError):
        fit_treatment_free(ds, ds.propensity)


def test_residual_weights_by_hand():
    X = np.array([[0.0], [1.0], [2.0]])
    ds = TrialDataset(X, np.ones((3, 1)), np.array([1.0, 4.0, 5.0]), np.array([0.5, 0.25, 0.5]))
    g = fit_treatment_free(ds, ds.propensity)
    w = residual_weights(ds, g, "known")
    np.testing.assert_allclose(w.w, (ds.Y - g.predict(X)) / ds.propensity)
    capped = residual_weights(ds, g, "known", cap=0.1)
    assert np.all(np.abs(capped.w) <= 0.1)
    with pytest.raises(PositivityError):
        residual_weights(ds, g, np.array([0.5, 0.0, 0.5]))


def test_plugin_modes():
    ds = simgen.simulate(1, 100, np.random.default_rng(4))
    w, pm, gm = plugin_weights(ds, "known")
    assert pm is None and len(w) == 100
    w2, pm2, _ = plugin_weights(ds, "estimate")
    assert pm2 is not None and np.all(np.isfinite(w2.w))
    with pytest.raises(InvalidInputError):
        plugin_weights(TrialDataset(ds.X, ds.A, ds.Y), "known")
    with pytest.raises(InvalidInputError):
        plugin_weights(ds, "guess")


def test_rct_residual_weights_center_near_zero():
    # with a correct treatment-free model the weights average out under randomization
    ds = simgen.simulate(2, 4000, np.random.default_rng(5))
    w, _, _ = plugin_weights(ds, "known")
    assert abs(np.mean(w.w)) < 0.2
