import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mlrwl import evaluation, simgen
from mlrwl.core import DecisionFunctionParams, FitError, InvalidInputError, TrialDataset, TuningError, UndefinedValueError
from mlrwl.evaluation import (
    REFERENCE,
    MethodConfig,
    accuracy,
    default_method,
    empirical_value,
    grid_tune,
    reference_value,
    replicate_experiment,
    true_value,
    worker_count,
)


def constant_rule(a, p=10):
    return DecisionFunctionParams("linear", np.asarray(a, dtype=float), linear_coefs=np.zeros((len(a), p)))


def test_constant_rule_value_is_group_mean():
    ds = simgen.simulate(1, 500, np.random.default_rng(0))
    for a in ([1, 1], [-1, 1], [1, -1]):
        # sign(0) = +1, so a constant rule is encoded by intercepts of +-1
        rule = constant_rule(a)
        match = np.all(ds.A == np.array(a), axis=1)
        assert empirical_value(ds, rule) == pytest.approx(ds.Y[match].mean(), rel=1e-13)


@given(st.integers(0, 10_000))
def test_value_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    ds = simgen.simulate(1, 60, rng)
    rule = DecisionFunctionParams("linear", rng.normal(size=2), linear_coefs=rng.normal(size=(2, 10)))
    perm = rng.permutation(60)
    try:
        v = empirical_value(ds, rule)
    except UndefinedValueError:
        return
    assert empirical_value(ds.subset(perm), rule) == v


def test_value_undefined_without_matches():
    ds = TrialDataset(np.zeros((3, 1)), -np.ones((3, 1)), np.ones(3))
    with pytest.raises(UndefinedValueError):
        empirical_value(ds, constant_rule([1.0], p=1))


def test_oracle_rule_accuracy_and_ties():
    X = simgen.gen_covariates(3000, np.random.default_rng(1))
    # setting 2 has a unique optimum almost surely: both tie rules agree
    rule = constant_rule([1, 1])
    assert accuracy(rule, X, 2) == accuracy(rule, X, 2, ties="strict")
    # in setting 1 every combination is optimal where all effects are 0
    zero = (X[:, 0] + X[:, 1] < 0) & (X[:, 1] > X[:, 0])
    assert accuracy(rule, X, 1) >= zero.mean()
    assert 0.0 <= accuracy(rule, X, 1, ties="strict") <= accuracy(rule, X, 1) <= 1.0
    with pytest.raises(InvalidInputError):
        accuracy(rule, X, 1, ties="loose")


def test_true_value_constant_rule_by_hand():
    X = simgen.gen_covariates(1000, np.random.default_rng(2))
    rule = constant_rule([1, 1])
    ref = np.mean(1 + X[:, 0] + 2 * X[:, 1] + 3.0 * ((X[:, 0] + X[:, 1] > 0) & (X[:, 1] > X[:, 0])))
    assert true_value(rule, X, 1) == pytest.approx(ref, rel=1e-12)


def test_method_config():
    m = MethodConfig("kernel", lam=2.0, bandwidth=0.5)
    assert m.tag == "Ker" and m.kernel_spec(np.zeros((2, 2))).bandwidth == 0.5
    assert MethodConfig().kernel_spec(np.zeros((2, 2))) is None
    assert m.fit_config(7).rng_seed == 7
    for bad in ({"rule": "tree"}, {"propensity": "guess"}, {"bandwidth": "wide"}, {"bandwidth": -1.0}):
        with pytest.raises(InvalidInputError):
            MethodConfig(**bad)


def test_grid_tune_picks_argmax():
    rng = np.random.default_rng(3)
    train = simgen.simulate(1, 120, rng)
    valid = simgen.simulate(1, 400, rng)
    grid = [MethodConfig(lam=lam, n_restarts=1) for lam in (0.1, 1.0, 10.0)]
    best, scores = grid_tune(train, valid, grid)
    assert len(scores) == 3
    assert scores[grid.index(best)] == max(scores.values())


def test_grid_tune_single_cell_and_failures(monkeypatch):
    rng = np.random.default_rng(4)
    train = simgen.simulate(1, 60, rng)
    valid = simgen.simulate(1, 200, rng)
    cell = MethodConfig(lam=1.0, n_restarts=1)
    assert grid_tune(train, valid, [cell])[0] == cell

    real = evaluation.fit_rule

    def flaky(tr, method, seed=0):
        if method.rule == "kernel":
            raise FitError("inner QP ended with status 'infeasible'")
        return real(tr, method, seed)

    monkeypatch.setattr(evaluation, "fit_rule", flaky)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        best, scores = grid_tune(train, valid, [MethodConfig("kernel", lam=1.0), cell])
    assert best == cell and list(scores) == [1]
    assert any("grid cell 0 failed" in str(w.message) for w in caught)
    with pytest.raises(TuningError) as info, pytest.warns(RuntimeWarning):
        grid_tune(train, valid, [MethodConfig("kernel", lam=1.0)])
    assert 0 in info.value.failures
    with pytest.raises(InvalidInputError):
        grid_tune(train, valid, [])


def test_grid_tune_tie_prefers_smaller_lambda_then_linear():
    rng = np.random.default_rng(5)
    train = simgen.simulate(1, 40, rng)
    valid = simgen.simulate(1, 100, rng)
    # identical cells score identically; the first one is kept
    grid = [MethodConfig(lam=1.0, n_restarts=1), MethodConfig(lam=1.0, n_restarts=1)]
    best, _ = grid_tune(train, valid, grid)
    assert best is grid[0]


def test_replicates_reproducible_across_workers():
    m = MethodConfig(lam=1.0, n_restarts=1, max_iter=10)
    a = replicate_experiment(1, 50, 3, "rct", m, master_seed=11, threads=1)
    b = replicate_experiment(1, 50, 3, "rct", m, master_seed=11, threads=2)
    for ra, rb in zip(a.replicates, b.replicates):
        assert (ra.seed, ra.value, ra.accuracy, ra.error) == (rb.seed, rb.value, rb.accuracy, rb.error)
    assert a.mean_value == b.mean_value and a.sd_value == b.sd_value
    vals = [r.value for r in a.replicates]
    assert a.sd_value == pytest.approx(np.std(vals, ddof=1))


def test_replicate_observational_uses_estimated_propensity():
    m = default_method(1, "linear", 60, "observational")
    assert m.propensity == "estimate"
    s = replicate_experiment(1, 60, 2, "observational", MethodConfig(lam=1.0, propensity="estimate", n_restarts=1), 3, threads=1)
    assert s.design == "observational" and s.replications == 2
    assert 0 <= s.mean_accuracy <= 1


def test_replicate_validation():
    with pytest.raises(InvalidInputError):
        replicate_experiment(1, 50, 0)
    with pytest.raises(InvalidInputError):
        replicate_experiment(1, 50, 1, design="cohort")


def test_worker_count(monkeypatch):
    monkeypatch.setenv("MLRWL_THREADS", "3")
    assert worker_count() == 3
    assert worker_count(2) == 2
    monkeypatch.setenv("MLRWL_THREADS", "many")
    with pytest.raises(InvalidInputError):
        worker_count()
    with pytest.raises(InvalidInputError):
        worker_count(0)


@pytest.mark.parametrize(
    "key, expect",
    [
        ((2, 1, "Lin", 2000), (0.884, 0.012)),
        ((1, 1, "Lin", 2000), (4.238, 0.077)),
        ((2, 2, "Ker", 800), (0.539, 0.025)),
        ((2, 2, "Ker", 2000), (0.638, 0.013)),
        ((2, 2, "Lin", 2000), (0.272, 0.009)),
        ((5, 1, "Lin", 800), (0.861, 0.028)),
        ((5, 2, "Ker", 2000), (0.596, 0.013)),
    ],
)
def test_reference_values(key, expect):
    assert REFERENCE[key] == expect
    assert reference_value(*key) == expect


def test_reference_table_complete():
    assert len(REFERENCE) == 4 * 3 * 2 * 3
    with pytest.raises(InvalidInputError):
        reference_value(3, 1, "Lin", 400)
