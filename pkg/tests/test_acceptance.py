"""The twelve acceptance criteria, one printed PASS/FAIL line each.

Criteria 1-5 replicate simulation cells (slow: they fit hundreds of rules).
Criteria 6-12 are randomized property checks.
"""
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from mlrwl.evaluation import default_method, replicate_experiment
from mlrwl.loss import psi_loss, t_s
from mlrwl.qpsolve import QuadraticProgram, solve_qp
import checks
from conftest import ACCEPTANCE_LINES
from oracles import brute_force_qp
from test_loss import random_margins
from test_qpsolve import random_qp

REPS = 20
REPS_GAP = 10  # each n=2000 fit takes minutes; two rules double the cost
SEED = 20240601
_cache = {}


def report(number, ok, detail):
    line = f"ACCEPTANCE {number:>2}: {'PASS' if ok else 'FAIL'} - {detail}"
    # collected by conftest and printed in the terminal summary
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def experiment(setting, n, rule, design="rct", reps=REPS):
    key = (setting, n, rule, design, reps)
    if key not in _cache:
        t0 = time.perf_counter()
        summ = replicate_experiment(setting, n, reps, design, default_method(setting, rule, n, design), SEED)
        _cache[key] = (summ, time.perf_counter() - t0)
    return _cache[key]


def _describe(summ, secs):
    return (
        f"mean value {summ.mean_value:.3f} (sd {summ.sd_value:.3f}), accuracy {summ.mean_accuracy:.3f} "
        f"(sd {summ.sd_accuracy:.3f}, strict {summ.mean_strict_accuracy:.3f}), {summ.replications} reps, "
        f"{len(summ.excluded)} excluded, {secs / 60:.1f} min"
    )


@pytest.mark.slow
def test_01_setting1_linear_accuracy_n2000():
    summ, secs = experiment(1, 2000, "linear")
    ok = 0.83 <= summ.mean_accuracy <= 0.93 and not summ.excluded
    assert report(1, ok, f"target [0.83, 0.93] (published 0.884); {_describe(summ, secs)}")


@pytest.mark.slow
def test_02_setting1_linear_value_n2000():
    summ, secs = experiment(1, 2000, "linear")
    ok = 3.95 <= summ.mean_value <= 4.45 and not summ.excluded
    assert report(2, ok, f"target [3.95, 4.45] (published 4.238); {_describe(summ, secs)}")


@pytest.mark.slow
def test_03_setting2_kernel_accuracy_n800():
    summ, secs = experiment(2, 800, "kernel")
    slowest = max(r.fit_seconds for r in summ.replicates if r.error is None)
    ok = 0.46 <= summ.mean_accuracy <= 0.62 and slowest <= 180 and not summ.excluded
    assert report(3, ok, f"target [0.46, 0.62] (published 0.539), slowest fit {slowest:.0f}s <= 180s; {_describe(summ, secs)}")


@pytest.mark.slow
def test_04_setting2_kernel_beats_linear_n2000():
    ker, s1 = experiment(2, 2000, "kernel", reps=REPS_GAP)
    lin, s2 = experiment(2, 2000, "linear", reps=REPS_GAP)
    gap = ker.mean_accuracy - lin.mean_accuracy
    ok = gap >= 0.2 and not ker.excluded and not lin.excluded
    assert report(
        4, ok, f"kernel {ker.mean_accuracy:.3f} vs linear {lin.mean_accuracy:.3f}, gap {gap:.3f} >= 0.2 "
        f"(published 0.638 vs 0.272); {REPS_GAP} reps each, {(s1 + s2) / 60:.1f} min"
    )


@pytest.mark.slow
def test_05_observational_setting1_linear_n800():
    summ, secs = experiment(1, 800, "linear", "observational")
    ok = 0.78 <= summ.mean_accuracy <= 0.93 and not summ.excluded
    assert report(5, ok, f"target [0.78, 0.93] (published 0.861), estimated propensities; {_describe(summ, secs)}")


def test_06_psi_loss_suite():
    Z = random_margins(100_000, seed=SEED)
    psi = psi_loss(Z)
    bounds = int(np.sum((psi < 0) | (psi > 1)))
    diff = int(np.sum(np.abs(psi - (t_s(1, Z) - t_s(0, Z))) > 4 * np.finfo(float).eps))
    under = int(np.sum(psi < (Z.min(axis=1) <= 0)))
    rng = np.random.default_rng(SEED)
    bump = np.zeros_like(Z)
    bump[np.arange(Z.shape[0]), rng.integers(0, 5, Z.shape[0])] = rng.exponential(1.0, Z.shape[0])
    mono = int(np.sum(psi_loss(Z + bump) > psi))
    total = bounds + diff + under + mono
    assert report(
        6, total == 0, f"10^5 vectors: {bounds} bound, {diff} T1-T0, {under} indicator, {mono} monotonicity violations"
    )


def test_07_qp_oracle_equivalence():
    bad = []
    for seed in range(200):
        rng = np.random.default_rng(SEED + seed)
        P, q, G, h, C, d, lower = random_qp(rng, m=int(rng.integers(1, 11)), n_ineq=int(rng.integers(0, 4)))
        x_ref, f_ref = brute_force_qp(P, q, G, h, C, d, lower)
        sol = solve_qp(QuadraticProgram(P, q, G, h, C, d, lower))
        if sol.status != "optimal" or abs(sol.primal_objective - f_ref) > 1e-6 * (1 + abs(f_ref)) or np.linalg.norm(sol.x - x_ref) > 1e-5:
            bad.append(seed)
    assert report(7, not bad, f"200 random strictly convex QPs (m <= 10); mismatches: {bad}")


def test_08_subgradient_finite_differences():
    bad = checks.subgradient_failures(500, seed=SEED)
    assert report(8, not bad, f"500 differentiable points; failures: {bad[:3]}")


def test_09_dc_descent():
    bad = checks.descent_failures(50, seed=SEED)
    assert report(9, not bad, f"50 fits over settings, rule kinds and signed weights; rises: {bad[:3]}")


def test_10_primal_dual_consistency():
    bad = checks.primal_dual_failures(30, seed=SEED)
    assert report(10, not bad, f"30 micro-instances against a direct primal solve; failures: {bad[:3]}")


def test_11_fisher_consistency_smoke():
    hits = [checks.fisher_recovered(seed) for seed in range(20)]
    ok = sum(hits) >= 18
    assert report(11, ok, f"optimal rule on all 4 covariate values in {sum(hits)}/20 seeds (need >= 18)")


def _cli(args, threads, cwd):
    env = dict(os.environ)
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "MLRWL_THREADS"):
        env[var] = str(threads)
    subprocess.run([sys.executable, "-m", "mlrwl", *args], check=True, cwd=cwd, env=env, capture_output=True)


def test_12_cli_determinism(tmp_path):
    commands = {
        "simulate.csv": ["simulate", "--setting", "1", "--n", "300", "--design", "obs", "--seed", "9"],
        "linear.json": ["fit", "--data", "{d}", "--propensity", "estimate", "--seed", "9"],
        "kernel.json": ["fit", "--data", "{d}", "--rule", "kernel", "--restarts", "2", "--seed", "9"],
        "predict.csv": ["predict", "--model", "{m}", "--data", "{d}"],
        "reproduce.csv": ["reproduce", "--table", "2", "--setting", "1", "--n", "400", "--reps", "2", "--method", "linear", "--seed", "9"],
    }
    differ = []
    for threads in (1, 2):
        run_dir = tmp_path / f"t{threads}"
        run_dir.mkdir()
        for name, args in commands.items():
            args = [a.format(d="simulate.csv", m="linear.json") for a in args]
            flag = ["--threads", str(threads)] if args[0] == "reproduce" else []
            _cli(args + flag + ["--out", name], threads, run_dir)
    for name in commands:
        if (tmp_path / "t1" / name).read_bytes() != (tmp_path / "t2" / name).read_bytes():
            differ.append(name)
    assert report(12, not differ, f"simulate, fit (linear, kernel), predict, reproduce at 1 and 2 threads; differing: {differ}")
