"""Randomized checks shared by the unit tests and the acceptance run.

Each returns a list of failure descriptions; an empty list means pass.
"""
import numpy as np
from scipy.optimize import minimize

from mlrwl import simgen
from mlrwl.core import DecisionFunctionParams, FitConfig, TrialDataset
from mlrwl.dc_engine import (
    ConcaveSubgradient,
    DualSolution,
    assemble_dual_linear,
    concave_subgradient,
    dc_fit,
    recover_primal_linear,
)
from mlrwl.kernels import KernelSpec, median_bandwidth
from mlrwl.loss import empirical_objective
from mlrwl.qpsolve import solve_qp
from mlrwl.working_models import plugin_weights


def _smooth_point(rng, n, K, p, h):
    """Random data and linear coefficients away from every kink of the loss."""
    while True:
        X = rng.normal(size=(n, p))
        A = rng.choice([-1, 1], size=(n, K))
        w = rng.normal(size=n) * 3
        params = DecisionFunctionParams("linear", rng.normal(size=K), linear_coefs=rng.normal(size=(K, p)))
        z = np.sort(A * params.decision_function(X), axis=1)
        far = 1e3 * h * (1 + np.abs(X).sum(axis=1))
        ok = (np.abs(z[:, 0]) > far) & (np.abs(z[:, 0] - 1) > far)
        if K > 1:
            ok &= z[:, 1] - z[:, 0] > far
        if ok.all():
            return TrialDataset(X, A, np.zeros(n)), w, params


def subgradient_failures(n_points, seed=0, h=1e-6, rtol=1e-4):
    rng = np.random.default_rng(seed)
    bad = []
    for t in range(n_points):
        K, p = int(rng.integers(1, 4)), int(rng.integers(1, 5))
        ds, w, params = _smooth_point(rng, int(rng.integers(3, 12)), K, p, h)
        db0, dB1 = rng.normal(size=K), rng.normal(size=(K, p))

        def cave(s):
            moved = DecisionFunctionParams("linear", params.intercepts + s * db0, linear_coefs=params.linear_coefs + s * dB1)
            return empirical_objective(moved, ds, w, 1.0).concave_part

        fd = (cave(h) - cave(-h)) / (2 * h)
        sub = concave_subgradient(params, ds, w)
        analytic = float(np.sum(sub.grad_intercept() * db0) + np.sum(sub.grad_linear(ds.X) * dB1))
        if abs(fd - analytic) > rtol * max(1.0, abs(analytic)):
            bad.append(f"point {t}: finite difference {fd:.8g} vs subgradient {analytic:.8g}")
    return bad


def descent_failures(n_fits, seed=0, slack=1e-7):
    rng = np.random.default_rng(seed)
    bad = []
    for t in range(n_fits):
        setting = 1 + t % 3
        kind = "kernel" if t % 4 == 3 else "linear"
        ds = simgen.simulate(setting, int(rng.integers(40, 120)), rng)
        w, _, _ = plugin_weights(ds, "known")
        if t % 5 == 0:
            w = w.w * rng.choice([-1.0, 1.0], size=ds.n)  # arbitrary signs as well
        spec = KernelSpec("rbf", median_bandwidth(ds.X)) if kind == "kernel" else None
        lam = float(rng.choice([0.5, 2.0, 10.0]))
        _, diag = dc_fit(ds, w, FitConfig(lam=lam, n_restarts=2, max_iter=30, rng_seed=t), kind, spec)
        for r, trace in enumerate(diag.restart_traces):
            steps = np.diff(trace)
            if np.any(steps > slack):
                bad.append(f"fit {t} ({kind}, setting {setting}) restart {r}: rise of {steps.max():.3g}")
    return bad


def _primal_qp(X, A, w, gamma):
    """Direct solve of the convex subproblem with zero subgradient, in (b0, B1, xi)."""
    n, p = X.shape
    K = A.shape[1]
    nv = K + K * p + n

    def unpack(v):
        return v[:K], v[K : K + K * p].reshape(K, p), v[K + K * p :]

    def obj(v):
        _, B1, xi = unpack(v)
        return 0.5 * np.sum(B1**2) + gamma * w @ xi

    def grad(v):
        _, B1, _ = unpack(v)
        return np.concatenate([np.zeros(K), B1.ravel(), gamma * w])

    # xi_i >= 1 - a_ik (b0_k + x_i b1_k) for every k, and xi >= 0
    rows = []
    for k in range(K):
        M = np.zeros((n, nv))
        M[:, k] = A[:, k]
        M[:, K + k * p : K + (k + 1) * p] = A[:, k][:, None] * X
        M[:, K + K * p :] = np.eye(n)
        rows.append(M)
    M = np.vstack(rows)
    cons = [{"type": "ineq", "fun": lambda v: M @ v - 1.0, "jac": lambda v: M}]
    bounds = [(None, None)] * (K + K * p) + [(0, None)] * n
    v0 = np.concatenate([np.zeros(K + K * p), np.ones(n)])
    res = minimize(obj, v0, jac=grad, constraints=cons, bounds=bounds, method="SLSQP", options={"ftol": 1e-14, "maxiter": 2000})
    return res.fun


def primal_dual_failures(n_instances, seed=0, tol=1e-4):
    rng = np.random.default_rng(seed)
    bad = []
    for t in range(n_instances):
        n, K, p = int(rng.integers(3, 13)), int(rng.integers(1, 3)), int(rng.integers(1, 4))
        X = rng.normal(size=(n, p))
        A = rng.choice([-1, 1], size=(n, K))
        w = rng.uniform(0.2, 2.0, size=n)
        gamma = float(rng.choice([0.3, 1.0, 3.0]))
        ds = TrialDataset(X, A, np.zeros(n))
        sub = ConcaveSubgradient(np.zeros((n, K)))
        sol = solve_qp(assemble_dual_linear(ds, w, sub, gamma))
        theta = DualSolution(sol.x.reshape(K, n).T, gamma)
        params = recover_primal_linear(theta, ds, w, sub, eq_multipliers=sol.eq_multipliers)
        z = A * params.decision_function(X)
        dual_obj = 0.5 * np.sum(params.linear_coefs**2) + gamma * w @ np.maximum(1 - z.min(axis=1), 0)
        primal_obj = _primal_qp(X, A, w, gamma)
        if abs(dual_obj - primal_obj) > tol * max(1.0, abs(primal_obj)):
            bad.append(f"instance {t} (n={n}, K={K}): dual-recovered {dual_obj:.8g} vs primal {primal_obj:.8g}")
    return bad


def fisher_instance(seed, n=5000):
    """Four covariate points with a known best combination at each."""
    rng = np.random.default_rng(seed)
    pts = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
    X = pts[rng.integers(0, 4, n)]
    A = rng.choice([-1, 1], size=(n, 2))
    # the effect is 2 when the combination equals sign(x), 1 when one entry does
    agree = (A == np.sign(X)).sum(axis=1)
    Y = X[:, 0] + agree.astype(float) + rng.normal(size=n)
    return TrialDataset(X, A, Y, np.full(n, 0.25)), pts, np.sign(pts).astype(int)


def fisher_recovered(seed, lam=1.0):
    ds, pts, best = fisher_instance(seed)
    w, _, _ = plugin_weights(ds, "known")
    params, _ = dc_fit(ds, w, FitConfig(lam=lam, n_restarts=3, rng_seed=seed), "linear")
    return bool(np.array_equal(params.predict(pts), best))
