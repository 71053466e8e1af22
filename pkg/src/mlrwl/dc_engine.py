"""Difference-of-convex fitting of the K decision functions.

Each DC iteration linearizes the concave part of the objective at the current
coefficients, solves the dual of the resulting convex problem with
:func:`mlrwl.qpsolve.solve_qp`, and recovers the primal coefficients from the
stationarity conditions.  The dual has one variable ``theta[i, k]`` per record
and treatment, stored flat in blocks by treatment (``theta[k * n + i]``).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .core import (
    DecisionFunctionParams,
    DimensionError,
    FitConfig,
    FitError,
    InvalidInputError,
    ResidualWeights,
    TrialDataset,
)
from .kernels import KernelSpec, gram_matrix
from .loss import empirical_objective
from .qpsolve import QuadraticProgram, QpSolution, _residuals, solve_qp, stacked_multipliers

__all__ = [
    "ConcaveSubgradient",
    "DualSolution",
    "DualTemplate",
    "FitDiagnostics",
    "concave_subgradient",
    "assemble_dual_linear",
    "assemble_dual_kernel",
    "recover_primal_linear",
    "recover_primal_kernel",
    "dc_fit",
]

DESCENT_SLACK = 1e-7
_QP_ROUND = 1000
_QP_EXTEND = 3
# working-set inner solves: margin band, minimum size, rounds, and the share
# of records above which a full solve is cheaper
_WS_BAND = 0.1
_WS_MIN = 100
_WS_ROUNDS = 8
_WS_MAX_FRACTION = 0.6
_WS_MIN_N = 300


def _ro(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


def _weights(weights, n: int) -> np.ndarray:
    w = weights.w if isinstance(weights, ResidualWeights) else np.asarray(weights, dtype=float).reshape(-1)
    if w.shape[0] != n:
        raise DimensionError(f"{w.shape[0]} weights for {n} records")
    if not np.all(np.isfinite(w)):
        raise InvalidInputError("weights must be finite")
    return w


@dataclass(frozen=True)
class ConcaveSubgradient:
    """Per-record coefficients of the concave-part subgradient.

    ``c[i, k]`` multiplies the gradient of ``f_k(x_i)``: the linear-rule
    gradient is ``X' c[:, k]`` and the intercept gradient ``sum_i c[i, k]``.
    """

    c: np.ndarray

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.c, dtype=float))
        if np.any(np.count_nonzero(c, axis=1) > 1):
            raise InvalidInputError("at most one active treatment per record")
        object.__setattr__(self, "c", _ro(c))

    def grad_linear(self, X) -> np.ndarray:
        """``(K, p)`` gradient with respect to the slopes."""
        return (np.asarray(X, dtype=float).T @ self.c).T

    def grad_intercept(self) -> np.ndarray:
        return self.c.sum(axis=0)


@dataclass(frozen=True)
class DualSolution:
    """Multipliers ``theta`` (``n x K``) of the margin constraints."""

    theta: np.ndarray
    gamma: float

    def __post_init__(self):
        th = np.atleast_2d(np.asarray(self.theta, dtype=float))
        if not self.gamma > 0:
            raise InvalidInputError("gamma must be positive")
        scale = max(1.0, float(np.max(np.abs(th), initial=0.0)))
        if np.any(th < -1e-6 * scale):
            raise InvalidInputError("theta must be nonnegative")
        object.__setattr__(self, "theta", _ro(np.maximum(th, 0.0)))


@dataclass
class FitDiagnostics:
    """What happened during :func:`dc_fit`.

    ``objective_trace`` belongs to the chosen restart and starts with the
    objective at the initial coefficients.
    """

    objective_trace: List[float]
    iterations: int
    restart_index: int
    converged: bool
    descent_ok: bool
    restart_objectives: List[float] = field(default_factory=list)
    restart_traces: List[List[float]] = field(default_factory=list)
    qp_iterations: int = 0
    n_effective: int = 0
    inexact_solves: int = 0

    def to_dict(self) -> dict:
        return {
            "objective_trace": [float(v) for v in self.objective_trace],
            "iterations": int(self.iterations),
            "restart_index": int(self.restart_index),
            "converged": bool(self.converged),
            "descent_ok": bool(self.descent_ok),
            "restart_objectives": [float(v) for v in self.restart_objectives],
            "qp_iterations": int(self.qp_iterations),
            "n_effective": int(self.n_effective),
            "inexact_solves": int(self.inexact_solves),
        }


# ---------------------------------------------------------------------------
# subgradient


def _subgradient_from_margins(z: np.ndarray, A: np.ndarray, w: np.ndarray) -> ConcaveSubgradient:
    n, K = z.shape
    kstar = np.argmin(z, axis=1)  # first index on ties
    zstar = z[np.arange(n), kstar]
    active = np.where(w >= 0, zstar < 0, 1.0 - zstar > 0)
    c = np.zeros((n, K))
    rows = np.flatnonzero(active & (w != 0))
    c[rows, kstar[rows]] = np.abs(w[rows]) * A[rows, kstar[rows]]
    return ConcaveSubgradient(c)


def concave_subgradient(
    params: DecisionFunctionParams,
    dataset: TrialDataset,
    weights,
    *,
    cross: Optional[np.ndarray] = None,
) -> ConcaveSubgradient:
    """Subgradient of the concave part at ``params``.

    For each record the treatment with the smallest margin is active; it
    contributes ``|w_i| a_ik`` when its hinge in the concave part is on
    (margin below 0 for ``w_i >= 0``, below 1 for ``w_i < 0``).
    """
    w = _weights(weights, dataset.n)
    z = dataset.A * params.decision_function(dataset.X, gram=cross)
    return _subgradient_from_margins(z, dataset.A.astype(float), w)


# ---------------------------------------------------------------------------
# dual assembly


class DualTemplate:
    """The parts of the DC dual that stay fixed across iterations.

    ``P``, ``G``, ``C`` and the bounds depend only on the data, so every
    iteration reuses the same (read-only) arrays and the solver reuses its
    factorization.  Only ``q`` and ``d`` follow the subgradient.
    """

    def __init__(self, gram: np.ndarray, A: np.ndarray, w: np.ndarray, gamma: float, factor: Optional[np.ndarray] = None):
        n, K = A.shape
        if gram.shape != (n, n):
            raise DimensionError(f"Gram matrix is {gram.shape}, expected ({n}, {n})")
        if not gamma > 0:
            raise InvalidInputError("gamma must be positive")
        self.n, self.K = n, K
        self.gamma = float(gamma)
        self.gram = gram
        self.A = A.astype(float)
        self.w = w
        m = n * K
        P = np.zeros((m, m))
        for k in range(K):
            a = self.A[:, k]
            P[k * n : (k + 1) * n, k * n : (k + 1) * n] = a[:, None] * gram * a[None, :]
        self.P = _ro(P)
        self.P_factor = None
        if factor is not None:
            r = factor.shape[1]
            L = np.zeros((m, K * r))
            for k in range(K):
                L[k * n : (k + 1) * n, k * r : (k + 1) * r] = self.A[:, k][:, None] * factor
            self.P_factor = _ro(L)
        self.G = _ro(np.tile(np.eye(n), (1, K)))
        self.h = _ro(self.gamma * np.abs(w))
        C = np.zeros((K, m))
        for k in range(K):
            C[k, k * n : (k + 1) * n] = self.A[:, k]
        self.C = _ro(C)
        self.lower = _ro(np.zeros(m))
        self.q_const = -np.tile((w >= 0).astype(float), K)

    def problem(self, subgrad: ConcaveSubgradient) -> QuadraticProgram:
        c = subgrad.c
        if c.shape != (self.n, self.K):
            raise DimensionError(f"subgradient is {c.shape}, expected ({self.n}, {self.K})")
        gc = self.gram @ c  # (n, K)
        q = self.q_const - self.gamma * (self.A * gc).T.reshape(-1)
        d = self.gamma * c.sum(axis=0)
        return QuadraticProgram(self.P, q, self.G, self.h, self.C, d, self.lower, P_factor=self.P_factor)

    def theta(self, x: np.ndarray) -> np.ndarray:
        return x.reshape(self.K, self.n).T


def assemble_dual_linear(dataset: TrialDataset, weights, subgrad: ConcaveSubgradient, gamma: float) -> QuadraticProgram:
    """Dual of the linear-rule DC subproblem."""
    w = _weights(weights, dataset.n)
    X = dataset.X
    return DualTemplate(X @ X.T, dataset.A, w, gamma, factor=X).problem(subgrad)


def assemble_dual_kernel(gram, dataset: TrialDataset, weights, subgrad: ConcaveSubgradient, gamma: float) -> QuadraticProgram:
    """Dual of the kernel-rule DC subproblem; ``gram`` is the training Gram matrix."""
    w = _weights(weights, dataset.n)
    gram = np.asarray(gram, dtype=float)
    return DualTemplate(gram, dataset.A, w, gamma).problem(subgrad)


# ---------------------------------------------------------------------------
# inner solves


def _solve_chunked(prob: QuadraticProgram, x0, y0, qp_tol, qp_max_iter, qp_accept) -> Tuple[QpSolution, int]:
    used = 0
    while True:
        # short rounds; a stalled but accurate enough solve stops early
        sol = solve_qp(prob, tol=qp_tol, max_iter=min(_QP_ROUND, qp_max_iter - used), x0=x0, y0=y0)
        used += sol.iterations
        if sol.status != "max-iter" or sol.kkt_residuals.max() <= qp_accept or used >= qp_max_iter:
            return sol, used
        x0, y0 = sol.x, stacked_multipliers(sol, prob)


def _margin_gaps(v: np.ndarray):
    """Largest hinge argument ``target - a f`` per record, its treatment, and the gap to the runner-up."""
    order = np.argsort(-v, axis=1, kind="stable")
    top = np.take_along_axis(v, order[:, :1], axis=1)[:, 0]
    if v.shape[1] > 1:
        gap = top - np.take_along_axis(v, order[:, 1:2], axis=1)[:, 0]
    else:
        gap = np.full(v.shape[0], np.inf)
    return top, order[:, 0], gap


def _working_set_solve(
    template: DualTemplate,
    prob: QuadraticProgram,
    fitted: np.ndarray,
    prev: Optional[QpSolution],
    qp_tol: float,
    qp_max_iter: int,
    qp_accept: float,
) -> Tuple[Optional[QpSolution], int]:
    """Solve the dual over records near their margins, the rest held at a bound.

    ``fitted`` holds the decision values at the current coefficients.  A
    record well inside its margin gets ``theta = 0``; one clearly violating
    it through a single treatment gets the full cap ``gamma |w_i|`` on that
    treatment.  After each reduced solve the optimality conditions of the
    held records are checked against the new coefficients and violators
    join the working set, so the returned point is optimal for the full
    problem.  Returns ``(None, iterations)`` when the reduced solves fail.
    """
    used = 0
    target = (template.w >= 0).astype(float)
    v0 = target[:, None] - template.A * fitted
    # a failed reduced solve means the held split was wrong; widen and retry
    for band in (_WS_BAND, 4 * _WS_BAND, 16 * _WS_BAND):
        sol, it = _working_set_round(template, prob, v0, band, prev, qp_tol, qp_max_iter, qp_accept)
        used += it
        if sol is not None:
            return replace(sol, iterations=used), used
        if it == 0:
            # the working set is already too large to be worth it
            break
    return None, used


def _working_set_round(template, prob, v0, band, prev, qp_tol, qp_max_iter, qp_accept):
    n, K = template.n, template.K
    A = template.A
    cap = template.gamma * np.abs(template.w)
    top, kstar, gap = _margin_gaps(v0)
    near = (np.abs(top) <= band) | ((top > -band) & (gap <= band))
    min_size = min(n, _WS_MIN)
    if near.sum() < min_size:
        score = np.minimum(np.abs(top), np.where(top > 0, gap, np.inf))
        near[np.argsort(score, kind="stable")[:min_size]] = True
    used = 0
    P, q = prob.P, prob.q
    L = prob.P_factor
    for _ in range(_WS_ROUNDS):
        if near.sum() > _WS_MAX_FRACTION * n:
            return None, used
        W = np.flatnonzero(near)
        held = np.flatnonzero(~near)
        theta_fix = np.zeros((n, K))
        capped = held[top[held] > 0]
        theta_fix[capped, kstar[capped]] = cap[capped]
        x_fix = theta_fix.T.reshape(-1)
        idx = (np.arange(K)[:, None] * n + W[None, :]).reshape(-1)
        Px_fix = L @ (L.T @ x_fix) if L is not None else P @ x_fix
        nw = W.size
        sub = QuadraticProgram(
            P[np.ix_(idx, idx)],
            q[idx] + Px_fix[idx],
            np.tile(np.eye(nw), (1, K)),
            prob.h[W],
            prob.C[:, idx],
            prob.d - prob.C @ x_fix,
            np.zeros(idx.size),
            P_factor=None if L is None else L[idx],
        )
        x0 = y0 = None
        if prev is not None:
            x0 = prev.x[idx]
            y0 = np.concatenate([prev.ineq_multipliers[W], prev.eq_multipliers, -prev.bound_multipliers[idx]])
        sol, it = _solve_chunked(sub, x0, y0, qp_tol, qp_max_iter, qp_accept)
        used += it
        if sol.status == "infeasible" or (sol.status != "optimal" and sol.kkt_residuals.max() > qp_accept):
            return None, used
        x = x_fix.copy()
        x[idx] = np.maximum(sol.x, 0.0) if sol.status != "optimal" else sol.x
        nu = sol.eq_multipliers
        grad = (L @ (L.T @ x) if L is not None else P @ x) + q
        v = -(grad.reshape(K, n).T + A * nu[None, :])  # target - a f at the new coefficients
        # multipliers the held records need: mu_i = v_ik* when capped, 0 otherwise
        mu = np.zeros(n)
        mu[W] = sol.ineq_multipliers
        mu[capped] = v[capped, kstar[capped]]
        lam = mu[:, None] - v
        lam_flat = lam.T.reshape(-1)
        lam_flat[idx] = sol.bound_multipliers
        tolv = qp_tol * (1.0 + max(float(np.max(np.abs(grad - q), initial=0.0)), float(np.max(np.abs(q), initial=0.0))))
        bad = np.zeros(n, dtype=bool)
        bad[held] = np.any(lam[held] < -tolv, axis=1) | (mu[held] < -tolv)
        if not bad.any():
            absolute, rel = _residuals(prob, x, mu, nu, lam_flat)
            if rel.max() > qp_accept:
                return None, used
            status = "optimal" if rel.max() <= qp_tol else "max-iter"
            return (
                QpSolution(
                    x=x,
                    status=status,
                    primal_objective=prob.objective(x),
                    kkt_residuals=rel,
                    kkt_residuals_abs=absolute,
                    ineq_multipliers=mu,
                    eq_multipliers=nu,
                    bound_multipliers=lam_flat,
                    iterations=used,
                    polished=sol.polished,
                    tol=qp_tol,
                ),
                used,
            )
        top, kstar, gap = _margin_gaps(v)
        near |= bad | (np.abs(top) <= band) | ((top > -band) & (gap <= band))
    return None, used


# ---------------------------------------------------------------------------
# primal recovery


def _intercepts(fitted: np.ndarray, theta: np.ndarray, A: np.ndarray, w: np.ndarray, gamma: float, eq_multipliers):
    """Intercepts from margin-support records.

    ``fitted[i, k]`` is the slope part of ``f_k(x_i)``.  A record supports
    treatment ``k`` when ``theta[i, k]`` is positive and its total
    ``sum_k theta[i, k]`` is below the cap ``gamma |w_i|``; there the margin
    equals its target exactly.  Treatments without support take the
    multiplier of their balance constraint, which the optimality conditions
    make an exact intercept, or else the midpoint of the interval the
    margin constraints allow.
    """
    n, K = theta.shape
    tau = 1e-5 * gamma * float(np.max(np.abs(w), initial=0.0))
    slack = gamma * np.abs(w) - theta.sum(axis=1)
    target = (w >= 0).astype(float)
    b = np.zeros(K)
    for k in range(K):
        sup = (theta[:, k] > tau) & (slack > tau)
        if sup.any():
            b[k] = float(np.mean(target[sup] * A[sup, k] - fitted[sup, k]))
        elif eq_multipliers is not None:
            b[k] = float(eq_multipliers[k])
        else:
            b[k] = _midpoint(fitted[:, k], theta[:, k], A[:, k], target, slack, tau)
    return b


def _midpoint(fk, th, a, target, slack, tau) -> float:
    # theta > 0 forces a (fk + b) <= target; a capped-out record has no margin
    # of its own, and theta = 0 with room left forces a (fk + b) >= target
    lo, hi = -np.inf, np.inf
    bound = target * a - fk
    upper_side = th > tau
    lower_side = (th <= tau) & (slack > tau)
    for mask, sign in ((upper_side, 1), (lower_side, -1)):
        pos = mask & (a > 0)
        neg = mask & (a < 0)
        if sign == 1:
            if pos.any():
                hi = min(hi, float(np.min(bound[pos])))
            if neg.any():
                lo = max(lo, float(np.max(bound[neg])))
        else:
            if pos.any():
                lo = max(lo, float(np.max(bound[pos])))
            if neg.any():
                hi = min(hi, float(np.min(bound[neg])))
    if np.isfinite(lo) and np.isfinite(hi):
        return 0.5 * (lo + hi)
    if np.isfinite(lo):
        return lo
    if np.isfinite(hi):
        return hi
    return 0.0


def _lp_intercepts(fitted: np.ndarray, A: np.ndarray, w: np.ndarray, gamma: float, c: np.ndarray) -> np.ndarray:
    """Intercepts that minimize the convex subproblem with the slopes held fixed.

    With slopes fixed the subproblem is piecewise linear in the intercepts,
    so a small LP gives them exactly.  Used when the dual is only solved to
    a loose tolerance and the support set is not reliable.
    """
    n, K = fitted.shape
    target = (w >= 0).astype(float)
    cost = np.concatenate([gamma * c.sum(axis=0), gamma * np.abs(w)])
    # -a_ik b_k - eta_i <= a_ik fitted_ik - target_i
    rows = np.arange(n * K)
    ii = np.tile(np.arange(n), K)
    kk = np.repeat(np.arange(K), n)
    A_ub = sp.csr_matrix(
        (np.concatenate([-A.T.reshape(-1), -np.ones(n * K)]), (np.concatenate([rows, rows]), np.concatenate([kk, K + ii]))),
        shape=(n * K, K + n),
    )
    b_ub = (A * fitted).T.reshape(-1) - np.tile(target, K)
    bounds = [(None, None)] * K + [(0, None)] * n
    res = linprog(cost, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if res.status != 0:
        raise FitError(f"intercept LP failed: {res.message}")
    return np.asarray(res.x[:K], dtype=float)


def _u(theta: DualSolution, A: np.ndarray, c: np.ndarray) -> np.ndarray:
    return theta.theta * A - theta.gamma * c


def _recover_b0(fitted, theta: DualSolution, A, w, subgrad, eq_multipliers, intercepts: str) -> np.ndarray:
    if intercepts == "support":
        return _intercepts(fitted, theta.theta, A, w, theta.gamma, eq_multipliers)
    if intercepts == "lp":
        return _lp_intercepts(fitted, A, w, theta.gamma, subgrad.c)
    raise InvalidInputError(f"unknown intercept rule {intercepts!r}")


def recover_primal_linear(
    theta: DualSolution,
    dataset: TrialDataset,
    weights,
    subgrad: ConcaveSubgradient,
    *,
    eq_multipliers: Optional[np.ndarray] = None,
    intercepts: str = "support",
) -> DecisionFunctionParams:
    """Linear-rule coefficients from dual multipliers.

    Slopes follow stationarity, ``b_k = X' (theta_k * a_k - gamma c_k)``.
    Intercepts are averaged over margin-support records
    (``intercepts="support"``) or found by an LP over the subproblem with
    the slopes fixed (``intercepts="lp"``).
    """
    w = _weights(weights, dataset.n)
    A = dataset.A.astype(float)
    U = _u(theta, A, subgrad.c)
    B1 = (dataset.X.T @ U).T
    fitted = dataset.X @ B1.T
    b0 = _recover_b0(fitted, theta, A, w, subgrad, eq_multipliers, intercepts)
    return DecisionFunctionParams("linear", b0, linear_coefs=B1)


def recover_primal_kernel(
    theta: DualSolution,
    gram,
    dataset: TrialDataset,
    weights,
    subgrad: ConcaveSubgradient,
    kernel: KernelSpec,
    *,
    eq_multipliers: Optional[np.ndarray] = None,
    intercepts: str = "support",
) -> DecisionFunctionParams:
    """Kernel-rule expansion coefficients ``theta_k * a_k - gamma c_k`` and intercepts.

    ``intercepts`` is as in :func:`recover_primal_linear`.
    """
    w = _weights(weights, dataset.n)
    A = dataset.A.astype(float)
    U = _u(theta, A, subgrad.c)
    gram = np.asarray(gram, dtype=float)
    fitted = gram @ U
    b0 = _recover_b0(fitted, theta, A, w, subgrad, eq_multipliers, intercepts)
    return DecisionFunctionParams("kernel", b0, dual_coefs=U.T, kernel=kernel, train_X=dataset.X)


# ---------------------------------------------------------------------------
# outer loop


def _coalesce(X: np.ndarray, A: np.ndarray, w: np.ndarray):
    """Merge records sharing covariates, treatment and weight sign; drop zero weights.

    The objective only sees ``|w|`` summed over such records, so the merged
    problem has the same minimizers and objective values.
    """
    keep = w != 0
    X, A, w = X[keep], A[keep], w[keep]
    if X.shape[0] == 0:
        return X, A, w
    key = np.column_stack([X, A, (w >= 0).astype(float)])
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    absw = np.bincount(inv, weights=np.abs(w), minlength=uniq.shape[0])
    p, K = X.shape[1], A.shape[1]
    Xu = uniq[:, :p]
    Au = uniq[:, p : p + K].astype(np.int64)
    sign = np.where(uniq[:, -1] > 0, 1.0, -1.0)
    return Xu, Au, sign * absw


def _coef_blocks(params: DecisionFunctionParams) -> np.ndarray:
    return params.coef_matrix


def _initial_params(kind, K, p, n, restart, seed, kernel, X) -> DecisionFunctionParams:
    if restart == 0:
        b0 = np.zeros(K)
        coefs = np.zeros((K, p if kind == "linear" else n))
    else:
        rng = np.random.default_rng([int(seed), int(restart)])
        b0 = rng.uniform(-0.1, 0.1, size=K)
        coefs = rng.uniform(-0.1, 0.1, size=(K, p if kind == "linear" else n))
    if kind == "linear":
        return DecisionFunctionParams("linear", b0, linear_coefs=coefs)
    return DecisionFunctionParams("kernel", b0, dual_coefs=coefs, kernel=kernel, train_X=X)


def _convex_start(rule_kind, Xc, Ac, wc, gram, gamma, kernel_spec, qp_tol, qp_max_iter, qp_accept):
    """Weighted hinge fit used as the first starting point.

    A record with a negative weight counts as evidence for the opposite
    combination, so it enters with flipped treatments and weight ``|w|``.
    This is the convex subproblem at a zero subgradient on that data.
    Returns ``None`` when the solve does not reach ``qp_accept``.
    """
    flip = np.where(wc >= 0, 1, -1)[:, None] * Ac
    absw = np.abs(wc)
    n, K = Ac.shape
    factor = Xc if rule_kind == "linear" else None
    template = DualTemplate(gram, flip, absw, gamma, factor=factor)
    sub = ConcaveSubgradient(np.zeros((n, K)))
    sol, _ = _solve_chunked(template.problem(sub), None, None, qp_tol, qp_max_iter, qp_accept)
    if sol.status == "infeasible" or (sol.status != "optimal" and sol.kkt_residuals.max() > qp_accept):
        return None
    rule = "support" if sol.status == "optimal" else "lp"
    theta = DualSolution(template.theta(np.maximum(sol.x, 0.0)), gamma)
    data = TrialDataset(Xc, flip, np.zeros(n))
    if rule_kind == "linear":
        return recover_primal_linear(theta, data, absw, sub, eq_multipliers=sol.eq_multipliers, intercepts=rule)
    return recover_primal_kernel(theta, gram, data, absw, sub, kernel_spec, eq_multipliers=sol.eq_multipliers, intercepts=rule)


def dc_fit(
    dataset: TrialDataset,
    weights,
    config: FitConfig = FitConfig(),
    rule_kind: str = "linear",
    kernel_spec: Optional[KernelSpec] = None,
    *,
    qp_tol: float = 1e-7,
    qp_max_iter: int = 5000,
    qp_accept: float = 1e-4,
) -> Tuple[DecisionFunctionParams, FitDiagnostics]:
    """Minimize the penalized weighted psi-objective by DC iterations.

    Parameters
    ----------
    dataset, weights
        Training records and their signed weights.
    config
        Penalty ``lam`` (``gamma = 1 / lam`` in the subproblem), stopping
        threshold, iteration cap and number of restarts.
    rule_kind
        ``"linear"`` or ``"kernel"``; the latter needs ``kernel_spec``.
    qp_tol, qp_max_iter, qp_accept
        Inner solver tolerance and iteration cap.  A solve that stops at the
        cap is still used when its relative KKT residuals are below
        ``qp_accept``; such solves are counted in the diagnostics.

    Returns
    -------
    params, diagnostics
        The restart with the lowest final objective wins (first on ties).
        Restart 0 starts from the weighted hinge fit of
        :func:`_convex_start`, later restarts from small uniform draws.

    Raises
    ------
    FitError
        When an inner QP is infeasible or ends above ``qp_accept``.
    """
    if rule_kind not in ("linear", "kernel"):
        raise InvalidInputError(f"unknown rule kind {rule_kind!r}")
    if rule_kind == "kernel" and kernel_spec is None:
        raise InvalidInputError("kernel rules need a kernel_spec")
    w_full = _weights(weights, dataset.n)
    K, p = dataset.K, dataset.p
    lam = config.lam
    gamma = config.gamma
    eps = config.stop_threshold(K)
    Xc, Ac, wc = _coalesce(dataset.X, dataset.A, w_full)
    n = Xc.shape[0]

    if n == 0:
        # nothing to classify: the zero rule is optimal
        if rule_kind == "linear":
            params = DecisionFunctionParams("linear", np.zeros(K), linear_coefs=np.zeros((K, p)))
        else:
            params = DecisionFunctionParams("kernel", np.zeros(K), dual_coefs=np.zeros((K, 1)), kernel=kernel_spec, train_X=dataset.X[:1])
        obj = empirical_objective(params, dataset, w_full, lam).total
        diag = FitDiagnostics([obj, obj], 1, 0, True, True, [obj], [[obj, obj]], 0, 0)
        return params, diag

    work = TrialDataset(Xc, Ac, np.zeros(n))
    if rule_kind == "linear":
        gram = Xc @ Xc.T
        template = DualTemplate(gram, Ac, wc, gamma, factor=Xc)
    else:
        gram = gram_matrix(kernel_spec, Xc)
        template = DualTemplate(gram, Ac, wc, gamma)

    def objective(params):
        if rule_kind == "linear":
            return empirical_objective(params, work, wc, lam).total
        return empirical_objective(params, work, wc, lam, gram=gram, cross=gram).total

    def recover(theta, sub, sol):
        rule = "support" if sol.status == "optimal" else "lp"
        if rule_kind == "linear":
            return recover_primal_linear(theta, work, wc, sub, eq_multipliers=sol.eq_multipliers, intercepts=rule)
        return recover_primal_kernel(
            theta, gram, work, wc, sub, kernel_spec, eq_multipliers=sol.eq_multipliers, intercepts=rule
        )

    best = None
    traces, finals = [], []
    total_qp = 0
    inexact = 0
    for r in range(config.n_restarts):
        params = None
        if r == 0:
            params = _convex_start(rule_kind, Xc, Ac, wc, gram, gamma, kernel_spec, qp_tol, qp_max_iter, qp_accept)
        if params is None:
            params = _initial_params(rule_kind, K, p, n, r, config.rng_seed, kernel_spec, Xc)
        trace = [objective(params)]
        prev: Optional[QpSolution] = None
        prev_prob: Optional[QuadraticProgram] = None
        converged = False
        it = 0
        for it in range(1, config.max_iter + 1):
            cross = None if rule_kind == "linear" else gram
            sub = concave_subgradient(params, work, wc, cross=cross)
            prob = template.problem(sub)
            sol = None
            used = 0
            if prev is not None and n >= _WS_MIN_N:
                fitted = params.decision_function(Xc, gram=cross)
                sol, used = _working_set_solve(template, prob, fitted, prev, qp_tol, qp_max_iter, qp_accept)
            if sol is None:
                y0 = None if prev is None else stacked_multipliers(prev, prev_prob)
                sol, more = _solve_chunked(prob, None if prev is None else prev.x, y0, qp_tol, qp_max_iter, qp_accept)
                used += more
                if sol.status == "max-iter" and sol.kkt_residuals.max() > qp_accept:
                    # a slow but progressing solve gets one longer warm-started run
                    y0 = stacked_multipliers(sol, prob)
                    sol, more = _solve_chunked(prob, sol.x, y0, qp_tol, _QP_EXTEND * qp_max_iter, qp_accept)
                    used += more
            total_qp += used
            if sol.status != "optimal":
                if sol.status == "infeasible" or sol.kkt_residuals.max() > qp_accept:
                    raise FitError(f"inner QP ended with status {sol.status!r}", iteration=it, restart=r)
                inexact += 1
            x = sol.x if sol.status == "optimal" else np.maximum(sol.x, template.lower)
            theta = DualSolution(template.theta(x), gamma)
            new = recover(theta, sub, sol)
            trace.append(objective(new))
            change = float(np.sum(np.linalg.norm(_coef_blocks(new) - _coef_blocks(params), axis=1)))
            params, prev, prev_prob = new, sol, prob
            if change <= eps:
                converged = True
                break
        traces.append(trace)
        finals.append(trace[-1])
        if best is None or trace[-1] < finals[best[0]]:
            best = (r, params, it, converged)

    r, params, it, converged = best
    trace = traces[r]
    descent_ok = all(b <= a + DESCENT_SLACK for a, b in zip(trace, trace[1:]))
    diag = FitDiagnostics(
        objective_trace=trace,
        iterations=it,
        restart_index=r,
        converged=converged,
        descent_ok=descent_ok,
        restart_objectives=finals,
        restart_traces=traces,
        qp_iterations=total_qp,
        n_effective=n,
        inexact_solves=inexact,
    )
    return params, diag
