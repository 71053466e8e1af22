"""Dense convex quadratic programming.

Solves::

    minimize    0.5 x'Px + q'x
    subject to  Gx <= h,  Cx = d,  x >= lower

with an operator-splitting (ADMM) iteration on the equilibrated problem,
followed by a polishing step that solves the equality-constrained KKT system
on the active set the iteration identified.  A polished point that passes the
KKT checks is returned as ``optimal``; otherwise the iteration resumes with a
tighter tolerance and polishing is retried.

Factorizations are cached per thread and keyed on the identity of the
(read-only) matrices of the problem, so a sequence of problems that share
``P``, ``G``, ``C`` and ``lower`` but differ in ``q``, ``h`` or ``d`` pays for
one factorization.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core import DimensionError, InvalidInputError

__all__ = [
    "QuadraticProgram",
    "KktResiduals",
    "QpSolution",
    "solve_qp",
    "project_psd",
    "clear_cache",
]

OPTIMAL = "optimal"
MAX_ITER = "max-iter"
INFEASIBLE = "infeasible"

_SYM_TOL = 1e-8
_RHO_MIN, _RHO_MAX = 1e-6, 1e6
_EQ_RHO_SCALE = 1e3
_EXPLICIT_INVERSE_MIN = 600
_LOW_RANK_MIN_M = 200
_POLISH_MAX = 2500
_POLISH_ROUNDS = 6


def _ro(a: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if a is None:
        return None
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class QuadraticProgram:
    """A convex QP.  ``G``/``h``, ``C``/``d`` and ``lower`` are optional.

    ``lower`` entries may be ``-inf``.  ``P_factor`` is an optional ``L`` with
    ``P = L L'``; when ``L`` has few columns the solver uses it to avoid dense
    factorizations.  Arrays are copied and frozen, so a problem object is safe
    to share across threads.
    """

    P: np.ndarray
    q: np.ndarray
    G: Optional[np.ndarray] = None
    h: Optional[np.ndarray] = None
    C: Optional[np.ndarray] = None
    d: Optional[np.ndarray] = None
    lower: Optional[np.ndarray] = None
    P_factor: Optional[np.ndarray] = None

    def __post_init__(self):
        P = self.P if isinstance(self.P, np.ndarray) and not self.P.flags.writeable else _ro(np.atleast_2d(self.P))
        q = _ro(np.asarray(self.q, dtype=float).reshape(-1))
        m = q.shape[0]
        if P.shape != (m, m):
            raise DimensionError(f"P has shape {P.shape}, expected ({m}, {m})")
        scale = max(1.0, float(np.max(np.abs(P)))) if m else 1.0
        if m and float(np.max(np.abs(P - P.T))) > _SYM_TOL * scale:
            raise InvalidInputError("P is not symmetric")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "q", q)
        for mat, vec, name in (("G", "h", "inequality"), ("C", "d", "equality")):
            M, v = getattr(self, mat), getattr(self, vec)
            if (M is None) != (v is None):
                raise InvalidInputError(f"{name} constraints need both {mat} and {vec}")
            if M is None:
                M, v = np.zeros((0, m)), np.zeros(0)
            M = M if isinstance(M, np.ndarray) and not M.flags.writeable and M.ndim == 2 else _ro(np.atleast_2d(M).reshape(-1, m))
            v = _ro(np.asarray(v, dtype=float).reshape(-1))
            if M.shape != (v.shape[0], m):
                raise DimensionError(f"{mat} has shape {M.shape}, expected ({v.shape[0]}, {m})")
            object.__setattr__(self, mat, M)
            object.__setattr__(self, vec, v)
        lower = self.lower
        if lower is None:
            lower = np.full(m, -np.inf)
        if not (isinstance(lower, np.ndarray) and not lower.flags.writeable):
            lower = _ro(np.asarray(lower, dtype=float).reshape(-1))
        if lower.shape != (m,):
            raise DimensionError(f"lower has {lower.shape[0]} entries, expected {m}")
        object.__setattr__(self, "lower", lower)
        if self.P_factor is not None:
            L = self.P_factor
            if not (isinstance(L, np.ndarray) and not L.flags.writeable):
                L = _ro(np.asarray(L, dtype=float).reshape(m, -1))
            if L.shape[0] != m:
                raise DimensionError(f"P_factor has {L.shape[0]} rows, expected {m}")
            if m and float(np.max(np.abs(L @ L.T - P))) > 1e-8 * scale:
                raise InvalidInputError("P_factor does not reproduce P")
            object.__setattr__(self, "P_factor", L)
        if np.any(np.isnan(self.q)) or np.any(np.isnan(P)):
            raise InvalidInputError("problem data contains NaN")

    @property
    def m(self) -> int:
        return self.q.shape[0]

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.P @ x + self.q @ x)


@dataclass(frozen=True)
class KktResiduals:
    stationarity: float
    primal: float
    dual: float
    complementarity: float

    def max(self) -> float:
        return max(self.stationarity, self.primal, self.dual, self.complementarity)


@dataclass(frozen=True)
class QpSolution:
    """Result of :func:`solve_qp`.

    Multipliers follow ``Px + q + G'ineq + C'eq - bound = 0`` with
    ``ineq >= 0`` and ``bound >= 0``.  ``kkt_residuals`` are relative to the
    problem scale (stationarity and dual sign against ``1 + max|Px|, |q|``,
    each constraint block against its own magnitude); ``status == "optimal"``
    means all of them are at most ``tol``.  ``kkt_residuals_abs`` holds the
    raw norms.
    """

    x: np.ndarray
    status: str
    primal_objective: float
    kkt_residuals: KktResiduals
    kkt_residuals_abs: KktResiduals
    ineq_multipliers: np.ndarray
    eq_multipliers: np.ndarray
    bound_multipliers: np.ndarray
    iterations: int = 0
    polished: bool = False
    tol: float = 1e-7


def project_psd(P, jitter: float = 0.0) -> np.ndarray:
    """Nearest PSD matrix by eigenvalue clipping, plus ``jitter`` on the diagonal.

    When the smallest eigenvalue is already ``>= -jitter`` the matrix is only
    shifted by ``jitter * I``.
    """
    P = np.asarray(P, dtype=float)
    P = 0.5 * (P + P.T)
    if jitter < 0:
        raise InvalidInputError("jitter must be non-negative")
    vals, vecs = np.linalg.eigh(P)
    if vals.size == 0 or vals[0] >= -jitter:
        return P + jitter * np.eye(P.shape[0])
    vals = np.clip(vals, 0.0, None)
    out = (vecs * vals) @ vecs.T
    out = 0.5 * (out + out.T)
    return out + jitter * np.eye(P.shape[0])


def _psd_check(P: np.ndarray) -> None:
    m = P.shape[0]
    if m == 0:
        return
    scale = max(1.0, float(np.max(np.abs(np.diag(P)))))
    tol = 1e-8 * scale
    if m <= 400:
        lo = float(np.linalg.eigvalsh(P)[0])
        if lo < -tol:
            raise InvalidInputError(f"P is not positive semidefinite (min eigenvalue {lo:.3e})")
        return
    try:
        sla.cholesky(P + tol * np.eye(m), lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        raise InvalidInputError("P is not positive semidefinite") from None


# ---------------------------------------------------------------------------
# cached problem structure


class _DenseSystem:
    """``M = Pbar + sigma I + A'RA`` held as an explicit inverse or a Cholesky factor."""

    def __init__(self, M: np.ndarray):
        m = M.shape[0]
        fac = sla.cho_factor(M, lower=True, overwrite_a=True, check_finite=False)
        if m >= _EXPLICIT_INVERSE_MIN:
            self.inv = sla.cho_solve(fac, np.eye(m), check_finite=False)
            self.inv = 0.5 * (self.inv + self.inv.T)
            self.fac = None
        else:
            self.inv = None
            self.fac = fac

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if self.inv is not None:
            return self.inv @ rhs
        return sla.cho_solve(self.fac, rhs, check_finite=False)


class _LowRankSystem:
    """``M = S + U U'`` with sparse ``S``, solved by the Woodbury identity."""

    def __init__(self, S: sp.spmatrix, U: np.ndarray):
        self.lu = spla.splu(S.tocsc())
        self.W = self.lu.solve(U) if U.shape[1] else np.zeros((S.shape[0], 0))
        cap = np.eye(U.shape[1]) + U.T @ self.W
        self.cap = sla.cho_factor(cap, lower=True, check_finite=False)
        self.U = U

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        v = self.lu.solve(rhs)
        if self.U.shape[1] == 0:
            return v
        return v - self.W @ sla.cho_solve(self.cap, self.U.T @ v, check_finite=False)


class _Structure:
    """Scaled constraint operator and factorizations for one (P, G, C, lower)."""

    def __init__(self, prob: QuadraticProgram, sigma: float, jitter: Optional[float]):
        self.refs = (prob.P, prob.G, prob.C, prob.lower, prob.P_factor)
        m = prob.m
        self.m = m
        self.sigma = sigma
        self.jitter_arg = jitter
        _psd_check(prob.P)
        if jitter is None:
            jitter = 1e-9 * float(np.trace(prob.P)) / m if m else 0.0
        self.jitter = max(float(jitter), 0.0)
        self.bound_idx = np.flatnonzero(np.isfinite(prob.lower))
        nb = self.bound_idx.size
        Ib = sp.csr_matrix((np.ones(nb), (np.arange(nb), self.bound_idx)), shape=(nb, m))
        A = sp.vstack([sp.csr_matrix(prob.G), sp.csr_matrix(prob.C), Ib], format="csr")
        self.n_ineq = prob.G.shape[0]
        self.n_eq = prob.C.shape[0]
        self.n_rows = A.shape[0]
        D, E, c = _ruiz(prob.P, A)
        self.D, self.E, self.c = D, E, c
        self.Abar = (sp.diags(E) @ A @ sp.diags(D)).tocsr()
        self.AbarT = self.Abar.T.tocsr()
        L = prob.P_factor
        if L is not None and m >= _LOW_RANK_MIN_M and L.shape[1] <= m // 4:
            self.Lbar = np.sqrt(c) * D[:, None] * L
            self.Pbar = None
        else:
            self.Lbar = None
            self.Pbar = (c * D[:, None]) * prob.P * D[None, :]
            self.Pbar[np.diag_indices_from(self.Pbar)] += c * self.jitter * D**2
        self.jdiag = c * self.jitter * D**2
        self.factors: dict = {}
        self.rho = None

    def matches(self, prob: QuadraticProgram) -> bool:
        return all(a is b for a, b in zip(self.refs, (prob.P, prob.G, prob.C, prob.lower, prob.P_factor)))

    def pmul(self, x: np.ndarray) -> np.ndarray:
        if self.Lbar is not None:
            return self.Lbar @ (self.Lbar.T @ x) + self.jdiag * x
        return self.Pbar @ x

    def factor(self, rho_vec: np.ndarray, key: float):
        sysm = self.factors.get(key)
        if sysm is None:
            if self.Lbar is None:
                M = (self.AbarT @ sp.diags(rho_vec) @ self.Abar).toarray()
                M += self.Pbar
                M[np.diag_indices_from(M)] += self.sigma
                sysm = _DenseSystem(M)
            else:
                # equality rows are few and dense, keep them in the low-rank part
                ni, ne = self.n_ineq, self.n_eq
                rows = np.r_[0:ni, ni + ne : self.n_rows]
                As = self.Abar[rows]
                S = As.T @ sp.diags(rho_vec[rows]) @ As + sp.diags(self.sigma + self.jdiag)
                Ac = self.Abar[ni : ni + ne].toarray()
                U = np.hstack([self.Lbar, Ac.T * np.sqrt(rho_vec[ni : ni + ne])[None, :]])
                sysm = _LowRankSystem(S, U)
            if len(self.factors) >= 3:
                self.factors.pop(next(iter(self.factors)))
            self.factors[key] = sysm
        return sysm


def _ruiz(P: np.ndarray, A: sp.csr_matrix, iters: int = 15):
    m = P.shape[0]
    nr = A.shape[0]
    D = np.ones(m)
    E = np.ones(nr)
    Ps = P.copy()
    As = A.copy().tocsc()
    for _ in range(iters):
        colP = np.max(np.abs(Ps), axis=0) if m else np.zeros(0)
        colA = abs(As).max(axis=0).toarray().ravel() if nr else np.zeros(m)
        dcol = np.maximum(colP, colA)
        dcol = np.where(dcol < 1e-4, 1.0, dcol)
        dcol = 1.0 / np.sqrt(np.clip(dcol, 1e-4, 1e4))
        if nr:
            rowA = abs(As).max(axis=1).toarray().ravel()
            rowA = np.where(rowA < 1e-4, 1.0, rowA)
            erow = 1.0 / np.sqrt(np.clip(rowA, 1e-4, 1e4))
        else:
            erow = np.ones(0)
        D *= dcol
        E *= erow
        Ps *= dcol[:, None]
        Ps *= dcol[None, :]
        As = (sp.diags(erow) @ As @ sp.diags(dcol)).tocsc()
        if np.all(np.abs(1 - dcol) < 1e-3) and np.all(np.abs(1 - erow) < 1e-3):
            break
    mean_col = float(np.mean(np.max(np.abs(Ps), axis=0))) if m else 0.0
    c = 1.0 / mean_col if mean_col > 1e-6 else 1.0
    c = float(np.clip(c, 1e-4, 1e4))
    return D, E, c


_local = threading.local()


def clear_cache() -> None:
    _local.cache = []


def _structure(prob: QuadraticProgram, sigma: float, jitter: Optional[float]) -> _Structure:
    cache = getattr(_local, "cache", None)
    if cache is None:
        cache = _local.cache = []
    for s in cache:
        if s.matches(prob) and s.sigma == sigma and s.jitter_arg == jitter:
            return s
    s = _Structure(prob, sigma, jitter)
    cache.insert(0, s)
    del cache[2:]
    return s


# ---------------------------------------------------------------------------
# KKT bookkeeping


def _split_y(st: _Structure, y: np.ndarray):
    ni, ne = st.n_ineq, st.n_eq
    mu = np.maximum(y[:ni], 0.0)
    nu = y[ni : ni + ne].copy()
    lam = np.zeros(st.m)
    lam[st.bound_idx] = np.maximum(-y[ni + ne :], 0.0)
    return mu, nu, lam


def _inf(v) -> float:
    return float(np.max(np.abs(v), initial=0.0))


def _residuals(prob: QuadraticProgram, x, mu, nu, lam):
    """Absolute and scale-relative KKT residuals.

    Each constraint block is measured against its own magnitude, so a large
    right-hand side in one block does not loosen the others.
    """
    Px = prob.P @ x
    Gx = prob.G @ x
    Cx = prob.C @ x
    stat = Px + prob.q + prob.G.T @ mu + prob.C.T @ nu - lam
    fin = np.isfinite(prob.lower)
    pG = float(np.max(Gx - prob.h, initial=0.0)) if Gx.size else 0.0
    pC = _inf(Cx - prob.d) if Cx.size else 0.0
    pB = float(np.max(prob.lower[fin] - x[fin], initial=0.0)) if fin.any() else 0.0
    sG = 1.0 + max(_inf(prob.h), _inf(Gx))
    sC = 1.0 + max(_inf(prob.d), _inf(Cx))
    sB = 1.0 + max(_inf(prob.lower[fin]), _inf(x))
    dual = max(float(np.max(-mu, initial=0.0)), float(np.max(-lam, initial=0.0)))
    cG = _inf(mu * (prob.h - Gx)) if Gx.size else 0.0
    cB = _inf(lam[fin] * (x[fin] - prob.lower[fin])) if fin.any() else 0.0
    s_stat = 1.0 + max(_inf(Px), _inf(prob.q))
    absolute = KktResiduals(
        stationarity=_inf(stat),
        primal=max(pG, pC, pB),
        dual=dual,
        complementarity=max(cG, cB),
    )
    relative = KktResiduals(
        stationarity=absolute.stationarity / s_stat,
        primal=max(pG / sG, pC / sC, pB / sB),
        dual=dual / s_stat,
        complementarity=max(cG / (s_stat * sG), cB / (s_stat * sB)),
    )
    return absolute, relative


def _polish(prob: QuadraticProgram, st: _Structure, x, y, tol):
    """Solve the KKT system on the active set suggested by ``(x, y)``.

    Active inequality rows holding a single free variable (that appears in no
    other active row) pin it directly, which keeps the linear system small on
    box-like problems.  Returns ``(x, mu, nu, lam)`` or ``None``.
    """
    m = st.m
    ni, ne = st.n_ineq, st.n_eq
    yG, yB = y[:ni], y[ni + ne :]
    lower = prob.lower
    bidx = st.bound_idx
    fixed = np.zeros(m, dtype=bool)
    if bidx.size:
        fixed[bidx[(x[bidx] - lower[bidx]) < -yB]] = True
    g_mask = (prob.h - prob.G @ x) < yG
    ftol = 1e-12 * (1.0 + float(np.max(np.abs(prob.h), initial=0.0)) + float(np.max(np.abs(x), initial=0.0)))
    out = None
    for _ in range(_POLISH_ROUNDS):
        out = _kkt_solve(prob, st, fixed, np.flatnonzero(g_mask))
        if out is None:
            return None
        xp, mu, nu, lam = out
        slack = prob.h - prob.G @ xp
        add_fix = (~fixed) & (xp < lower - ftol)
        add_g = (~g_mask) & (slack < -ftol)
        drop_fix = fixed & (lam < 0)
        drop_g = g_mask & (mu < 0)
        # restore feasibility first; release multipliers only from a feasible point
        if add_fix.any() or add_g.any():
            fixed = fixed | add_fix
            g_mask = g_mask | add_g
        elif drop_fix.any() or drop_g.any():
            fixed = fixed & ~drop_fix
            g_mask = g_mask & ~drop_g
        else:
            break
    return out


def _kkt_solve(prob: QuadraticProgram, st: _Structure, fixed: np.ndarray, g_act: np.ndarray):
    m = st.m
    ni, ne = st.n_ineq, st.n_eq
    lower = prob.lower
    free = np.flatnonzero(~fixed)
    known = np.zeros(m, dtype=bool)
    known[fixed] = True
    xk = np.zeros(m)
    xk[fixed] = lower[fixed]

    Gaf = prob.G[np.ix_(g_act, free)]
    nz = Gaf != 0
    row_cnt = nz.sum(axis=1)
    col_cnt = nz.sum(axis=0)
    single = np.flatnonzero(row_cnt == 1)
    pin_rows, pin_cols = [], []
    for r in single:
        j = int(np.argmax(nz[r]))
        if col_cnt[j] == 1:
            pin_rows.append(r)
            pin_cols.append(j)
    pin_rows = np.asarray(pin_rows, dtype=int)
    pin_vars = free[np.asarray(pin_cols, dtype=int)]
    kn = np.flatnonzero(known)
    if pin_rows.size:
        gr = g_act[pin_rows]
        xk[pin_vars] = (prob.h[gr] - prob.G[np.ix_(gr, kn)] @ xk[kn]) / prob.G[gr, pin_vars]
        known[pin_vars] = True
    rest_rows = np.setdiff1d(np.arange(g_act.size), pin_rows)
    g_rest = g_act[rest_rows]
    kn = np.flatnonzero(known)
    fr = np.flatnonzero(~known)
    nf = fr.size

    B = np.vstack([prob.G[np.ix_(g_rest, fr)], prob.C[:, fr]])
    rhs_b = np.concatenate([prob.h[g_rest] - prob.G[np.ix_(g_rest, kn)] @ xk[kn], prob.d - prob.C[:, kn] @ xk[kn]])
    # rows without free variables carry no unknown; they must hold as they stand
    empty = ~np.any(B != 0, axis=1)
    if np.any(empty):
        n_g = g_rest.size
        viol_g = rhs_b[:n_g][empty[:n_g]] < -1e-9 * (1.0 + np.abs(rhs_b[:n_g][empty[:n_g]]))
        viol_c = np.abs(rhs_b[n_g:][empty[n_g:]]) > 1e-9 * (1.0 + np.abs(rhs_b[n_g:][empty[n_g:]]))
        if np.any(viol_g) or np.any(viol_c):
            return None
    keep = ~empty
    B = B[keep]
    rhs_b = rhs_b[keep]
    nb = B.shape[0]
    if nf + nb > _POLISH_MAX:
        return None
    Pff = prob.P[np.ix_(fr, fr)].copy()
    Pff[np.diag_indices_from(Pff)] += st.jitter
    rhs_x = -prob.q[fr] - prob.P[np.ix_(fr, kn)] @ xk[kn]
    K = np.zeros((nf + nb, nf + nb))
    K[:nf, :nf] = Pff
    K[:nf, nf:] = B.T
    K[nf:, :nf] = B
    delta = 1e-9 * max(1.0, float(np.trace(Pff)) / max(nf, 1))
    Kreg = K.copy()
    Kreg[np.arange(nf), np.arange(nf)] += delta
    Kreg[np.arange(nf, nf + nb), np.arange(nf, nf + nb)] -= delta
    rhs = np.concatenate([rhs_x, rhs_b])
    try:
        lu = sla.lu_factor(Kreg, check_finite=False)
    except (ValueError, np.linalg.LinAlgError):
        return None
    sol = sla.lu_solve(lu, rhs, check_finite=False)
    for _ in range(5):
        r = rhs - K @ sol
        if float(np.max(np.abs(r), initial=0.0)) <= 1e-15 * (1.0 + float(np.max(np.abs(rhs), initial=0.0))):
            break
        sol = sol + sla.lu_solve(lu, r, check_finite=False)
    if not np.all(np.isfinite(sol)):
        return None
    x_new = xk.copy()
    x_new[fr] = sol[:nf]
    lag = np.zeros(g_rest.size + ne)
    lag[keep] = sol[nf:]
    mu = np.zeros(ni)
    mu[g_rest] = lag[: g_rest.size]
    nu = lag[g_rest.size :]
    grad = prob.P @ x_new + st.jitter * x_new + prob.q + prob.G.T @ mu + prob.C.T @ nu
    if pin_rows.size:
        gr = g_act[pin_rows]
        mu[gr] = -grad[pin_vars] / prob.G[gr, pin_vars]
        grad = grad + prob.G[gr].T @ mu[gr]
    lam = np.zeros(m)
    lam[fixed] = grad[fixed]
    return x_new, mu, nu, lam


# ---------------------------------------------------------------------------




def solve_qp(
    problem: QuadraticProgram,
    tol: float = 1e-7,
    max_iter: int = 20000,
    x0: Optional[np.ndarray] = None,
    y0: Optional[np.ndarray] = None,
    *,
    rho: float = 0.1,
    sigma: float = 1e-6,
    alpha: float = 1.6,
    polish: bool = True,
    jitter: Optional[float] = None,
) -> QpSolution:
    """Solve ``problem`` to KKT tolerance ``tol``.

    ``x0`` is an optional starting point; ``y0`` optional stacked multipliers
    ``[ineq, eq, bound]`` from an earlier :class:`QpSolution` (see
    :func:`stacked_multipliers`).  The iteration works on ``P + jitter I``
    (default ``jitter = 1e-9 trace(P) / m``), which makes Gram-type problems
    strictly convex and their polished KKT systems nonsingular; residuals
    are always reported for the problem as given, relative to its scale
    (see :class:`QpSolution`).
    """
    if not tol > 0:
        raise InvalidInputError("tol must be positive")
    if max_iter < 1:
        raise InvalidInputError("max_iter must be positive")
    st = _structure(problem, sigma, jitter)
    m = st.m
    D, E, c = st.D, st.E, st.c
    nb = st.bound_idx.size
    l = np.concatenate([np.full(st.n_ineq, -np.inf), problem.d, problem.lower[st.bound_idx]])
    u = np.concatenate([problem.h, problem.d, np.full(nb, np.inf)])
    lbar, ubar = E * l, E * u
    qbar = c * D * problem.q
    is_eq = np.zeros(st.n_rows, dtype=bool)
    is_eq[st.n_ineq : st.n_ineq + st.n_eq] = True
    is_free = np.isinf(l) & np.isinf(u)

    def rho_vector(r):
        v = np.full(st.n_rows, r)
        v[is_eq] = min(_EQ_RHO_SCALE * r, _RHO_MAX)
        v[is_free] = _RHO_MIN
        return v

    rho = st.rho if st.rho is not None else rho
    rho_vec = rho_vector(rho)
    fac = st.factor(rho_vec, rho)

    x = np.zeros(m) if x0 is None else np.asarray(x0, dtype=float) / D
    z = np.clip(st.Abar @ x, lbar, ubar)
    y = np.zeros(st.n_rows) if y0 is None else (np.asarray(y0, dtype=float) * c / E)

    def unscaled(xb, yb):
        return D * xb, E * yb / c

    def finish(xs, mu, nu, lam, status, it, polished):
        absolute, res = _residuals(problem, xs, mu, nu, lam)
        return QpSolution(
            x=xs,
            status=status,
            primal_objective=problem.objective(xs),
            kkt_residuals=res,
            kkt_residuals_abs=absolute,
            ineq_multipliers=mu,
            eq_multipliers=nu,
            bound_multipliers=lam,
            iterations=it,
            polished=polished,
            tol=tol,
        )

    def try_polish(xb, yb):
        xs, ys = unscaled(xb, yb)
        out = _polish(problem, st, xs, ys, tol)
        if out is None:
            return None
        xp, mu, nu, lam = out
        _, res = _residuals(problem, xp, mu, nu, lam)
        if res.max() <= tol:
            return xp, mu, nu, lam
        return None

    it = 0
    if polish and (x0 is not None and y0 is not None):
        got = try_polish(x, y)
        if got is not None:
            return finish(*got, OPTIMAL, 0, True)

    eps = 1e-4 if polish else tol
    check_every = 10
    last_polish_eps = None
    y_prev = y.copy()
    it = 0
    for it in range(1, max_iter + 1):
        rhs = st.sigma * x - qbar + st.AbarT @ (rho_vec * z - y)
        xt = fac.solve(rhs)
        zt = st.Abar @ xt
        x = alpha * xt + (1 - alpha) * x
        zr = alpha * zt + (1 - alpha) * z
        z_new = np.clip(zr + y / rho_vec, lbar, ubar)
        y = y + rho_vec * (zr - z_new)
        z = z_new
        if it % check_every and it != max_iter:
            continue
        Ax = st.Abar @ x
        Px = st.pmul(x)
        Aty = st.AbarT @ y
        r_prim = float(np.max(np.abs((Ax - z) / E), initial=0.0))
        r_dual = float(np.max(np.abs((Px + qbar + Aty) / D), initial=0.0)) / c
        n_prim = max(float(np.max(np.abs(Ax / E), initial=0.0)), float(np.max(np.abs(z / E), initial=0.0)))
        n_dual = max(
            float(np.max(np.abs(Px / D), initial=0.0)),
            float(np.max(np.abs(Aty / D), initial=0.0)),
            float(np.max(np.abs(qbar / D), initial=0.0)),
        ) / c
        # infeasibility certificate
        dy = y - y_prev
        y_prev = y.copy()
        ndy = float(np.max(np.abs(dy * E), initial=0.0))
        if ndy > 1e-12 and it > 50:
            Atdy = st.AbarT @ dy
            upos = np.where(np.isfinite(ubar), ubar, 0.0) @ np.maximum(dy, 0.0)
            lneg = np.where(np.isfinite(lbar), lbar, 0.0) @ np.minimum(dy, 0.0)
            cone_ok = not (np.any((dy > 1e-9 * ndy) & np.isinf(ubar)) or np.any((dy < -1e-9 * ndy) & np.isinf(lbar)))
            if cone_ok and float(np.max(np.abs(Atdy / D), initial=0.0)) <= 1e-6 * ndy and upos + lneg < -1e-6 * ndy:
                xs, ys = unscaled(x, y)
                mu, nu, lam = _split_y(st, ys)
                return finish(xs, mu, nu, lam, INFEASIBLE, it, False)
        converged = r_prim <= eps * (1 + n_prim) and r_dual <= eps * (1 + n_dual)
        if converged:
            if polish and last_polish_eps != eps:
                last_polish_eps = eps
                got = try_polish(x, y)
                if got is not None:
                    st.rho = rho
                    return finish(*got, OPTIMAL, it, True)
            xs, ys = unscaled(x, y)
            mu, nu, lam = _split_y(st, ys)
            _, res = _residuals(problem, xs, mu, nu, lam)
            if res.max() <= tol:
                st.rho = rho
                return finish(xs, mu, nu, lam, OPTIMAL, it, False)
            eps = max(eps * 0.1, tol * 0.1)
        if it % (5 * check_every) == 0:
            sn_prim = max(float(np.max(np.abs(Ax), initial=0.0)), float(np.max(np.abs(z), initial=0.0)), 1e-12)
            sn_dual = max(
                float(np.max(np.abs(Px), initial=0.0)),
                float(np.max(np.abs(Aty), initial=0.0)),
                float(np.max(np.abs(qbar), initial=0.0)),
                1e-12,
            )
            sr_prim = float(np.max(np.abs(Ax - z), initial=0.0)) / sn_prim
            sr_dual = float(np.max(np.abs(Px + qbar + Aty), initial=0.0)) / sn_dual
            if sr_dual > 0 and sr_prim > 0:
                new_rho = float(np.clip(rho * np.sqrt(sr_prim / sr_dual), _RHO_MIN, _RHO_MAX))
                if new_rho > 5 * rho or new_rho < rho / 5:
                    rho = new_rho
                    rho_vec = rho_vector(rho)
                    fac = st.factor(rho_vec, rho)
    if polish:
        got = try_polish(x, y)
        if got is not None:
            st.rho = rho
            return finish(*got, OPTIMAL, it, True)
    xs, ys = unscaled(x, y)
    mu, nu, lam = _split_y(st, ys)
    _, res = _residuals(problem, xs, mu, nu, lam)
    status = OPTIMAL if res.max() <= tol else MAX_ITER
    return finish(xs, mu, nu, lam, status, it, False)


def stacked_multipliers(sol: QpSolution, problem: QuadraticProgram) -> np.ndarray:
    """Multipliers of ``sol`` in the row order used for warm starts."""
    fin = np.flatnonzero(np.isfinite(problem.lower))
    return np.concatenate([sol.ineq_multipliers, sol.eq_multipliers, -sol.bound_multipliers[fin]])
