"""Independent reference computations used by the tests.

Nothing here imports the solver or fitting code of the package.
"""
import itertools

import numpy as np


def brute_force_qp(P, q, G=None, h=None, C=None, d=None, lower=None, tol=1e-9):
    """Exact optimum of a small strictly convex QP by enumerating active sets.

    Every subset of the inequality rows (including finite lower bounds) is
    tried as the active set; the KKT point with nonnegative multipliers that
    is primal feasible is the optimum.
    """
    m = len(q)
    rows, rhs = [], []
    if G is not None:
        rows += list(np.asarray(G, dtype=float))
        rhs += list(np.asarray(h, dtype=float))
    if lower is not None:
        for j in range(m):
            if np.isfinite(lower[j]):
                r = np.zeros(m)
                r[j] = -1.0
                rows.append(r)
                rhs.append(-lower[j])
    Ci = np.zeros((0, m)) if C is None else np.asarray(C, dtype=float)
    di = np.zeros(0) if d is None else np.asarray(d, dtype=float)
    rows = np.array(rows).reshape(-1, m)
    rhs = np.array(rhs)
    best = None
    for size in range(0, min(len(rows), m - Ci.shape[0]) + 1):
        for S in itertools.combinations(range(len(rows)), size):
            A = np.vstack([Ci, rows[list(S)]]) if S else Ci
            b = np.concatenate([di, rhs[list(S)]]) if S else di
            k = A.shape[0]
            K = np.block([[P, A.T], [A, np.zeros((k, k))]])
            try:
                sol = np.linalg.solve(K, np.concatenate([-q, b]))
            except np.linalg.LinAlgError:
                continue
            x, lam = sol[:m], sol[m:]
            if not np.allclose(K @ sol, np.concatenate([-q, b]), atol=1e-9):
                continue
            if np.any(lam[Ci.shape[0]:] < -tol):
                continue
            if len(rows) and np.any(rows @ x - rhs > tol * (1 + np.abs(rhs))):
                continue
            obj = 0.5 * x @ P @ x + q @ x
            if best is None or obj < best[1] - 1e-12:
                best = (x, obj)
    return best


def combos(K):
    """All of {-1, +1}^K with -1 before +1 at every position."""
    return list(itertools.product((-1, 1), repeat=K))


def effects_by_hand(setting, x):
    """Treatment effects of one covariate vector, keyed by combination tuple."""
    x1, x2, x3, x4, x5, x6, x7, x8, x9, x10 = x[:10]
    if setting == 1:
        return {
            (-1, -1): 0.0,
            (-1, 1): 6.0 * (x1 + x2 > 0) * (-x1 + x2 < 0),
            (1, -1): 5.0 * (x1 + x2 < 0) * (-x1 + x2 < 0),
            (1, 1): 3.0 * (x1 + x2 > 0) * (-x1 + x2 > 0),
        }
    if setting == 2:
        return {
            (-1, -1): (x1 + x2) ** 2,
            (-1, 1): x2**2 + x3 * x4,
            (1, -1): -x3 * x4,
            (1, 1): x2**2 + 3 * x5 * x6,
        }
    t1 = 2 * (x1 + np.exp(x2))
    t2 = x3 + (x4 + x5) ** 2
    t3 = np.exp(x6 + x7)
    return {
        (-1, -1, -1): 0.0,
        (-1, -1, 1): t1,
        (-1, 1, -1): t2,
        (-1, 1, 1): t1 + t2 + np.log((x5 + 1) ** 2),
        (1, -1, -1): t3,
        (1, -1, 1): t3 + t1 + x8 + x9 + x10,
        (1, 1, -1): t3 + t2,
        (1, 1, 1): t3 + t2 + t1 + (x1 - x5 + x6) ** 2,
    }


def psi_by_hand(z):
    """Truncated multi-label hinge written from its case definition."""
    z = list(z)
    if min(z) < 0:
        return 1.0
    if min(z) >= 1:
        return 0.0
    return 1.0 - min(z)


def objective_by_hand(B0, B1, X, A, w, lam):
    """Penalized weighted psi objective of a linear rule, row by row."""
    total = 0.0
    for i in range(len(w)):
        z = [A[i, k] * (B0[k] + X[i] @ B1[k]) for k in range(len(B0))]
        total += w[i] * psi_by_hand(z)
    return total + 0.5 * lam * sum(float(b @ b) for b in B1)
