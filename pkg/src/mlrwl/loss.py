"""The generalized psi-loss and the penalized empirical objective.

With margins ``z_k = a_k f_k(x)`` the two hinge parts are
``T_s(z) = max(s - z_1, ..., s - z_K, 0)`` and the loss is
``psi(z) = T_1(z) - T_0(z)``, which is 1 whenever some margin is
non-positive and 0 once every margin reaches 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import (
    DecisionFunctionParams,
    DimensionError,
    InvalidInputError,
    NonFiniteError,
    NumericError,
    ResidualWeights,
    TrialDataset,
)

__all__ = [
    "ObjectiveBreakdown",
    "t_s",
    "psi_loss",
    "margins",
    "penalty_terms",
    "empirical_objective",
]


@dataclass(frozen=True)
class ObjectiveBreakdown:
    total: float
    convex_part: float
    concave_part: float
    penalty: float


def _as_margins(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise NonFiniteError("margins must be finite")
    return z


def t_s(s, z):
    """``max(s - z_1, ..., s - z_K, 0)`` over the last axis of ``z``."""
    z = _as_margins(z)
    out = np.maximum(s - z.min(axis=-1), 0.0)
    return float(out) if out.ndim == 0 else out


def psi_loss(z):
    """Generalized psi-loss ``T_1(z) - T_0(z)``; values lie in ``[0, 1]``."""
    z = _as_margins(z)
    zmin = z.min(axis=-1)
    # equal to T_1 - T_0; the clipped form cannot round past 1
    out = np.clip(1.0 - zmin, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def margins(params: DecisionFunctionParams, X, A, gram: Optional[np.ndarray] = None) -> np.ndarray:
    """``z[i, k] = A[i, k] * f_k(X[i])``.  Accepts a single record or a batch."""
    X = np.asarray(X, dtype=float)
    A = np.asarray(A)
    single = A.ndim == 1
    X2 = X[None, :] if X.ndim == 1 else X
    A2 = A[None, :] if single else A
    if A2.shape[1] != params.K:
        raise DimensionError(f"treatment has {A2.shape[1]} entries, rule has K={params.K}")
    if A2.shape[0] != X2.shape[0]:
        raise DimensionError("covariates and treatments differ in row count")
    z = A2 * params.decision_function(X2, gram=gram)
    return z[0] if single else z


def penalty_terms(params: DecisionFunctionParams, gram: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-treatment squared norms: ``||b_k||^2`` (linear) or ``b_k' G b_k`` (kernel)."""
    if params.kind == "linear":
        return np.einsum("kp,kp->k", params.linear_coefs, params.linear_coefs)
    if gram is None:
        from .kernels import gram_matrix

        gram = gram_matrix(params.kernel, params.train_X)
    B = params.dual_coefs
    return np.einsum("ki,ij,kj->k", B, gram, B)


def _fsum(values) -> float:
    return math.fsum(np.asarray(values, dtype=float).ravel().tolist())


def empirical_objective(
    params: DecisionFunctionParams,
    dataset: TrialDataset,
    weights,
    lam: float,
    *,
    gram: Optional[np.ndarray] = None,
    cross: Optional[np.ndarray] = None,
) -> ObjectiveBreakdown:
    """Penalized weighted psi-objective with its convex/concave split.

    ``gram`` is the kernel Gram matrix of ``params.train_X`` (penalty);
    ``cross`` holds ``k(dataset.X, params.train_X)`` (decision values).
    Both are recomputed when omitted.
    """
    w = weights.w if isinstance(weights, ResidualWeights) else np.asarray(weights, dtype=float).reshape(-1)
    if w.shape[0] != dataset.n:
        raise DimensionError(f"{w.shape[0]} weights for {dataset.n} records")
    if not lam >= 0:
        raise InvalidInputError("lam must be non-negative")
    z = margins(params, dataset.X, dataset.A, gram=cross)
    zmin = z.min(axis=1)
    t1 = np.maximum(1.0 - zmin, 0.0)
    t0 = np.maximum(-zmin, 0.0)
    absw = np.abs(w)
    pos = w >= 0
    pen = 0.5 * lam * _fsum(penalty_terms(params, gram=gram))
    cvx_terms = absw * np.where(pos, t1, t0)
    cave_terms = -absw * np.where(pos, t0, t1)
    convex_part = pen + _fsum(cvx_terms)
    concave_part = _fsum(cave_terms)
    total = convex_part + concave_part
    if not (math.isfinite(total) and math.isfinite(convex_part) and math.isfinite(concave_part)):
        raise NumericError(f"objective is not finite (convex={convex_part}, concave={concave_part})")
    return ObjectiveBreakdown(total=total, convex_part=convex_part, concave_part=concave_part, penalty=pen)
