"""Propensity and treatment-free working models, and the residual weights they feed.

The propensity model is a ridge-penalized multinomial logistic regression on
the categorical code of the combination treatment.  The treatment-free model
is an inverse-propensity weighted least-squares fit of the outcome.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
import scipy.linalg as sla
from scipy.special import log_softmax, softmax

from .core import (
    DimensionError,
    InvalidInputError,
    OptimizationError,
    PositivityError,
    RankDeficiencyError,
    ResidualWeights,
    TrialDataset,
    combination_codes,
)

__all__ = [
    "PropensityModel",
    "TreatmentFreeModel",
    "fit_propensity",
    "predict_propensity",
    "fit_treatment_free",
    "residual_weights",
    "plugin_weights",
]

GRAD_TOL = 1e-6
# keeps intercepts finite when a code never occurs; negligible otherwise
_INTERCEPT_RIDGE = 1e-8


def _augment(X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return np.column_stack([np.ones(X.shape[0]), X])


@dataclass(frozen=True)
class PropensityModel:
    """Softmax over ``2**K`` codes; row ``j`` of ``tau`` is ``(intercept, slopes)``.

    The last row is pinned at zero.
    """

    tau: np.ndarray
    ridge_lambda: float
    floor: float
    K: int
    grad_norm: float = 0.0
    iterations: int = 0

    def __post_init__(self):
        tau = np.atleast_2d(np.asarray(self.tau, dtype=float))
        if tau.shape[0] != 2**self.K:
            raise DimensionError(f"tau needs {2 ** self.K} rows for K={self.K}")
        if not 0 < self.floor < 1:
            raise InvalidInputError("floor must lie in (0, 1)")
        tau = tau.copy()
        tau.setflags(write=False)
        object.__setattr__(self, "tau", tau)

    @property
    def p(self) -> int:
        return self.tau.shape[1] - 1

    def probabilities(self, X) -> np.ndarray:
        """``(n, 2**K)`` class probabilities before flooring."""
        Z = _augment(X)
        if Z.shape[1] != self.tau.shape[1]:
            raise DimensionError(f"expected {self.p} covariates, got {Z.shape[1] - 1}")
        return softmax(Z @ self.tau.T, axis=1)

    def predict(self, X, A) -> np.ndarray:
        """Floored probability of each row's received combination."""
        A = np.atleast_2d(np.asarray(A, dtype=np.int64))
        codes = combination_codes(A) - 1
        probs = self.probabilities(X)
        return np.maximum(probs[np.arange(probs.shape[0]), codes], self.floor)


@dataclass(frozen=True)
class TreatmentFreeModel:
    """``g(x) = eta[0] + x @ eta[1:]``."""

    eta: np.ndarray

    def __post_init__(self):
        eta = np.asarray(self.eta, dtype=float).reshape(-1).copy()
        if not np.all(np.isfinite(eta)):
            raise InvalidInputError("treatment-free coefficients must be finite")
        eta.setflags(write=False)
        object.__setattr__(self, "eta", eta)

    def predict(self, X) -> np.ndarray:
        return _augment(X) @ self.eta


def _mnl_parts(theta, Z, Y, pen):
    """Negative penalized log-likelihood, its gradient and Hessian.

    ``theta`` holds the free ``(J-1) x d`` block; the last class is zero.
    """
    n, d = Z.shape
    J = Y.shape[1]
    T = np.vstack([theta.reshape(J - 1, d), np.zeros((1, d))])
    eta = Z @ T.T
    logp = log_softmax(eta, axis=1)
    P = np.exp(logp)
    f = -float(np.sum(Y * logp)) + float(np.sum(pen * theta.reshape(J - 1, d) ** 2))
    R = (P - Y)[:, : J - 1]
    g = (R.T @ Z) + 2.0 * pen * theta.reshape(J - 1, d)
    H = np.zeros((J - 1, d, J - 1, d))
    Pm = P[:, : J - 1]
    for a in range(J - 1):
        for b in range(a, J - 1):
            wab = Pm[:, a] * ((a == b) - Pm[:, b])
            blk = (Z * wab[:, None]).T @ Z
            H[a, :, b, :] = blk
            H[b, :, a, :] = blk.T
    H = H.reshape((J - 1) * d, (J - 1) * d)
    H[np.diag_indices_from(H)] += 2.0 * pen.reshape(-1)
    return f, g.reshape(-1), H


def fit_propensity(
    dataset: TrialDataset,
    ridge_lambda: Optional[float] = None,
    floor: float = 1e-3,
    *,
    max_iter: int = 200,
) -> PropensityModel:
    """Newton fit of the penalized multinomial logit.

    The penalty ``ridge_lambda * sum_j ||slopes_j||^2`` leaves intercepts
    free (apart from a vanishing ridge that keeps them finite when a code is
    absent).  ``ridge_lambda`` defaults to ``1e-3 * n``.

    Raises
    ------
    OptimizationError
        If the gradient infinity-norm is still above ``1e-6`` after
        ``max_iter`` Newton steps.
    """
    n, p, K = dataset.n, dataset.p, dataset.K
    if ridge_lambda is None:
        ridge_lambda = 1e-3 * n
    if not ridge_lambda >= 0:
        raise InvalidInputError("ridge_lambda must be nonnegative")
    if not 0 < floor < 1:
        raise InvalidInputError("floor must lie in (0, 1)")
    J = 2**K
    Z = _augment(dataset.X)
    d = Z.shape[1]
    codes = combination_codes(dataset.A) - 1
    Y = np.zeros((n, J))
    Y[np.arange(n), codes] = 1.0
    pen = np.full((J - 1, d), float(ridge_lambda))
    pen[:, 0] = _INTERCEPT_RIDGE * max(n, 1)
    theta = np.zeros((J - 1) * d)
    # start the intercepts at the log class-frequency ratios
    freq = (Y.sum(axis=0) + 0.5) / (n + 0.5 * J)
    theta.reshape(J - 1, d)[:, 0] = np.log(freq[: J - 1] / freq[J - 1])
    f, g, H = _mnl_parts(theta, Z, Y, pen)
    gnorm = float(np.max(np.abs(g)))
    it = 0
    while gnorm > GRAD_TOL and it < max_iter:
        it += 1
        try:
            step = sla.solve(H, g, assume_a="pos")
        except (np.linalg.LinAlgError, ValueError):
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        t = 1.0
        while True:
            cand = theta - t * step
            fc, gc, Hc = _mnl_parts(cand, Z, Y, pen)
            if fc <= f - 1e-4 * t * float(g @ step) or t < 1e-10:
                break
            t *= 0.5
        theta, f, g, H = cand, fc, gc, Hc
        gnorm = float(np.max(np.abs(g)))
    if gnorm > GRAD_TOL:
        raise OptimizationError(f"propensity fit did not converge (gradient norm {gnorm:.3e})", grad_norm=gnorm)
    tau = np.vstack([theta.reshape(J - 1, d), np.zeros((1, d))])
    return PropensityModel(tau, float(ridge_lambda), float(floor), K, grad_norm=gnorm, iterations=it)


def predict_propensity(model: PropensityModel, x, a) -> float:
    """Floored probability of combination ``a`` at covariates ``x``."""
    return float(model.predict(np.asarray(x, dtype=float).reshape(1, -1), np.asarray(a).reshape(1, -1))[0])


def fit_treatment_free(dataset: TrialDataset, propensity) -> TreatmentFreeModel:
    """Weighted least squares of ``Y`` on ``(1, X)`` with weights ``1 / propensity``."""
    prop = np.asarray(propensity, dtype=float).reshape(-1)
    if prop.shape[0] != dataset.n:
        raise DimensionError(f"{prop.shape[0]} propensities for {dataset.n} records")
    if not np.all(prop > 0):
        raise PositivityError(f"propensity must be positive (row {int(np.flatnonzero(~(prop > 0))[0])})")
    Z = _augment(dataset.X)
    sw = np.sqrt(1.0 / prop)
    Zw = Z * sw[:, None]
    yw = dataset.Y * sw
    coef, _, rank, _ = np.linalg.lstsq(Zw, yw, rcond=None)
    if rank < Z.shape[1]:
        raise RankDeficiencyError(
            f"treatment-free design has rank {rank} < {Z.shape[1]}; drop collinear covariates or add a ridge term"
        )
    return TreatmentFreeModel(coef)


def residual_weights(
    dataset: TrialDataset,
    g_model: TreatmentFreeModel,
    propensity_source: Union[str, PropensityModel, np.ndarray] = "known",
    cap: float = np.inf,
) -> ResidualWeights:
    """``w_i = (y_i - g(x_i)) / P(a_i | x_i)``, clipped to ``[-cap, cap]``.

    ``propensity_source`` is ``"known"`` (use ``dataset.propensity``), a
    fitted :class:`PropensityModel`, or an explicit per-row array.
    """
    if isinstance(propensity_source, PropensityModel):
        prop = propensity_source.predict(dataset.X, dataset.A)
    elif isinstance(propensity_source, str):
        if propensity_source != "known":
            raise InvalidInputError(f"unknown propensity source {propensity_source!r}")
        if dataset.propensity is None:
            raise InvalidInputError("dataset carries no known propensities")
        prop = dataset.propensity
    else:
        prop = np.asarray(propensity_source, dtype=float).reshape(-1)
        if prop.shape[0] != dataset.n:
            raise DimensionError(f"{prop.shape[0]} propensities for {dataset.n} records")
    if not np.all(prop > 0):
        raise PositivityError(f"propensity must be positive (row {int(np.flatnonzero(~(prop > 0))[0])})")
    w = (dataset.Y - g_model.predict(dataset.X)) / prop
    if np.isfinite(cap):
        w = np.clip(w, -cap, cap)
    return ResidualWeights(w, cap=cap)


def plugin_weights(
    dataset: TrialDataset,
    propensity: str = "known",
    *,
    ridge_lambda: Optional[float] = None,
    floor: float = 1e-3,
    cap: float = np.inf,
) -> Tuple[ResidualWeights, Optional[PropensityModel], TreatmentFreeModel]:
    """Fit the working models and return the residual weights.

    ``propensity`` is ``"known"`` or ``"estimate"``.
    """
    if propensity == "known":
        if dataset.propensity is None:
            raise InvalidInputError("dataset carries no known propensities")
        pmodel = None
        prop = dataset.propensity
    elif propensity == "estimate":
        pmodel = fit_propensity(dataset, ridge_lambda, floor)
        prop = pmodel.predict(dataset.X, dataset.A)
    else:
        raise InvalidInputError(f"unknown propensity mode {propensity!r}")
    g_model = fit_treatment_free(dataset, prop)
    return residual_weights(dataset, g_model, prop, cap=cap), pmodel, g_model
