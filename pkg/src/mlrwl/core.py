"""Domain types, dataset validation and treatment combinatorics.

A combination treatment over ``K`` single treatments is a vector in
``{-1, +1}^K``; entry ``k`` is ``+1`` when treatment ``k`` is given.  Arrays of
treatments are stored as ``(n, K)`` integer arrays.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

__all__ = [
    "MlrwlError",
    "InvalidInputError",
    "DimensionError",
    "NonFiniteError",
    "TreatmentCodingError",
    "PositivityError",
    "DegenerateDataError",
    "NumericError",
    "OptimizationError",
    "RankDeficiencyError",
    "FitError",
    "UndefinedValueError",
    "TuningError",
    "MAX_K",
    "TrialDataset",
    "ResidualWeights",
    "DecisionFunctionParams",
    "FitConfig",
    "sign_decision",
    "enumerate_combinations",
    "combination_codes",
    "treatments_from_codes",
    "validate_dataset",
]

MAX_K = 20


class MlrwlError(Exception):
    """Base class for all package errors."""


class InvalidInputError(MlrwlError, ValueError):
    pass


class DimensionError(InvalidInputError):
    pass


class NonFiniteError(InvalidInputError):
    pass


class TreatmentCodingError(InvalidInputError):
    pass


class PositivityError(InvalidInputError):
    pass


class DegenerateDataError(InvalidInputError):
    pass


class NumericError(MlrwlError, ArithmeticError):
    pass


class OptimizationError(MlrwlError, RuntimeError):
    def __init__(self, message: str, grad_norm: float = float("nan")):
        super().__init__(message)
        self.grad_norm = grad_norm


class RankDeficiencyError(MlrwlError, np.linalg.LinAlgError):
    pass


class FitError(MlrwlError, RuntimeError):
    def __init__(self, message: str, iteration: int = -1, restart: int = -1):
        super().__init__(message)
        self.iteration = iteration
        self.restart = restart


class UndefinedValueError(MlrwlError, ArithmeticError):
    pass


class TuningError(MlrwlError, RuntimeError):
    def __init__(self, message: str, failures: Optional[dict] = None):
        super().__init__(message)
        self.failures = failures or {}


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TrialDataset:
    """Records ``(x_i, a_i, y_i)`` with optional known propensities.

    ``X`` is ``(n, p)``, ``A`` is ``(n, K)`` with entries in ``{-1, +1}``,
    ``Y`` is ``(n,)`` with larger outcomes preferred.
    """

    X: np.ndarray
    A: np.ndarray
    Y: np.ndarray
    propensity: Optional[np.ndarray] = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        A = np.asarray(self.A)
        if A.ndim == 1:
            A = A[:, None]
        if A.dtype.kind == "f":
            if np.all(np.isfinite(A)) and np.all(A == np.round(A)):
                A = A.astype(np.int64)
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "A", _frozen(A))
        object.__setattr__(self, "Y", _frozen(np.asarray(self.Y, dtype=float).reshape(-1)))
        if self.propensity is not None:
            prop = np.asarray(self.propensity, dtype=float).reshape(-1)
            object.__setattr__(self, "propensity", _frozen(prop))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def K(self) -> int:
        return self.A.shape[1]

    def subset(self, index) -> "TrialDataset":
        prop = None if self.propensity is None else self.propensity[index]
        return TrialDataset(self.X[index], self.A[index], self.Y[index], prop)


@dataclass(frozen=True)
class ResidualWeights:
    """Signed per-record classification weights."""

    w: np.ndarray
    cap: float = math.inf

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float).reshape(-1)
        if not np.all(np.isfinite(w)):
            bad = int(np.flatnonzero(~np.isfinite(w))[0])
            raise NonFiniteError(f"non-finite weight at row {bad}")
        if not self.cap > 0:
            raise InvalidInputError("weight cap must be positive")
        if np.any(np.abs(w) > self.cap):
            raise InvalidInputError(f"weights exceed cap {self.cap}")
        object.__setattr__(self, "w", _frozen(w))

    def __len__(self) -> int:
        return self.w.shape[0]


@dataclass(frozen=True, eq=False)
class DecisionFunctionParams:
    """Coefficients of the ``K`` decision functions.

    For ``kind == "linear"``: ``f_k(x) = intercepts[k] + x @ linear_coefs[k]``.
    For ``kind == "kernel"``: ``f_k(x) = intercepts[k] + sum_j k(x, train_X[j]) dual_coefs[k, j]``.
    """

    kind: str
    intercepts: np.ndarray
    linear_coefs: Optional[np.ndarray] = None
    dual_coefs: Optional[np.ndarray] = None
    kernel: Optional[object] = None
    train_X: Optional[np.ndarray] = None

    def __post_init__(self):
        b0 = np.asarray(self.intercepts, dtype=float).reshape(-1)
        object.__setattr__(self, "intercepts", _frozen(b0))
        if self.kind == "linear":
            if self.linear_coefs is None or self.dual_coefs is not None:
                raise InvalidInputError("linear params need linear_coefs and no dual_coefs")
            coefs = np.atleast_2d(np.asarray(self.linear_coefs, dtype=float))
            if coefs.shape[0] != b0.shape[0]:
                raise DimensionError("linear_coefs must have one row per treatment")
            object.__setattr__(self, "linear_coefs", _frozen(coefs))
        elif self.kind == "kernel":
            if self.dual_coefs is None or self.linear_coefs is not None:
                raise InvalidInputError("kernel params need dual_coefs and no linear_coefs")
            if self.kernel is None or self.train_X is None:
                raise InvalidInputError("kernel params need a kernel spec and training covariates")
            coefs = np.atleast_2d(np.asarray(self.dual_coefs, dtype=float))
            tx = np.asarray(self.train_X, dtype=float)
            if coefs.shape != (b0.shape[0], tx.shape[0]):
                raise DimensionError("dual_coefs must be (K, n_train)")
            object.__setattr__(self, "dual_coefs", _frozen(coefs))
            object.__setattr__(self, "train_X", _frozen(tx))
        else:
            raise InvalidInputError(f"unknown rule kind {self.kind!r}")

    @property
    def K(self) -> int:
        return self.intercepts.shape[0]

    @property
    def p(self) -> int:
        if self.kind == "linear":
            return self.linear_coefs.shape[1]
        return self.train_X.shape[1]

    @property
    def coef_matrix(self) -> np.ndarray:
        """``(K, 1 + d)`` stack of intercept and coefficients, one row per treatment."""
        coefs = self.linear_coefs if self.kind == "linear" else self.dual_coefs
        return np.column_stack([self.intercepts, coefs])

    def decision_function(self, X, gram: Optional[np.ndarray] = None) -> np.ndarray:
        """Evaluate ``f(X)`` as an ``(m, K)`` array.

        ``gram`` may hold precomputed kernel values ``k(X, train_X)``.
        """
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.p:
            raise DimensionError(f"expected {self.p} covariates, got {X.shape[1]}")
        if self.kind == "linear":
            return X @ self.linear_coefs.T + self.intercepts
        if gram is None:
            from .kernels import cross_gram

            gram = cross_gram(self.kernel, X, self.train_X)
        return gram @ self.dual_coefs.T + self.intercepts

    def predict(self, X) -> np.ndarray:
        return sign_decision(self.decision_function(X))


@dataclass(frozen=True)
class FitConfig:
    lam: float = 1.0
    epsilon: Optional[float] = None  # defaults to 1e-4 * K at fit time
    max_iter: int = 50
    n_restarts: int = 1
    weight_cap: float = math.inf
    propensity_floor: float = 1e-3
    rng_seed: int = 0

    def __post_init__(self):
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise InvalidInputError("lam must be a positive finite number")
        if self.epsilon is not None and not self.epsilon > 0:
            raise InvalidInputError("epsilon must be positive")
        if int(self.max_iter) < 1:
            raise InvalidInputError("max_iter must be at least 1")
        if int(self.n_restarts) < 1:
            raise InvalidInputError("n_restarts must be at least 1")
        if not self.weight_cap > 0:
            raise InvalidInputError("weight_cap must be positive")
        if not 0 < self.propensity_floor < 1:
            raise InvalidInputError("propensity_floor must lie in (0, 1)")

    @property
    def gamma(self) -> float:
        # the subproblem is the objective divided by lam, which turns the
        # (lam/2) penalty into 1/2 and leaves 1/lam on the loss terms
        return 1.0 / self.lam

    def stop_threshold(self, K: int) -> float:
        return 1e-4 * K if self.epsilon is None else float(self.epsilon)


def sign_decision(f_values) -> np.ndarray:
    """Map decision-function values to treatments; ``sign(0)`` is ``+1``.

    Works on a single ``(K,)`` vector or a ``(m, K)`` batch.
    """
    f = np.asarray(f_values, dtype=float)
    if not np.all(np.isfinite(f)):
        raise NonFiniteError("decision values must be finite")
    return np.where(f < 0, -1, 1).astype(np.int64)


def enumerate_combinations(K: int) -> np.ndarray:
    """All ``2**K`` treatments in lexicographic order with ``-1 < +1``.

    Row ``j`` (0-based) carries the categorical code ``j + 1``.
    """
    if isinstance(K, bool) or int(K) != K or not 1 <= K <= MAX_K:
        raise InvalidInputError(f"K must be an integer in [1, {MAX_K}], got {K!r}")
    K = int(K)
    if K <= 16:
        return np.array(list(itertools.product((-1, 1), repeat=K)), dtype=np.int64)
    codes = np.arange(2**K, dtype=np.int64)
    return treatments_from_codes(codes + 1, K)


def combination_codes(A) -> np.ndarray:
    """Categorical codes in ``{1, ..., 2**K}`` for rows of ``A``."""
    A = np.atleast_2d(np.asarray(A))
    bits = (A > 0).astype(np.int64)
    K = A.shape[1]
    place = 2 ** np.arange(K - 1, -1, -1, dtype=np.int64)
    return bits @ place + 1


def treatments_from_codes(codes, K: int) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64) - 1
    if np.any(codes < 0) or np.any(codes >= 2**K):
        raise InvalidInputError(f"codes must lie in [1, {2**K}]")
    shifts = np.arange(K - 1, -1, -1, dtype=np.int64)
    bits = (codes[..., None] >> shifts) & 1
    return np.where(bits == 1, 1, -1).astype(np.int64)


def validate_dataset(raw: TrialDataset, K: Optional[int] = None, p: Optional[int] = None) -> TrialDataset:
    """Check every dataset invariant; return ``raw`` unchanged when all hold.

    Raises a specific :class:`InvalidInputError` subclass naming the first
    offending row.
    """
    X, A, Y = raw.X, raw.A, raw.Y
    n = X.shape[0]
    if n < 1:
        raise DimensionError("dataset is empty")
    if X.ndim != 2 or X.shape[1] < 1:
        raise DimensionError("covariates must be an (n, p) matrix with p >= 1")
    if p is not None and X.shape[1] != p:
        raise DimensionError(f"expected p={p} covariates, got {X.shape[1]}")
    if A.ndim != 2 or A.shape[0] != n:
        raise DimensionError(f"treatment array has {A.shape[0]} rows, covariates have {n}")
    if K is not None and A.shape[1] != K:
        raise DimensionError(f"expected K={K} treatments, got {A.shape[1]}")
    if Y.shape[0] != n:
        raise DimensionError(f"outcome has {Y.shape[0]} rows, covariates have {n}")
    bad_x = ~np.all(np.isfinite(X), axis=1)
    if bad_x.any():
        raise NonFiniteError(f"non-finite covariate at row {int(np.flatnonzero(bad_x)[0])}")
    bad_y = ~np.isfinite(Y)
    if bad_y.any():
        raise NonFiniteError(f"non-finite outcome at row {int(np.flatnonzero(bad_y)[0])}")
    bad_a = ~np.all((A == 1) | (A == -1), axis=1)
    if bad_a.any():
        row = int(np.flatnonzero(bad_a)[0])
        raise TreatmentCodingError(f"treatment entries must be -1 or +1; row {row} is {A[row].tolist()}")
    if raw.propensity is not None:
        prop = raw.propensity
        if prop.shape[0] != n:
            raise DimensionError(f"propensity has {prop.shape[0]} rows, covariates have {n}")
        bad_p = ~np.isfinite(prop) | (prop <= 0) | (prop > 1)
        if bad_p.any():
            row = int(np.flatnonzero(bad_p)[0])
            raise PositivityError(f"propensity must lie in (0, 1]; row {row} is {prop[row]!r}")
    return raw
