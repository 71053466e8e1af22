"""Simulated trials with combination treatments.

Three effect families over ten uniform covariates, an outcome model
``Y = 1 + X1 + 2 X2 + tau_A(X) + noise``, randomized or covariate-driven
assignment, and the oracle rule that picks the largest effect.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Tuple, Union

import numpy as np

from .core import (
    DimensionError,
    InvalidInputError,
    TrialDataset,
    combination_codes,
    enumerate_combinations,
)

__all__ = [
    "SimSetting",
    "SETTINGS",
    "OBS_TAU",
    "get_setting",
    "gen_covariates",
    "effect_matrix",
    "treatment_effect",
    "baseline",
    "gen_outcome",
    "gen_outcomes",
    "assign_rct",
    "observational_probabilities",
    "assign_observational",
    "oracle_optimal",
    "oracle_optimal_batch",
    "simulate",
]

P_COVARIATES = 10
OBS_TAU = np.array([-0.5, -0.4, -0.3, -0.2, -0.1, 0.1, 0.2, 0.3, 0.4, 0.5])


def _ind(cond) -> np.ndarray:
    return cond.astype(float)


def _setting1(X: np.ndarray) -> np.ndarray:
    x1, x2 = X[:, 0], X[:, 1]
    return np.column_stack(
        [
            np.zeros(X.shape[0]),
            6.0 * _ind(x1 + x2 > 0) * _ind(-x1 + x2 < 0),
            5.0 * _ind(x1 + x2 < 0) * _ind(-x1 + x2 < 0),
            3.0 * _ind(x1 + x2 > 0) * _ind(-x1 + x2 > 0),
        ]
    )


def _setting2(X: np.ndarray) -> np.ndarray:
    x1, x2, x3, x4, x5, x6 = (X[:, j] for j in range(6))
    return np.column_stack(
        [
            (x1 + x2) ** 2,
            x2**2 + x3 * x4,
            -x3 * x4,
            x2**2 + 3.0 * x5 * x6,
        ]
    )


def _setting3(X: np.ndarray) -> np.ndarray:
    x = [X[:, j] for j in range(10)]
    t1 = 2.0 * (x[0] + np.exp(x[1]))
    t2 = x[2] + (x[3] + x[4]) ** 2
    t3 = np.exp(x[5] + x[6])
    return np.column_stack(
        [
            np.zeros(X.shape[0]),
            t1,
            t2,
            t1 + t2 + np.log((x[4] + 1.0) ** 2),
            t3,
            t3 + t1 + x[7] + x[8] + x[9],
            t3 + t2,
            t3 + t2 + t1 + (x[0] - x[4] + x[5]) ** 2,
        ]
    )


@dataclass(frozen=True)
class SimSetting:
    """One of the three effect families; ``K`` is 2, 2 and 3."""

    id: int

    def __post_init__(self):
        if self.id not in _EFFECTS:
            raise InvalidInputError(f"unknown simulation setting {self.id!r}")

    @property
    def K(self) -> int:
        return 3 if self.id == 3 else 2

    @property
    def p(self) -> int:
        return P_COVARIATES


# columns follow enumerate_combinations(K)
_EFFECTS: Dict[int, Callable[[np.ndarray], np.ndarray]] = {1: _setting1, 2: _setting2, 3: _setting3}
SETTINGS = {i: SimSetting(i) for i in _EFFECTS}


def get_setting(setting: Union[int, SimSetting]) -> SimSetting:
    if isinstance(setting, SimSetting):
        return setting
    try:
        return SETTINGS[int(setting)]
    except (KeyError, TypeError, ValueError):
        raise InvalidInputError(f"unknown simulation setting {setting!r}") from None


def gen_covariates(n: int, rng: np.random.Generator, p: int = P_COVARIATES) -> np.ndarray:
    if n < 1:
        raise InvalidInputError("n must be at least 1")
    return rng.uniform(-1.0, 1.0, size=(n, p))


def _as_X(X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] < P_COVARIATES:
        raise DimensionError(f"need {P_COVARIATES} covariates, got {X.shape[1]}")
    return X


def effect_matrix(setting, X) -> np.ndarray:
    """``(n, 2**K)`` treatment effects, columns in ``enumerate_combinations`` order."""
    s = get_setting(setting)
    return _EFFECTS[s.id](_as_X(X))


def _codes(s: SimSetting, A) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A))
    if A.shape[1] != s.K:
        raise InvalidInputError(f"setting {s.id} needs treatments of length {s.K}, got {A.shape[1]}")
    if not np.all(np.isin(A, (-1, 1))):
        raise InvalidInputError("treatment entries must be -1 or +1")
    return combination_codes(A.astype(np.int64)) - 1


def treatment_effect(setting, a, x) -> float:
    """Effect of combination ``a`` at a single covariate vector ``x``."""
    s = get_setting(setting)
    j = _codes(s, np.asarray(a).reshape(1, -1))[0]
    return float(effect_matrix(s, np.asarray(x, dtype=float).reshape(1, -1))[0, j])


def baseline(X) -> np.ndarray:
    """Treatment-free mean ``1 + X1 + 2 X2``."""
    X = _as_X(X)
    return 1.0 + X[:, 0] + 2.0 * X[:, 1]


def _noise_sd(noise_param: float, noise_param_is_variance: bool) -> float:
    if not noise_param >= 0:
        raise InvalidInputError("noise parameter must be nonnegative")
    return float(np.sqrt(noise_param)) if noise_param_is_variance else float(noise_param)


def gen_outcomes(
    setting,
    X,
    A,
    rng: np.random.Generator,
    *,
    noise: bool = True,
    noise_param: float = 0.3,
    noise_param_is_variance: bool = True,
) -> np.ndarray:
    """Outcomes for rows of ``X`` under treatments ``A``."""
    s = get_setting(setting)
    X = _as_X(X)
    j = _codes(s, A)
    if j.shape[0] != X.shape[0]:
        raise DimensionError("covariates and treatments differ in row count")
    y = baseline(X) + effect_matrix(s, X)[np.arange(X.shape[0]), j]
    if noise:
        y = y + rng.normal(0.0, _noise_sd(noise_param, noise_param_is_variance), size=X.shape[0])
    return y


def gen_outcome(setting, x, a, rng: np.random.Generator, **kw) -> float:
    return float(gen_outcomes(setting, np.asarray(x).reshape(1, -1), np.asarray(a).reshape(1, -1), rng, **kw)[0])


def assign_rct(n: int, K: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform assignment over the ``2**K`` combinations."""
    if n < 1:
        raise InvalidInputError("n must be at least 1")
    combos = enumerate_combinations(K)
    return combos[rng.integers(0, combos.shape[0], size=n)]


def observational_probabilities(X, K: int, tau=OBS_TAU) -> np.ndarray:
    """Softmax assignment probabilities with logits ``j * x'tau`` for codes ``j = 1..2**K``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    tau = np.asarray(tau, dtype=float)
    if X.shape[1] != tau.shape[0]:
        raise DimensionError(f"covariates have {X.shape[1]} columns, tau has {tau.shape[0]}")
    j = np.arange(1, 2**K + 1, dtype=float)
    logits = (X @ tau)[:, None] * j[None, :]
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def assign_observational(X, rng: np.random.Generator, K: int = 2, tau=OBS_TAU) -> Tuple[np.ndarray, np.ndarray]:
    """Covariate-driven assignment; returns treatments and their true propensities."""
    probs = observational_probabilities(X, K, tau)
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    codes = np.minimum((u[:, None] > cdf).sum(axis=1), probs.shape[1] - 1)
    A = enumerate_combinations(K)[codes]
    return A, probs[np.arange(probs.shape[0]), codes]


def oracle_optimal_batch(setting, X) -> np.ndarray:
    """Best combination per row; ties go to the earliest in lexicographic order."""
    s = get_setting(setting)
    eff = effect_matrix(s, X)
    return enumerate_combinations(s.K)[np.argmax(eff, axis=1)]


def oracle_optimal(setting, x) -> np.ndarray:
    return oracle_optimal_batch(setting, np.asarray(x, dtype=float).reshape(1, -1))[0]


def simulate(
    setting,
    n: int,
    rng: np.random.Generator,
    *,
    design: str = "rct",
    noise: bool = True,
    noise_param: float = 0.3,
    noise_param_is_variance: bool = True,
) -> TrialDataset:
    """A full simulated trial with true propensities attached."""
    s = get_setting(setting)
    X = gen_covariates(n, rng)
    if design == "rct":
        A = assign_rct(n, s.K, rng)
        prop = np.full(n, 2.0 ** (-s.K))
    elif design == "observational":
        A, prop = assign_observational(X, rng, s.K)
    else:
        raise InvalidInputError(f"unknown design {design!r}")
    Y = gen_outcomes(s, X, A, rng, noise=noise, noise_param=noise_param, noise_param_is_variance=noise_param_is_variance)
    return TrialDataset(X, A, Y, prop)
