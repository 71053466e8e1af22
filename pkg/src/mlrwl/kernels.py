"""Kernel functions, Gram matrices and the median bandwidth heuristic."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .core import DegenerateDataError, DimensionError, InvalidInputError

__all__ = ["KernelSpec", "kernel_eval", "gram_matrix", "cross_gram", "median_bandwidth"]


@dataclass(frozen=True)
class KernelSpec:
    """``kind`` is ``"linear"`` or ``"rbf"``; rbf uses ``exp(-d^2 / (2 bandwidth^2))``."""

    kind: str = "rbf"
    bandwidth: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("linear", "rbf"):
            raise InvalidInputError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "rbf":
            if self.bandwidth is None or not (self.bandwidth > 0 and np.isfinite(self.bandwidth)):
                raise InvalidInputError("rbf kernel needs a positive finite bandwidth")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "bandwidth": self.bandwidth}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        return cls(kind=d["kind"], bandwidth=d.get("bandwidth"))


def kernel_eval(spec: KernelSpec, x, x_prime) -> float:
    x = np.asarray(x, dtype=float).reshape(-1)
    x_prime = np.asarray(x_prime, dtype=float).reshape(-1)
    if x.shape != x_prime.shape:
        raise DimensionError(f"kernel arguments differ in length: {x.size} vs {x_prime.size}")
    if spec.kind == "linear":
        return float(x @ x_prime)
    d = x - x_prime
    return float(np.exp(-(d @ d) / (2.0 * spec.bandwidth**2)))


def cross_gram(spec: KernelSpec, X1, X2) -> np.ndarray:
    """Kernel values ``k(X1[i], X2[j])`` as an ``(n1, n2)`` array."""
    X1 = np.atleast_2d(np.asarray(X1, dtype=float))
    X2 = np.atleast_2d(np.asarray(X2, dtype=float))
    if X1.shape[1] != X2.shape[1]:
        raise DimensionError(f"covariate dimensions differ: {X1.shape[1]} vs {X2.shape[1]}")
    if spec.kind == "linear":
        return X1 @ X2.T
    sq = cdist(X1, X2, "sqeuclidean")
    return np.exp(-sq / (2.0 * spec.bandwidth**2))


def gram_matrix(spec: KernelSpec, X) -> np.ndarray:
    """Symmetric ``(n, n)`` Gram matrix of ``X`` under ``spec``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] < 1:
        raise DimensionError("need at least one row")
    G = cross_gram(spec, X, X)
    # symmetrize exactly; BLAS may round the two triangles differently
    G = np.triu(G) + np.triu(G, 1).T
    if spec.kind == "rbf":
        np.fill_diagonal(G, 1.0)
    return G


def median_bandwidth(X) -> float:
    """Median Euclidean distance over distinct pairs of distinct rows."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] < 2:
        raise DegenerateDataError("median bandwidth needs at least two rows")
    d = pdist(X)
    d = d[d > 0]
    if d.size == 0:
        raise DegenerateDataError("all covariate rows are identical")
    return float(np.median(d))
