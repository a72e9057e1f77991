"""Multi-object and single-object scoring: OSPA distance and RMSE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass(frozen=True)
class OspaParams:
    """Cutoff c > 0, order p >= 1, and the base distance between points.

    base is "euclidean" or "mahalanobis"; the latter needs a covariance
    matrix whose inverse defines the quadratic form.
    """

    cutoff: float = 20.0
    order: float = 1.0
    base: str = "euclidean"
    covariance: np.ndarray | None = None

    def __post_init__(self):
        if self.cutoff <= 0:
            raise ValueError("cutoff must be positive")
        if self.order < 1:
            raise ValueError("order must be >= 1")
        if self.base not in ("euclidean", "mahalanobis"):
            raise ValueError(f"unknown base distance {self.base!r}")
        if self.base == "mahalanobis":
            if self.covariance is None:
                raise ValueError("mahalanobis base needs a covariance")
            object.__setattr__(self, "covariance", np.asarray(self.covariance, dtype=float))


def _pairwise_base(X: np.ndarray, Y: np.ndarray, params: OspaParams) -> np.ndarray:
    diff = X[:, None, :] - Y[None, :, :]
    if params.base == "euclidean":
        return np.linalg.norm(diff, axis=-1)
    Ci = np.linalg.inv(params.covariance)
    return np.sqrt(np.einsum("ijk,kl,ijl->ij", diff, Ci, diff))


def ospa(X, Y, params: OspaParams = OspaParams()) -> float:
    """Optimal subpattern assignment distance between two finite point sets.

    Cuts every pairwise distance off at c, solves the optimal assignment
    exactly, adds the c^p cardinality penalty for unmatched points and takes
    the order-p mean. Empty vs empty is 0; the larger set always plays the
    role of Y.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float)) if len(X) else np.empty((0, 1))
    Y = np.atleast_2d(np.asarray(Y, dtype=float)) if len(Y) else np.empty((0, 1))
    m, n = X.shape[0], Y.shape[0]
    if m == 0 and n == 0:
        return 0.0
    if m > n:
        X, Y = Y, X
        m, n = n, m
    c, p = params.cutoff, params.order
    if m == 0:
        return c
    D = np.minimum(_pairwise_base(X, Y, params), c) ** p
    rows, cols = linear_sum_assignment(D)
    localisation = D[rows, cols].sum()
    cardinality = c**p * (n - m)
    return float(((localisation + cardinality) / n) ** (1.0 / p))


def per_run_rmse(estimates: np.ndarray, truth: np.ndarray) -> float:
    """RMSE of a time-indexed estimate series against the aligned truth,
    pooled over time steps and coordinates."""
    estimates = np.asarray(estimates, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimates.shape != truth.shape:
        raise ValueError("estimate and truth series must have matching shapes")
    return float(np.sqrt(np.mean((estimates - truth) ** 2)))


def rmse(per_run_estimates, truth) -> tuple[float, float, np.ndarray]:
    """Per-run RMSE for a collection of runs, plus mean and standard
    deviation across runs."""
    values = np.array([per_run_rmse(est, truth) for est in per_run_estimates])
    return float(values.mean()), float(values.std()), values
