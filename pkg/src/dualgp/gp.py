"""Exact zero-mean Gaussian process regression.

All solves go through a cached lower Cholesky factor of
``Q = K + noise_var * I``; no explicit inverse is ever formed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .kernels import KernelSpec, cov_matrix, kernel_diag

logger = logging.getLogger(__name__)

JITTER_RETRIES = 6
FULL_COV_LIMIT = 2048


class NumericalError(RuntimeError):
    """A covariance matrix could not be factorized even with added jitter."""

    def __init__(self, message: str, jitter: float = 0.0):
        super().__init__(message)
        self.jitter = jitter


def cholesky_with_jitter(Q: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``Q``, retrying with growing diagonal jitter.

    The first attempt is on ``Q`` itself.  On failure a jitter of
    ``1e-8 * mean(diag Q)`` is added and doubled on each of up to
    ``JITTER_RETRIES`` further attempts.

    Returns
    -------
    chol : ndarray
        Lower-triangular factor.
    jitter : float
        Diagonal value that was added (0.0 if none was needed).
    """
    n = Q.shape[0]
    base = 1e-8 * float(np.mean(np.diag(Q)))
    if not base > 0:
        base = 1e-8
    jitter = 0.0
    for attempt in range(JITTER_RETRIES + 1):
        try:
            chol = np.linalg.cholesky(Q if jitter == 0.0 else Q + jitter * np.eye(n))
            return chol, jitter
        except np.linalg.LinAlgError:
            jitter = base if attempt == 0 else 2.0 * jitter
    raise NumericalError(f"Cholesky failed for {n}x{n} matrix after jitter up to {jitter:.3g}", jitter)


@dataclass(frozen=True)
class GPModel:
    X: np.ndarray
    y: np.ndarray
    noise_var: float
    spec: KernelSpec
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float = 0.0

    @property
    def n(self) -> int:
        return self.X.shape[0]


@dataclass(frozen=True)
class PosteriorSummary:
    """Posterior mean, variance and (for small query sets) full covariance."""

    mean: np.ndarray
    var: np.ndarray
    cov: np.ndarray | None = None

    @property
    def ci95(self) -> tuple[np.ndarray, np.ndarray]:
        half = 1.96 * np.sqrt(self.var)
        return self.mean - half, self.mean + half


def _points(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return X


def fit(X, y, spec: KernelSpec, noise_var: float) -> GPModel:
    """Condition a zero-mean GP on observations ``y`` at inputs ``X``."""
    X = _points(X)
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] < 1:
        raise ValueError("fit needs at least one observation")
    if X.shape[0] != y.shape[0]:
        raise ValueError(f"X has {X.shape[0]} rows but y has {y.shape[0]} entries")
    if not noise_var >= 0:
        raise ValueError(f"noise_var must be nonnegative, got {noise_var}")
    K = cov_matrix(spec, X)
    K[np.diag_indices_from(K)] += noise_var
    chol, jitter = cholesky_with_jitter(K)
    alpha = cho_solve((chol, True), y)
    return GPModel(X=X, y=y, noise_var=float(noise_var), spec=spec, chol=chol, alpha=alpha, jitter=jitter)


def with_targets(model: GPModel, y) -> GPModel:
    """Same inputs, kernel and factor; new targets."""
    y = np.asarray(y, dtype=float).ravel()
    if y.shape[0] != model.n:
        raise ValueError(f"expected {model.n} targets, got {y.shape[0]}")
    alpha = cho_solve((model.chol, True), y)
    return GPModel(
        X=model.X, y=y, noise_var=model.noise_var, spec=model.spec, chol=model.chol, alpha=alpha, jitter=model.jitter
    )


def _check_query(model: GPModel, Xs) -> np.ndarray:
    Xs = _points(Xs)
    if Xs.shape[0] == 0:
        raise ValueError("query set is empty")
    if Xs.shape[1] != model.X.shape[1]:
        raise ValueError(f"query dimension {Xs.shape[1]} does not match training dimension {model.X.shape[1]}")
    return Xs


def predict_mean(model: GPModel, Xs) -> np.ndarray:
    """Posterior mean only; cheapest path for large query sets."""
    Xs = _check_query(model, Xs)
    return cov_matrix(model.spec, Xs, model.X) @ model.alpha


def posterior(model: GPModel, Xs, full_cov: bool | None = None) -> PosteriorSummary:
    """Posterior mean and covariance at query points ``Xs``.

    The full covariance is returned when ``full_cov`` is true, or by default
    when there are at most ``FULL_COV_LIMIT`` query points; otherwise only
    the marginal variances are computed.
    """
    Xs = _check_query(model, Xs)
    m = Xs.shape[0]
    if full_cov is None:
        full_cov = m <= FULL_COV_LIMIT
    Ksf = cov_matrix(model.spec, Xs, model.X)
    mean = Ksf @ model.alpha
    V = solve_triangular(model.chol, Ksf.T, lower=True)
    if full_cov:
        cov = cov_matrix(model.spec, Xs) - V.T @ V
        var = np.diag(cov).copy()
    else:
        cov = None
        var = kernel_diag(model.spec, Xs) - np.sum(V * V, axis=0)
    scale = max(1.0, float(np.max(np.abs(var))))
    if np.min(var) < -1e-10 * scale:
        logger.warning("posterior variance %.3g below zero beyond roundoff; clamping", float(np.min(var)))
    var = np.maximum(var, 0.0)
    if cov is not None:
        cov[np.diag_indices_from(cov)] = var
    return PosteriorSummary(mean=mean, var=var, cov=cov)


def log_marginal_likelihood(model: GPModel) -> float:
    """log N(y | 0, K + noise_var I) from the cached factor."""
    n = model.n
    return float(
        -0.5 * model.y @ model.alpha - np.sum(np.log(np.diag(model.chol))) - 0.5 * n * math.log(2.0 * math.pi)
    )
