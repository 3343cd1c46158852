"""Kernel hyperparameter selection.

Two strategies are provided: exhaustive grid search on the log marginal
likelihood, and a random-walk Metropolis chain in log-parameter space whose
target combines cross-validated prediction error with inverse-Gamma priors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.linalg import cho_solve

from . import gp
from .gp import NumericalError
from .kernels import RBF, VARIANTS, KernelSpec, cov_matrix

NOISE = "noise_var"
LENGTHSCALE = "lengthscale"
SIGMA_W = "sigma_w"
SIGMA_B = "sigma_b"

NOISE_FLOOR = 1e-6

# Values the priors are centred on (prior mode) when no others are given.
DEFAULT_VALUES = {LENGTHSCALE: 1.0, SIGMA_W: 1.0, SIGMA_B: 0.1, NOISE: 1e-4}


def param_names(variant: str) -> tuple[str, ...]:
    if variant not in VARIANTS:
        raise ValueError(f"unknown kernel variant {variant!r}")
    if variant == RBF:
        return (LENGTHSCALE, NOISE)
    return (SIGMA_W, SIGMA_B, NOISE)


@dataclass(frozen=True)
class ParamVector:
    """Named positive hyperparameters, stored in log space."""

    names: tuple[str, ...]
    log_values: tuple[float, ...]

    def __post_init__(self):
        if len(self.names) != len(self.log_values):
            raise ValueError("names and log_values differ in length")

    @classmethod
    def from_values(cls, **values: float) -> ParamVector:
        for k, v in values.items():
            if not v > 0:
                raise ValueError(f"hyperparameter {k} must be positive, got {v}")
        return cls(tuple(values), tuple(math.log(v) for v in values.values()))

    @property
    def values(self) -> dict[str, float]:
        return {k: math.exp(v) for k, v in zip(self.names, self.log_values)}

    def __getitem__(self, name: str) -> float:
        return math.exp(self.log_values[self.names.index(name)])

    def shifted(self, delta: np.ndarray) -> ParamVector:
        return ParamVector(self.names, tuple(float(a + b) for a, b in zip(self.log_values, delta)))

    def to_model_args(self, variant: str, input_dim: int, depth: int = 3) -> tuple[KernelSpec, float]:
        """Kernel spec and noise variance encoded by this vector."""
        vals = self.values
        noise = max(vals.get(NOISE, NOISE_FLOOR), NOISE_FLOOR)
        if variant == RBF:
            spec = KernelSpec.rbf(vals[LENGTHSCALE], input_dim=input_dim)
        else:
            spec = KernelSpec(
                variant, sigma_w=vals[SIGMA_W], sigma_b=vals[SIGMA_B], depth=depth, input_dim=input_dim
            )
        return spec, noise


@dataclass(frozen=True)
class InvGammaPrior:
    shape: float
    scale: float

    def __post_init__(self):
        if not (self.shape > 0 and self.scale > 0):
            raise ValueError(f"inverse-Gamma needs shape > 0 and scale > 0, got {self.shape}, {self.scale}")

    @classmethod
    def with_mode(cls, mode: float, shape: float = 2.0) -> InvGammaPrior:
        """Prior of the given shape whose density peaks at ``mode``."""
        return cls(shape, (shape + 1.0) * mode)

    @property
    def mode(self) -> float:
        return self.scale / (self.shape + 1.0)

    def logpdf(self, v: float) -> float:
        return inv_gamma_logpdf(v, self.shape, self.scale)


def inv_gamma_logpdf(v: float, shape: float, scale: float) -> float:
    if not v > 0:
        raise ValueError(f"inverse-Gamma support is v > 0, got {v}")
    return shape * math.log(scale) - math.lgamma(shape) - (shape + 1.0) * math.log(v) - scale / v


def default_priors(variant: str, shape: float = 2.0) -> dict[str, InvGammaPrior]:
    return {name: InvGammaPrior.with_mode(DEFAULT_VALUES[name], shape) for name in param_names(variant)}


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------


def log_grid(low: float, high: float, per_decade: int) -> np.ndarray:
    """Log-spaced values from ``low`` to ``high`` inclusive, ``per_decade`` steps per decade."""
    decades = math.log10(high / low)
    count = int(round(decades * per_decade)) + 1
    return np.logspace(math.log10(low), math.log10(high), count)


def product_grid(axes: Mapping[str, Iterable[float]]) -> list[ParamVector]:
    """Cartesian product of per-parameter value lists, last axis varying fastest."""
    names = tuple(axes)
    grids = [np.log(np.asarray(list(axes[k]), dtype=float)) for k in names]
    mesh = np.meshgrid(*grids, indexing="ij")
    flat = np.stack([m.ravel() for m in mesh], axis=1)
    return [ParamVector(names, tuple(float(v) for v in row)) for row in flat]


def grid_search(X, y, variant: str, grid: Sequence[ParamVector], depth: int = 3) -> tuple[ParamVector, float]:
    """Grid point with the highest log marginal likelihood.

    Points whose covariance cannot be factorized are skipped.  Ties go to the
    earliest point in ``grid``.
    """
    if len(grid) == 0:
        raise ValueError("grid is empty")
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float).ravel()
    n = X.shape[0]
    best, best_val = None, -math.inf
    cache: dict[KernelSpec, np.ndarray] = {}
    for theta in grid:
        spec, noise = theta.to_model_args(variant, X.shape[1], depth)
        if spec not in cache:
            cache = {spec: cov_matrix(spec, X)}  # grids vary noise fastest
        Q = cache[spec] + noise * np.eye(n)
        try:
            chol, _ = gp.cholesky_with_jitter(Q)
        except NumericalError:
            continue
        alpha = cho_solve((chol, True), y)
        val = float(-0.5 * y @ alpha - np.sum(np.log(np.diag(chol))) - 0.5 * n * math.log(2.0 * math.pi))
        if val > best_val:
            best, best_val = theta, val
    if best is None:
        raise NumericalError("no grid point produced a factorizable covariance")
    return best, best_val


# ---------------------------------------------------------------------------
# MCMC
# ---------------------------------------------------------------------------


def kfold_mse(X: np.ndarray, y: np.ndarray, spec: KernelSpec, noise: float, folds: Sequence[np.ndarray]) -> float:
    """Mean squared held-out prediction error over the given folds."""
    K = cov_matrix(spec, X)
    sq = 0.0
    for test in folds:
        train = np.setdiff1d(np.arange(X.shape[0]), test)
        Q = K[np.ix_(train, train)]
        Q[np.diag_indices_from(Q)] += noise
        chol, _ = gp.cholesky_with_jitter(Q)
        pred = K[np.ix_(test, train)] @ cho_solve((chol, True), y[train])
        sq += float(np.sum((pred - y[test]) ** 2))
    return sq / X.shape[0]


@dataclass
class ChainResult:
    best: ParamVector
    best_log_target: float
    initial: ParamVector
    initial_log_target: float
    accepted: int
    steps: int
    trace: list[float] = field(default_factory=list)

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / max(self.steps - 1, 1)


class _Target:
    def __init__(self, X, y, variant, priors, depth, n_folds, seed, temperature):
        self.X = np.asarray(X, dtype=float)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        self.y = np.asarray(y, dtype=float).ravel()
        if self.X.shape[0] != self.y.shape[0]:
            raise ValueError(f"X has {self.X.shape[0]} rows but y has {self.y.shape[0]} entries")
        n = self.X.shape[0]
        if n < n_folds:
            raise ValueError(f"need at least {n_folds} observations for {n_folds}-fold splitting")
        self.variant = variant
        self.priors = priors
        self.depth = depth
        perm = np.random.default_rng(seed).permutation(n)
        self.folds = np.array_split(perm, n_folds)
        if temperature is None:
            temperature = float(np.var(self.y)) / n
        self.temperature = max(temperature, 1e-300)

    def __call__(self, theta: ParamVector) -> float:
        vals = theta.values
        try:
            logp = sum(self.priors[k].logpdf(vals[k]) for k in theta.names)
            spec, noise = theta.to_model_args(self.variant, self.X.shape[1], self.depth)
            mse = kfold_mse(self.X, self.y, spec, noise, self.folds)
        except (NumericalError, ValueError, OverflowError):
            return -math.inf
        val = -mse / self.temperature + logp
        return val if math.isfinite(val) else -math.inf


def mcmc_chain(
    X,
    y,
    variant: str,
    priors: Mapping[str, InvGammaPrior] | None = None,
    steps: int = 2000,
    seed: int = 0,
    *,
    init: ParamVector | None = None,
    proposal_scale: float = 0.1,
    n_folds: int = 4,
    depth: int = 3,
    temperature: float | None = None,
) -> ChainResult:
    """Random-walk Metropolis over log hyperparameters.

    The log target is ``-MSE(theta) / temperature + sum(log prior)``, where
    MSE is the ``n_folds``-fold cross-validated squared prediction error.
    The default temperature ``var(y) / n`` makes the error term act like a
    Gaussian log-likelihood of the held-out residuals.  The chain starts at
    ``init`` or, by default, at the prior modes.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    names = param_names(variant)
    priors = dict(default_priors(variant) if priors is None else priors)
    missing = [k for k in names if k not in priors]
    if missing:
        raise ValueError(f"no prior given for {missing}")
    target = _Target(X, y, variant, priors, depth, n_folds, seed, temperature)
    if init is None:
        init = ParamVector.from_values(**{k: priors[k].mode for k in names})

    rng = np.random.default_rng(seed)
    current, current_lp = init, target(init)
    if not math.isfinite(current_lp):
        raise NumericalError(f"log target is not finite at the initial point {init.values}")
    best, best_lp = current, current_lp
    trace = [current_lp]
    accepted = 0
    for _ in range(steps - 1):
        proposal = current.shifted(proposal_scale * rng.standard_normal(len(names)))
        lp = target(proposal)
        if math.log(1.0 - rng.uniform()) < lp - current_lp:
            current, current_lp = proposal, lp
            accepted += 1
            if lp > best_lp:
                best, best_lp = proposal, lp
        trace.append(current_lp)
    return ChainResult(best, best_lp, init, trace[0], accepted, steps, trace)


def mcmc_fit(X, y, variant: str, priors=None, steps: int = 2000, seed: int = 0, **kwargs) -> ParamVector:
    """Highest-density hyperparameters visited by :func:`mcmc_chain`."""
    return mcmc_chain(X, y, variant, priors, steps, seed, **kwargs).best
