"""GP-based approximate policy iteration for mountain car.

Two GPs learn the one-step dynamics from simulated transitions, a third GP
over ``(x, xdot, force)`` holds the value function.  Each sweep predicts the
next state for every anchor under a uniform grid of candidate forces, looks
the value up at those predicted states, keeps the best force, and refits
the value GP on ``reward + discount * best``.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import gp, hyperopt
from . import mountaincar as mc
from .gp import GPModel
from .kernels import cov_matrix

logger = logging.getLogger(__name__)

DEFAULT_MCMC_STEPS = 300

# GP inputs are divided by the half-widths of the (x, xdot, force) box so each
# coordinate spans [-1, 1]
INPUT_SCALE = np.array([mc.X_BOUNDS[1], mc.XDOT_BOUNDS[1], mc.FORCE_BOUNDS[1]])


def to_unit(states) -> np.ndarray:
    """Map raw ``(x, xdot, force)`` rows to the unit box seen by the GPs."""
    return np.asarray(states, dtype=float) / INPUT_SCALE


def subseed(seed: int, tag: int) -> int:
    """Independent integer seed for stream ``tag`` derived from ``seed``."""
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


@dataclass(frozen=True)
class DynamicsModel:
    gp_x: GPModel
    gp_xdot: GPModel
    holdout_rmse: tuple[float, float] = (math.nan, math.nan)

    def predict(self, states: np.ndarray) -> np.ndarray:
        """Posterior-mean next ``(x, xdot)`` for rows ``(x, xdot, force)``, clamped to the track."""
        u = to_unit(states)
        nxt = np.column_stack([gp.predict_mean(self.gp_x, u), gp.predict_mean(self.gp_xdot, u)])
        return mc.clamp_states(nxt, stop_at_wall=True)


@dataclass(frozen=True)
class ValueModel:
    """Value GP over ``(x, xdot, force)``.

    With ``reward_cfg`` set, the GP prior mean is the (known) reward of that
    environment: ``gp_v`` is fitted to ``values - reward(support)`` and
    predictions add the reward back.  Without it the GP is zero-mean.
    """

    gp_v: GPModel
    support: np.ndarray
    values: np.ndarray
    reward_cfg: mc.EnvConfig | None = None

    @classmethod
    def fit(cls, support, values, spec, noise_var, reward_cfg=None) -> ValueModel:
        support = np.asarray(support, dtype=float)
        values = np.asarray(values, dtype=float)
        resid = values - cls._prior_mean(reward_cfg, support)
        return cls(gp.fit(to_unit(support), resid, spec, noise_var), support, values, reward_cfg)

    @staticmethod
    def _prior_mean(reward_cfg, states):
        states = np.asarray(states, dtype=float)
        return mc.reward(states, reward_cfg) if reward_cfg is not None else np.zeros(states.shape[0])

    def prior_mean(self, states) -> np.ndarray:
        return self._prior_mean(self.reward_cfg, states)

    def with_values(self, values) -> ValueModel:
        values = np.asarray(values, dtype=float)
        resid = values - self.prior_mean(self.support)
        return ValueModel(gp.with_targets(self.gp_v, resid), self.support, values, self.reward_cfg)

    def predict(self, states: np.ndarray) -> np.ndarray:
        return gp.predict_mean(self.gp_v, to_unit(states)) + self.prior_mean(states)


@dataclass(frozen=True)
class Policy:
    anchors: np.ndarray
    actions: np.ndarray
    force_grid: np.ndarray


@dataclass
class IterationDiagnostics:
    max_delta: list[float] = field(default_factory=list)
    mean_delta: list[float] = field(default_factory=list)
    thresholds: list[float] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.max_delta)


def force_grid(n_forces: int) -> np.ndarray:
    if n_forces < 2:
        raise ValueError(f"need at least 2 candidate forces, got {n_forces}")
    return np.linspace(mc.FORCE_BOUNDS[0], mc.FORCE_BOUNDS[1], n_forces)


def _tune(X, y, variant, mcmc_steps, seed, depth) -> tuple:
    theta = hyperopt.mcmc_fit(X, y, variant, steps=mcmc_steps, seed=seed, depth=depth)
    logger.info("tuned %s hyperparameters: %s", variant, {k: f"{v:.4g}" for k, v in theta.values.items()})
    return theta.to_model_args(variant, X.shape[1], depth)


def train_dynamics(
    cfg: mc.EnvConfig,
    variant: str,
    n_dyn: int = 128,
    seed: int = 0,
    *,
    mcmc_steps: int = DEFAULT_MCMC_STEPS,
    depth: int = 3,
    n_holdout: int = 32,
) -> DynamicsModel:
    """Fit next-x and next-xdot GPs on ``n_dyn`` simulated uniform transitions."""
    if n_dyn < 2:
        raise ValueError(f"n_dyn must be >= 2, got {n_dyn}")
    X = mc.sample_states(n_dyn, include_force=True, seed=subseed(seed, 0))
    Y = mc.step_many(X, cfg)
    U = to_unit(X)
    models = []
    for col in range(2):
        spec, noise = _tune(U, Y[:, col], variant, mcmc_steps, subseed(seed, 1 + col), depth)
        models.append(gp.fit(U, Y[:, col], spec, noise))
    dyn = DynamicsModel(models[0], models[1])

    Xh = mc.sample_states(n_holdout, include_force=True, seed=subseed(seed, 3))
    err = dyn.predict(Xh) - mc.step_many(Xh, cfg)
    rmse = tuple(float(v) for v in np.sqrt(np.mean(err**2, axis=0)))
    logger.info("dynamics held-out RMSE: x=%.4g xdot=%.4g", *rmse)
    return DynamicsModel(models[0], models[1], rmse)


def init_value(
    cfg: mc.EnvConfig,
    variant: str,
    n_value: int = 512,
    seed: int = 0,
    *,
    mcmc_steps: int = DEFAULT_MCMC_STEPS,
    depth: int = 3,
    reward_mean: bool = True,
) -> ValueModel:
    """Value GP over uniform ``(x, xdot, force)`` triples, initialised to the reward."""
    if n_value < 2:
        raise ValueError(f"n_value must be >= 2, got {n_value}")
    X = mc.sample_states(n_value, include_force=True, seed=subseed(seed, 4))
    y = mc.reward(X, cfg)
    spec, noise = _tune(to_unit(X), y, variant, mcmc_steps, subseed(seed, 5), depth)
    return ValueModel.fit(X, y, spec, noise, reward_cfg=cfg if reward_mean else None)


# ---------------------------------------------------------------------------
# Bellman sweep
# ---------------------------------------------------------------------------


def _tie_order(forces: np.ndarray) -> np.ndarray:
    # smallest |F| first, negative before positive
    return np.lexsort((forces, np.abs(forces)))


def bellman_backup(rewards: np.ndarray, predicted: np.ndarray, forces: np.ndarray, discount: float):
    """Greedy backup from a table of predicted next-state values.

    Parameters
    ----------
    rewards : (N,) immediate reward at each anchor
    predicted : (N, K) value of the state reached from anchor j under force k
    forces : (K,) candidate forces
    discount : discount factor

    Returns
    -------
    new_values, actions, best
        ``rewards + discount * max(best, 0)``, the maximising force per
        anchor, and the raw per-anchor maximum.  Exact ties in the maximum
        go to the smallest ``|F|``, then to the negative force.
    """
    order = _tie_order(forces)
    idx = order[np.argmax(predicted[:, order], axis=1)]
    best = predicted[np.arange(predicted.shape[0]), idx]
    new_values = rewards + discount * np.maximum(best, 0.0)
    return new_values, forces[idx], best


class SweepPlan:
    """Everything about a sweep that does not depend on the value targets.

    With the dynamics, the value GP's inputs and kernel all fixed, the
    predicted next states and their cross-covariance with the value support
    are constant across iterations; only the GP weights change.
    """

    def __init__(self, dyn: DynamicsModel, val: ValueModel, anchors: np.ndarray, cfg: mc.EnvConfig, n_forces: int):
        anchors = np.asarray(anchors, dtype=float)[:, :2]
        self.anchors = anchors
        self.cfg = cfg
        self.forces = force_grid(n_forces)
        n, k = anchors.shape[0], self.forces.shape[0]
        queries = np.column_stack([np.repeat(anchors, k, axis=0), np.tile(self.forces, n)])
        nxt = dyn.predict(queries)
        lookups = np.column_stack([nxt, queries[:, 2]])
        self.cross = cov_matrix(val.gp_v.spec, to_unit(lookups), val.gp_v.X)
        self.lookup_mean = val.prior_mean(lookups)
        self.rewards = mc.reward(anchors, cfg)
        self.shape = (n, k)

    def apply(self, val: ValueModel):
        predicted = (self.cross @ val.gp_v.alpha + self.lookup_mean).reshape(self.shape)
        new_values, actions, _ = bellman_backup(self.rewards, predicted, self.forces, self.cfg.discount)
        return new_values, Policy(self.anchors, actions, self.forces)


def value_sweep(dyn: DynamicsModel, val: ValueModel, anchors, cfg: mc.EnvConfig, n_forces: int = 128):
    """One Bellman sweep.

    Returns ``(new_values, policy, max_delta)``.  ``max_delta`` compares the
    new values with the current value targets and is defined only when the
    anchors are the value support (one anchor per target); otherwise it is
    NaN.
    """
    anchors = np.asarray(anchors, dtype=float)
    if np.any(mc.clamp_states(anchors[:, :2]) != anchors[:, :2]):
        raise ValueError("anchors must lie within the track bounds")
    new_values, policy = SweepPlan(dyn, val, anchors, cfg, n_forces).apply(val)
    if anchors.shape[0] == val.values.shape[0]:
        max_delta = float(np.max(np.abs(new_values - val.values)))
    else:
        max_delta = math.nan
    return new_values, policy, max_delta


def iterate_policy(
    dyn: DynamicsModel,
    val: ValueModel,
    cfg: mc.EnvConfig,
    n_forces: int = 128,
    tol: float = 1e-2,
    max_iter: int = 15,
    on_iteration: Callable[[int, ValueModel], None] | None = None,
):
    """Alternate sweeps over the value support with value-GP refits.

    Stops when the largest target change drops below
    ``tol * max(1, max(values))`` or after ``max_iter`` sweeps.
    """
    if not tol > 0:
        raise ValueError(f"tol must be positive, got {tol}")
    if max_iter < 1:
        raise ValueError(f"max_iter must be >= 1, got {max_iter}")
    plan = SweepPlan(dyn, val, val.support, cfg, n_forces)
    diag = IterationDiagnostics()
    policy = None
    for it in range(1, max_iter + 1):
        t0 = time.perf_counter()
        new_values, policy = plan.apply(val)
        delta = np.abs(new_values - val.values)
        if not np.all(np.isfinite(delta)):
            raise gp.NumericalError(f"value update became non-finite at iteration {it}")
        val = val.with_values(new_values)
        threshold = tol * max(1.0, float(np.max(new_values)))
        diag.max_delta.append(float(np.max(delta)))
        diag.mean_delta.append(float(np.mean(delta)))
        diag.thresholds.append(threshold)
        diag.wall_time.append(time.perf_counter() - t0)
        logger.info("iteration %d: max|dV|=%.4g mean|dV|=%.4g threshold=%.4g", it, diag.max_delta[-1], diag.mean_delta[-1], threshold)
        if on_iteration is not None:
            on_iteration(it, val)
        if diag.max_delta[-1] < threshold:
            diag.converged = True
            break
    return val, policy, diag


def run_policy_iteration(
    cfg: mc.EnvConfig,
    variant: str,
    n_dyn: int = 128,
    n_value: int = 512,
    n_forces: int = 128,
    seed: int = 0,
    tol: float = 1e-2,
    max_iter: int = 15,
    *,
    mcmc_steps: int = DEFAULT_MCMC_STEPS,
    depth: int = 3,
    dynamics: DynamicsModel | None = None,
    value: ValueModel | None = None,
    on_iteration: Callable[[int, ValueModel], None] | None = None,
):
    """Train (unless given) the dynamics and value GPs, then iterate to convergence.

    Returns ``(value, policy, diagnostics)``.
    """
    if dynamics is None:
        dynamics = train_dynamics(cfg, variant, n_dyn, seed, mcmc_steps=mcmc_steps, depth=depth)
    if value is None:
        value = init_value(cfg, variant, n_value, seed, mcmc_steps=mcmc_steps, depth=depth)
    return iterate_policy(dynamics, value, cfg, n_forces, tol, max_iter, on_iteration)


def greedy_action(val: ValueModel, dyn: DynamicsModel, state, forces: np.ndarray) -> float:
    x, xdot = state
    queries = np.column_stack([np.full_like(forces, x), np.full_like(forces, xdot), forces])
    nxt = dyn.predict(queries)
    predicted = val.predict(np.column_stack([nxt, forces]))
    order = _tie_order(forces)
    return float(forces[order[np.argmax(predicted[order])]])


def greedy_rollout(
    val: ValueModel,
    dyn: DynamicsModel,
    cfg: mc.EnvConfig,
    s0=mc.START_STATE,
    horizon: int = 100,
    n_forces: int = 128,
) -> np.ndarray:
    """Closed-loop trajectory on the true environment.

    Rows are ``(t, x, xdot, force, reward)`` for ``t = 0, dt, ..., horizon*dt``;
    ``force`` is the greedy choice at that state (the last one is not applied).
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    x, xdot = float(s0[0]), float(s0[1])
    if (x, xdot) != tuple(mc.clamp_states(np.array([x, xdot]))):
        raise ValueError(f"start state {s0} is outside the track bounds")
    forces = force_grid(n_forces)
    rows = np.empty((horizon + 1, 5))
    for i in range(horizon + 1):
        f = greedy_action(val, dyn, (x, xdot), forces)
        rows[i] = i * cfg.dt, x, xdot, f, mc.reward((x, xdot), cfg)
        if i < horizon:
            nxt = mc.step((x, xdot), f, cfg)
            x, xdot = nxt.x, nxt.xdot
    return rows
