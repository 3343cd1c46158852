"""Ground-truth mountain-car environment with a continuous force input."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

X_BOUNDS = (-1.0, 1.0)
XDOT_BOUNDS = (-2.0, 2.0)
FORCE_BOUNDS = (-4.0, 4.0)
START_STATE = (-0.5, 0.0)


@dataclass(frozen=True)
class EnvConfig:
    gravity: float = 9.81
    dt: float = 0.3
    substeps: int = 30
    reward_center: tuple[float, float] = (0.6, 0.0)
    reward_sigma: float = 0.05
    discount: float = 0.8

    def __post_init__(self):
        if not self.gravity > 0:
            raise ValueError(f"gravity must be positive, got {self.gravity}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if int(self.substeps) != self.substeps or self.substeps < 1:
            raise ValueError(f"substeps must be an integer >= 1, got {self.substeps}")
        if not self.reward_sigma > 0:
            raise ValueError(f"reward_sigma must be positive, got {self.reward_sigma}")
        if not 0.0 <= self.discount <= 1.0:
            raise ValueError(f"discount must lie in [0, 1], got {self.discount}")


@dataclass(frozen=True)
class EnvState:
    x: float
    xdot: float


def altitude(x: float) -> float:
    if x < 0:
        return x * x + x
    return x / math.sqrt(1.0 + 5.0 * x * x)


def slope(x: float) -> float:
    """Derivative of :func:`altitude`."""
    if x < 0:
        return 2.0 * x + 1.0
    return (1.0 + 5.0 * x * x) ** -1.5


def _accel(x: float, force: float, gravity: float) -> float:
    return force - gravity * math.sin(math.atan(slope(x)))


def step(state, force: float, cfg: EnvConfig = EnvConfig()) -> EnvState:
    """Advance one control interval with RK4.

    Velocity saturates at the speed limit after every substep.  Leaving the
    track clamps the position to the boundary and zeroes the velocity.
    """
    x, xdot = (state.x, state.xdot) if isinstance(state, EnvState) else state
    x, xdot, force = float(x), float(xdot), float(force)
    if not (math.isfinite(x) and math.isfinite(xdot) and math.isfinite(force)):
        raise ValueError(f"non-finite input: x={x}, xdot={xdot}, force={force}")
    force = min(max(force, FORCE_BOUNDS[0]), FORCE_BOUNDS[1])
    g = cfg.gravity
    h = cfg.dt / cfg.substeps
    for _ in range(cfg.substeps):
        k1x, k1v = xdot, _accel(x, force, g)
        k2x, k2v = xdot + 0.5 * h * k1v, _accel(x + 0.5 * h * k1x, force, g)
        k3x, k3v = xdot + 0.5 * h * k2v, _accel(x + 0.5 * h * k2x, force, g)
        k4x, k4v = xdot + h * k3v, _accel(x + h * k3x, force, g)
        x = x + h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
        xdot = xdot + h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
        xdot = min(max(xdot, XDOT_BOUNDS[0]), XDOT_BOUNDS[1])
        if x < X_BOUNDS[0] or x > X_BOUNDS[1]:
            x = min(max(x, X_BOUNDS[0]), X_BOUNDS[1])
            xdot = 0.0
    return EnvState(x, xdot)


def step_many(states: np.ndarray, cfg: EnvConfig = EnvConfig()) -> np.ndarray:
    """Next ``(x, xdot)`` for each row ``(x, xdot, force)`` of ``states``."""
    states = np.asarray(states, dtype=float)
    out = np.empty((states.shape[0], 2))
    for i, (x, xdot, force) in enumerate(states):
        nxt = step((x, xdot), force, cfg)
        out[i] = nxt.x, nxt.xdot
    return out


def reward(state, cfg: EnvConfig = EnvConfig()):
    """Isotropic bivariate normal density centred on the goal.

    Accepts an :class:`EnvState`, an ``(x, xdot)`` pair, or an array whose
    last axis holds ``(x, xdot, ...)``; extra columns (the force) are ignored.
    """
    if isinstance(state, EnvState):
        x, xdot = state.x, state.xdot
    else:
        arr = np.asarray(state, dtype=float)
        x, xdot = arr[..., 0], arr[..., 1]
    s2 = cfg.reward_sigma**2
    cx, cv = cfg.reward_center
    r = np.exp(-((x - cx) ** 2 + (xdot - cv) ** 2) / (2.0 * s2)) / (2.0 * math.pi * s2)
    return float(r) if np.ndim(r) == 0 else r


def clamp_states(xs: np.ndarray, stop_at_wall: bool = False) -> np.ndarray:
    """Clip ``(x, xdot[, force])`` columns into the admissible box.

    With ``stop_at_wall`` rows whose position lies outside the track also get
    zero velocity, mirroring the boundary rule of :func:`step`.
    """
    xs = np.array(xs, dtype=float, copy=True)
    if stop_at_wall:
        outside = (xs[..., 0] < X_BOUNDS[0]) | (xs[..., 0] > X_BOUNDS[1])
        xs[..., 1] = np.where(outside, 0.0, xs[..., 1])
    xs[..., 0] = np.clip(xs[..., 0], *X_BOUNDS)
    xs[..., 1] = np.clip(xs[..., 1], *XDOT_BOUNDS)
    if xs.shape[-1] > 2:
        xs[..., 2] = np.clip(xs[..., 2], *FORCE_BOUNDS)
    return xs


def sample_states(n: int, include_force: bool = True, seed: int = 0, force: float = 0.0) -> np.ndarray:
    """``n`` i.i.d. uniform rows ``(x, xdot, force)`` over the admissible box.

    With ``include_force`` off the force column is set to ``force``.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    lo = np.array([X_BOUNDS[0], XDOT_BOUNDS[0], FORCE_BOUNDS[0]])
    hi = np.array([X_BOUNDS[1], XDOT_BOUNDS[1], FORCE_BOUNDS[1]])
    out = rng.uniform(lo, hi, size=(n, 3))
    if not include_force:
        out[:, 2] = force
    return out
