"""Covariance functions: RBF and the ReLU conjugate / neural tangent kernels.

The CK and NTK are the infinite-width duals of a ReLU MLP in NTK
parameterization with weight scale ``sigma_w``, bias scale ``sigma_b`` and
``depth`` layers.  Both are evaluated by an exact layer recursion that, for
every pair of inputs, carries the triple ``(K(x, x), K(x, x'), K(x', x'))``
forward.  The recursion is written elementwise over numpy arrays so one code
path serves scalar calls and full covariance matrices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

RBF = "rbf"
CK = "ck"
NTK = "ntk"
VARIANTS = (RBF, CK, NTK)

_TWO_PI = 2.0 * math.pi
# rows per block when assembling large matrices; entries are independent so
# blocking does not change any value
_BLOCK_ROWS = 2048


@dataclass(frozen=True)
class KernelSpec:
    """Immutable kernel selection plus hyperparameters.

    ``lengthscale`` is used by RBF only; ``sigma_w``, ``sigma_b``, ``depth``
    and ``input_dim`` by CK/NTK only.
    """

    variant: str
    lengthscale: float = 1.0
    sigma_w: float = 1.0
    sigma_b: float = 0.1
    depth: int = 3
    input_dim: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown kernel variant {self.variant!r}; expected one of {VARIANTS}")
        if self.variant == RBF:
            if not self.lengthscale > 0:
                raise ValueError(f"RBF lengthscale must be positive, got {self.lengthscale}")
        else:
            if not self.sigma_w >= 0:
                raise ValueError(f"sigma_w must be nonnegative, got {self.sigma_w}")
            if not self.sigma_b >= 0:
                raise ValueError(f"sigma_b must be nonnegative, got {self.sigma_b}")
            if int(self.depth) != self.depth or self.depth < 1:
                raise ValueError(f"depth must be an integer >= 1, got {self.depth}")
        if int(self.input_dim) != self.input_dim or self.input_dim < 1:
            raise ValueError(f"input_dim must be an integer >= 1, got {self.input_dim}")

    @classmethod
    def rbf(cls, lengthscale: float, input_dim: int = 1) -> KernelSpec:
        return cls(RBF, lengthscale=lengthscale, input_dim=input_dim)

    @classmethod
    def ck(cls, sigma_w: float = 1.0, sigma_b: float = 0.1, depth: int = 3, input_dim: int = 1) -> KernelSpec:
        return cls(CK, sigma_w=sigma_w, sigma_b=sigma_b, depth=depth, input_dim=input_dim)

    @classmethod
    def ntk(cls, sigma_w: float = 1.0, sigma_b: float = 0.1, depth: int = 3, input_dim: int = 1) -> KernelSpec:
        return cls(NTK, sigma_w=sigma_w, sigma_b=sigma_b, depth=depth, input_dim=input_dim)

    def replace(self, **changes) -> KernelSpec:
        return replace(self, **changes)


# ---------------------------------------------------------------------------
# ReLU dual activations
# ---------------------------------------------------------------------------


def _relu_duals(kxx, kxy, kyy):
    """Elementwise ReLU dual activation and its derivative dual.

    Arrays broadcast against each other.  Where either diagonal is zero the
    angle is taken as pi/2, giving ``V = 0`` and ``V' = 1/4``.
    """
    kxx = np.asarray(kxx, dtype=float)
    kxy = np.asarray(kxy, dtype=float)
    kyy = np.asarray(kyy, dtype=float)
    norm = np.sqrt(kxx * kyy)
    degenerate = norm == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        cos_c = np.clip(kxy / norm, -1.0, 1.0)
    cos_c = np.where(degenerate, 0.0, cos_c)
    c = np.arccos(cos_c)
    v = norm / _TWO_PI * (np.sin(c) + (math.pi - c) * cos_c)
    v_prime = (math.pi - c) / _TWO_PI
    return v, v_prime


def _check_duals_args(kxx: float, kxy: float, kyy: float) -> None:
    if kxx < 0 or kyy < 0:
        raise ValueError(f"kernel diagonals must be nonnegative, got kxx={kxx}, kx'x'={kyy}")
    bound = math.sqrt(kxx * kyy)
    if abs(kxy) > bound + 1e-8 * max(1.0, bound):
        raise ValueError(f"|kxx'|={abs(kxy)} exceeds sqrt(kxx*kx'x')={bound}")


def dual_relu(kxx: float, kxy: float, kyy: float) -> float:
    """E[relu(u) relu(v)] for (u, v) ~ N(0, [[kxx, kxy], [kxy, kyy]])."""
    _check_duals_args(kxx, kxy, kyy)
    v, _ = _relu_duals(kxx, kxy, kyy)
    return float(v)


def dual_relu_prime(kxx: float, kxy: float, kyy: float) -> float:
    """E[step(u) step(v)] for the same bivariate normal; lies in [0, 1/2]."""
    _check_duals_args(kxx, kxy, kyy)
    _, vp = _relu_duals(kxx, kxy, kyy)
    return float(vp)


# ---------------------------------------------------------------------------
# Pairwise evaluation
# ---------------------------------------------------------------------------


def _as_points(X, name: str) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ValueError(f"{name} must be a list of points (2-D array), got shape {X.shape}")
    return X


def _rbf_block(X: np.ndarray, Y: np.ndarray, lengthscale: float) -> np.ndarray:
    diff = X[:, None, :] - Y[None, :, :]
    sq = np.sum(diff * diff, axis=-1)
    return np.exp(-sq / lengthscale**2)


def _dual_block(X: np.ndarray, Y: np.ndarray, spec: KernelSpec) -> np.ndarray:
    sw2 = spec.sigma_w**2
    sb2 = spec.sigma_b**2
    n0 = spec.input_dim
    # level 1: affine layer; diagonals use the same product-then-sum path as
    # the cross term so that matching pairs agree bit for bit
    kxx = sw2 / n0 * np.sum(X * X, axis=-1) + sb2
    kyy = sw2 / n0 * np.sum(Y * Y, axis=-1) + sb2
    kxy = sw2 / n0 * np.sum(X[:, None, :] * Y[None, :, :], axis=-1) + sb2
    theta = kxy
    for _ in range(1, spec.depth):
        v, vp = _relu_duals(kxx[:, None], kxy, kyy[None, :])
        vxx, _ = _relu_duals(kxx, kxx, kxx)
        vyy, _ = _relu_duals(kyy, kyy, kyy)
        new_kxy = sw2 * v + sb2
        if spec.variant == NTK:
            theta = new_kxy + sw2 * theta * vp
        kxx = sw2 * vxx + sb2
        kyy = sw2 * vyy + sb2
        kxy = new_kxy
    return theta if spec.variant == NTK else kxy


def _block(X: np.ndarray, Y: np.ndarray, spec: KernelSpec) -> np.ndarray:
    if spec.variant == RBF:
        return _rbf_block(X, Y, spec.lengthscale)
    return _dual_block(X, Y, spec)


def _pair(x, y, spec: KernelSpec, variant: str) -> float:
    if spec.variant != variant:
        raise ValueError(f"spec variant is {spec.variant!r}, expected {variant!r}")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"input dimension mismatch: {x.shape} vs {y.shape}")
    if variant != RBF and x.shape[0] != spec.input_dim:
        raise ValueError(f"inputs have dimension {x.shape[0]} but spec.input_dim={spec.input_dim}")
    return float(_block(x[None, :], y[None, :], spec)[0, 0])


def rbf(x, y, lengthscale: float) -> float:
    """Squared-exponential kernel exp(-|x - y|^2 / lengthscale^2)."""
    if not lengthscale > 0:
        raise ValueError(f"lengthscale must be positive, got {lengthscale}")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return _pair(x, y, KernelSpec.rbf(lengthscale, input_dim=x.shape[0]), RBF)


def ck(x, y, spec: KernelSpec) -> float:
    """Conjugate kernel of depth ``spec.depth`` between two points."""
    return _pair(x, y, spec, CK)


def ntk(x, y, spec: KernelSpec) -> float:
    """Neural tangent kernel of depth ``spec.depth`` between two points."""
    return _pair(x, y, spec, NTK)


def evaluate(spec: KernelSpec, x, y) -> float:
    """Scalar kernel value for whichever variant ``spec`` selects."""
    return _pair(x, y, spec, spec.variant)


def cov_matrix(spec: KernelSpec, X: Sequence, Y: Sequence | None = None) -> np.ndarray:
    """Covariance matrix with entries ``k(X[i], Y[j])``.

    With ``Y`` omitted (or the same object as ``X``) the self-covariance is
    returned, made exactly symmetric by mirroring the upper triangle.
    """
    X = _as_points(X, "X")
    same = Y is None or Y is X
    Y = X if same else _as_points(Y, "Y")
    if X.shape[0] == 0 or Y.shape[0] == 0:
        raise ValueError("cov_matrix needs nonempty point lists")
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"point dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    if spec.variant != RBF and X.shape[1] != spec.input_dim:
        raise ValueError(f"points have dimension {X.shape[1]} but spec.input_dim={spec.input_dim}")

    K = np.empty((X.shape[0], Y.shape[0]))
    for start in range(0, X.shape[0], _BLOCK_ROWS):
        stop = min(start + _BLOCK_ROWS, X.shape[0])
        K[start:stop] = _block(X[start:stop], Y, spec)
    if same:
        upper = np.triu(K)
        K = upper + np.triu(K, 1).T
    return K


def kernel_diag(spec: KernelSpec, X: Sequence) -> np.ndarray:
    """Prior variances ``k(x, x)`` for each point, without the full matrix."""
    X = _as_points(X, "X")
    if spec.variant == RBF:
        return np.ones(X.shape[0])
    sw2 = spec.sigma_w**2
    sb2 = spec.sigma_b**2
    kxx = sw2 / spec.input_dim * np.sum(X * X, axis=-1) + sb2
    theta = kxx
    for _ in range(1, spec.depth):
        v, vp = _relu_duals(kxx, kxx, kxx)
        new = sw2 * v + sb2
        theta = new + sw2 * theta * vp
        kxx = new
    return theta if spec.variant == NTK else kxx
