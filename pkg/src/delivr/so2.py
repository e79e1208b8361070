"""Planar rotation group SO(2) and its algebra so(2).

Rotations are stored by their canonical angle in (-pi, pi]; the 2x2 matrix
is a derived view. Everything here is float64 and side-effect free.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ValidationError

TWO_PI = 2.0 * math.pi
ORTHO_TOL = 1e-9


def _check_finite(x, name="theta"):
    if isinstance(x, float):
        ok = math.isfinite(x)
    else:
        ok = np.all(np.isfinite(x))
    if not ok:
        raise ValidationError(f"{name} must be finite, got {x!r}")


def wrap_angle(theta):
    """Map angles onto the principal branch (-pi, pi].

    Values already inside the open interval are returned untouched so that
    round trips stay exact.
    """
    if isinstance(theta, (float, int)) and not isinstance(theta, bool):
        theta = float(theta)
        _check_finite(theta)
        if -math.pi < theta <= math.pi:
            return theta
        w = math.fmod(theta + math.pi, TWO_PI)
        w = w + TWO_PI if w <= 0.0 else w
        return w - math.pi
    theta = np.asarray(theta, dtype=np.float64)
    _check_finite(theta)
    inside = (theta > -math.pi) & (theta <= math.pi)
    wrapped = np.remainder(theta + math.pi, TWO_PI) - math.pi
    wrapped = np.where(wrapped <= -math.pi, wrapped + TWO_PI, wrapped)
    out = np.where(inside, theta, wrapped)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Rotation2:
    """An element of SO(2), held as its canonical angle."""

    angle: float

    def __post_init__(self):
        object.__setattr__(self, "angle", wrap_angle(float(self.angle)))

    @property
    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        return np.array([[c, -s], [s, c]])

    @classmethod
    def identity(cls) -> "Rotation2":
        return cls(0.0)

    @classmethod
    def from_matrix(cls, R, tol: float = ORTHO_TOL) -> "Rotation2":
        return cls(log_so2(R, tol=tol))

    def inverse(self) -> "Rotation2":
        return Rotation2(-self.angle)

    def __matmul__(self, other: "Rotation2") -> "Rotation2":
        return Rotation2(self.angle + other.angle)

    def apply(self, xy):
        """Rotate points given as (..., 2)."""
        return np.asarray(xy, dtype=np.float64) @ self.matrix.T


def hat(theta: float) -> np.ndarray:
    """so(2) element for a scalar angle: [[0, -t], [t, 0]]."""
    _check_finite(theta)
    t = float(theta)
    return np.array([[0.0, -t], [t, 0.0]])


def vee(omega) -> float:
    """Inverse of :func:`hat`; rejects non-skew input."""
    omega = np.asarray(omega, dtype=np.float64)
    if omega.shape != (2, 2):
        raise ValidationError(f"vee expects a 2x2 matrix, got shape {omega.shape}")
    if np.abs(omega + omega.T).max() > ORTHO_TOL:
        raise ValidationError("matrix is not skew-symmetric")
    return float(omega[1, 0])


def exp_so2(theta: float) -> Rotation2:
    _check_finite(theta)
    return Rotation2(float(theta))


def check_rotation(R, tol: float = ORTHO_TOL) -> np.ndarray:
    """Validate that ``R`` is a proper rotation; returns it as an array."""
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (2, 2):
        raise ValidationError(f"expected a 2x2 matrix, got shape {R.shape}")
    _check_finite(R, "R")
    (a, b), (c, d) = R.tolist()
    ortho = max(abs(a * a + c * c - 1.0), abs(b * b + d * d - 1.0), abs(a * b + c * d))
    det = a * d - b * c
    if ortho > tol or abs(det - 1.0) > tol:
        raise ValidationError(
            f"not a valid rotation: |R^T R - I|={ortho:.3e}, det={det:.12f}")
    return R


def log_so2(R, tol: float = ORTHO_TOL) -> float:
    """Principal logarithm, returned as the angle in (-pi, pi]."""
    if isinstance(R, Rotation2):
        return R.angle
    R = check_rotation(R, tol)
    return wrap_angle(math.atan2(R[1, 0], R[0, 0]))


def bounded_angle(omega_raw, theta_max: float):
    """Smoothly squash an unconstrained output into (-theta_max, theta_max)."""
    if not theta_max > 0:
        raise ConfigError(f"theta_max must be positive, got {theta_max}")
    out = theta_max * np.tanh(np.asarray(omega_raw, dtype=np.float64))
    return float(out) if out.ndim == 0 else out


def rel_rotation(Ra: Rotation2, Rb: Rotation2) -> Rotation2:
    """Ra^T Rb."""
    return Rotation2(Rb.angle - Ra.angle)


def angular_diff(Rt: Rotation2, Rs: Rotation2) -> float:
    """Geodesic distance |log(Rt^T Rs)| in [0, pi].

    Computed from the absolute difference of canonical angles so the result
    is bit-for-bit symmetric in its arguments.
    """
    return float(_geodesic(np.float64(Rt.angle), np.float64(Rs.angle)))


def pairwise_angular_diff(angles) -> np.ndarray:
    """Matrix of |wrap(theta_s - theta_t)| for all frame pairs."""
    a = np.asarray(angles, dtype=np.float64)
    _check_finite(a, "angles")
    return _geodesic(a[:, None], a[None, :])


def _geodesic(a, b):
    # canonical angles differ by at most 2*pi, so one reflection suffices
    d = np.remainder(np.abs(b - a), TWO_PI)
    return np.minimum(d, TWO_PI - d)


def _as_rotations(rotations) -> list:
    return [r if isinstance(r, Rotation2) else Rotation2(float(r)) for r in rotations]


def velocity_sequence(rotations: Sequence) -> np.ndarray:
    """Lie-velocity v_t = |log(R_{t-1}^T R_t)| for t = 2..T.

    Accepts Rotation2 instances or raw angles.
    """
    rots = _as_rotations(rotations)
    if len(rots) < 2:
        raise ValueError(f"velocity_sequence needs at least 2 frames, got {len(rots)}")
    return np.array([angular_diff(a, b) for a, b in zip(rots[:-1], rots[1:])])


def velocity_reg(v, beta: float) -> float:
    """(1 - beta) * mean(v) + beta * mean(|v_t - v_{t-1}|)."""
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must lie in [0, 1], got {beta}")
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("velocity sequence is empty")
    smooth = np.abs(np.diff(v)).mean() if v.size > 1 else 0.0
    return float((1.0 - beta) * v.mean() + beta * smooth)


def rotation_reg(angles) -> float:
    """Mean squared angle over frames."""
    a = np.asarray(angles, dtype=np.float64)
    if a.size == 0:
        raise ValueError("angle list is empty")
    return float(np.mean(a * a))
