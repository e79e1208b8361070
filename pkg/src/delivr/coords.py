"""Unit-sphere coordinates for patch tokens and their per-frame z-rotations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class CoordGrid:
    points: np.ndarray  # (N, 3), unit rows, row-major over the patch grid
    grid_shape: tuple
    lift_height: float

    @property
    def n_tokens(self) -> int:
        return self.points.shape[0]


def build_grid(grid_shape, lift_height: float = 1.0) -> CoordGrid:
    """Lift patch centres of an ``(H_p, W_p)`` grid onto the unit sphere.

    Centres are placed in [-1, 1]^2, raised to height ``lift_height`` and
    normalised, so the z-axis is orthogonal to the image plane.
    """
    hp, wp = (int(s) for s in grid_shape)
    if hp < 1 or wp < 1:
        raise ConfigError(f"grid must be at least 1x1, got {grid_shape}")
    if not lift_height > 0:
        raise ConfigError(f"lift_height must be positive, got {lift_height}")
    r, c = np.meshgrid(np.arange(hp), np.arange(wp), indexing="ij")
    x = (2 * c + 1) / wp - 1.0
    y = (2 * r + 1) / hp - 1.0
    pts = np.stack([x.ravel(), y.ravel(), np.full(hp * wp, float(lift_height))], axis=1)
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    pts.setflags(write=False)
    return CoordGrid(points=pts, grid_shape=(hp, wp), lift_height=float(lift_height))


def rotate_coords(grid: CoordGrid, angles) -> np.ndarray:
    """Rotate every grid point about z by each frame angle; returns (T, N, 3)."""
    a = np.asarray(angles, dtype=np.float64).reshape(-1, 1)
    c, s = np.cos(a), np.sin(a)
    x, y, z = grid.points.T
    return np.stack([x * c - y * s, x * s + y * c, np.broadcast_to(z, c.shape[:1] + z.shape)],
                    axis=-1)
