"""Spatial / temporal attention biases and their fusion.

Token pairs are indexed frame-major: token ``(t, i)`` sits at row ``t * N + i``.
Frame-level matrices (T x T) are broadcast to token level by replicating each
entry over its N x N block.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import so2
from .coords import CoordGrid, rotate_coords
from .errors import BadMagicError, ConfigError, FormatError, ShapeError, VersionError

MASK_MODES = ("hard", "hadamard")
BLOCKED_LOGIT = -1e9

DUMP_MAGIC = b"DLVB"
DUMP_VERSION = 1


@dataclass(frozen=True)
class BiasParams:
    alpha: float = 1.0
    kappa: float = 1.0
    tau: float = 2.0
    delta: int = 2
    mask_mode: str = "hard"

    def __post_init__(self):
        if not self.kappa > 0:
            raise ConfigError(f"kappa must be positive, got {self.kappa}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.delta < 0 or int(self.delta) != self.delta:
            raise ConfigError(f"delta must be a non-negative integer, got {self.delta}")
        if self.mask_mode not in MASK_MODES:
            raise ConfigError(f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}")


def spatial_bias(rc) -> np.ndarray:
    """Gram matrix of rotated coordinates, shape (T*N, T*N)."""
    rc = np.asarray(rc, dtype=np.float64)
    flat = rc.reshape(-1, 3)
    return flat @ flat.T


def temporal_bias(angles, kappa: float) -> np.ndarray:
    if not kappa > 0:
        raise ConfigError(f"kappa must be positive, got {kappa}")
    return -so2.pairwise_angular_diff(angles) / kappa


def decay_matrix(T: int, tau: float) -> np.ndarray:
    if not tau > 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    idx = np.arange(T)
    return np.exp(-np.abs(idx[:, None] - idx[None, :]) / tau)


def band_mask(T: int, delta: int) -> np.ndarray:
    if delta < 0:
        raise ConfigError(f"delta must be non-negative, got {delta}")
    idx = np.arange(T)
    return (np.abs(idx[:, None] - idx[None, :]) <= delta).astype(np.float64)


def to_tokens(frame_matrix, n_tokens: int) -> np.ndarray:
    """Replicate each frame-pair entry over an N x N token block."""
    return np.kron(frame_matrix, np.ones((n_tokens, n_tokens), dtype=np.asarray(frame_matrix).dtype))


def fuse_total(b_space, b_time, decay, mask, alpha: float, mask_mode: str = "hard"):
    """Combine the components into the token-level bias.

    Returns ``(b_total, blocked)`` where ``b_total = (b_space + alpha*b_time) * D * M``
    at token level and ``blocked`` flags pairs whose logits must be replaced by
    :data:`BLOCKED_LOGIT`. In ``hadamard`` mode nothing is blocked and the mask
    only zeroes the bias.
    """
    T = b_time.shape[0]
    if b_time.shape != (T, T) or decay.shape != (T, T) or mask.shape != (T, T):
        raise ShapeError("fuse_total", b_time.shape, decay.shape, mask.shape)
    if b_space.shape[0] % T or b_space.shape[0] != b_space.shape[1]:
        raise ShapeError("fuse_total", b_space.shape, b_time.shape)
    if mask_mode not in MASK_MODES:
        raise ConfigError(f"mask_mode must be one of {MASK_MODES}, got {mask_mode!r}")
    n = b_space.shape[0] // T
    scale = to_tokens(decay * mask, n)
    b_total = (b_space + alpha * to_tokens(b_time, n)) * scale
    if mask_mode == "hard":
        blocked = to_tokens(mask, n) == 0
    else:
        blocked = np.zeros(b_space.shape, dtype=bool)
    return b_total, blocked


@dataclass
class BiasStack:
    b_space: np.ndarray
    b_time: np.ndarray
    decay: np.ndarray
    mask: np.ndarray
    b_total: np.ndarray
    blocked: np.ndarray
    params: BiasParams = field(default_factory=BiasParams)

    @property
    def T(self) -> int:
        return self.b_time.shape[0]

    @property
    def N(self) -> int:
        return self.b_space.shape[0] // self.T

    def matrices(self) -> dict:
        return {"space": self.b_space, "time": self.b_time, "decay": self.decay,
                "mask": self.mask, "total": self.b_total}

    def summary(self) -> dict:
        out = {}
        for name, m in self.matrices().items():
            out[name] = {"min": float(m.min()), "max": float(m.max()),
                         "symmetry_residual": float(np.abs(m - m.T).max())}
        out["blocked_pairs"] = int(self.blocked.sum())
        return out

    def save(self, path) -> None:
        """Write the five matrices as a ``DLVB`` dump."""
        T, N = self.T, self.N
        with open(path, "wb") as fh:
            fh.write(DUMP_MAGIC)
            fh.write(struct.pack("<III", DUMP_VERSION, T, N))
            for m in self.matrices().values():
                fh.write(np.ascontiguousarray(m, dtype="<f8").tobytes())


def load_dump(path) -> dict:
    """Read a ``DLVB`` dump back into a dict of matrices."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != DUMP_MAGIC:
        raise BadMagicError(f"{path}: expected magic {DUMP_MAGIC!r}, got {raw[:4]!r}")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    version, T, N = struct.unpack_from("<III", raw, 4)
    if version != DUMP_VERSION:
        raise VersionError(f"{path}: unsupported bias dump version {version}")
    TN = T * N
    sizes = {"space": (TN, TN), "time": (T, T), "decay": (T, T), "mask": (T, T), "total": (TN, TN)}
    expected = 16 + 8 * sum(a * b for a, b in sizes.values())
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    out, off = {"T": T, "N": N}, 16
    for name, shape in sizes.items():
        count = shape[0] * shape[1]
        out[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += 8 * count
    return out


def build_bias_stack(grid: CoordGrid, angles, params: BiasParams | None = None) -> BiasStack:
    """Construct every bias component for one clip from its frame angles."""
    params = params or BiasParams()
    angles = np.asarray(angles, dtype=np.float64)
    T = angles.shape[0]
    b_space = spatial_bias(rotate_coords(grid, angles))
    b_time = temporal_bias(angles, params.kappa)
    decay = decay_matrix(T, params.tau)
    mask = band_mask(T, params.delta)
    b_total, blocked = fuse_total(b_space, b_time, decay, mask, params.alpha, params.mask_mode)
    return BiasStack(b_space, b_time, decay, mask, b_total, blocked, params)


def fused_bounds(alpha: float, kappa: float) -> tuple:
    """Range of in-band fused entries."""
    return -(1.0 + alpha * math.pi / kappa), 1.0
