"""Synthetic rotating rainy clips with known per-frame rotations.

Each clip is built from a procedural base image (multi-octave value noise
plus a horizon-like brightness ramp), rotated in-plane per frame, overlaid
with oriented streaks whose angle drifts with the frame index, and finally
corrupted with Gaussian noise.
"""
from __future__ import annotations

import dataclasses
import io
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import ndimage

from .config import SynthConfig, config_hash
from .errors import BadMagicError, ConfigError, FormatError, VersionError

MAGIC = b"DLVD"
VERSION = 1


@dataclass(frozen=True)
class ClipSample:
    rainy: np.ndarray         # (T, H, W, C) float32 in [0, 1]
    clean_center: np.ndarray  # (H, W, C) float32 in [0, 1]
    true_angles: np.ndarray   # (T,) float64, radians
    streak_angle: float
    seed: int

    def __eq__(self, other):
        if not isinstance(other, ClipSample):
            return NotImplemented
        return (self.seed == other.seed and self.streak_angle == other.streak_angle
                and np.array_equal(self.rainy, other.rainy)
                and np.array_equal(self.clean_center, other.clean_center)
                and np.array_equal(self.true_angles, other.true_angles))

    __hash__ = None


def value_noise(rng, height, width, octaves) -> np.ndarray:
    """Sum of bilinearly upsampled random lattices, rescaled to [0, 1]."""
    img = np.zeros((height, width))
    amp, total = 1.0, 0.0
    for k in range(octaves):
        cells = 2 ** (k + 1)
        lattice = rng.random((cells + 1, cells + 1))
        rr = np.linspace(0, cells, height)
        cc = np.linspace(0, cells, width)
        coords = np.meshgrid(rr, cc, indexing="ij")
        img += amp * ndimage.map_coordinates(lattice, coords, order=1)
        total += amp
        amp *= 0.5
    img /= total
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)


def base_image(rng, cfg: SynthConfig) -> np.ndarray:
    """(H, W, C) scene in [0, 1]; the ramp gives a global orientation cue."""
    H, W = cfg.height, cfg.width
    chans = [value_noise(rng, H, W, cfg.octaves) for _ in range(cfg.channels)]
    y = (np.arange(H) - (H - 1) / 2) / H
    ramp = cfg.horizon_ramp * y[:, None] * np.ones((1, W))
    weight = 1.0 - cfg.horizon_ramp
    img = np.stack([weight * c + ramp + cfg.horizon_ramp / 2 for c in chans], axis=-1)
    return np.clip(img, 0.0, 1.0)


def rotate_image(img: np.ndarray, angle: float) -> np.ndarray:
    """Resample ``img`` so that output pixel ``u`` shows ``img(R(angle) u)``.

    ``u`` is measured from the image centre with x to the right and y down,
    the same convention as the patch coordinate grid, so a token at ``p`` in a
    frame with angle ``a`` sees the scene point ``R(a) p``. Bilinear sampling
    with reflect padding.
    """
    if angle == 0.0:
        return img.copy()
    H, W = img.shape[:2]
    cy, cx = (H - 1) / 2, (W - 1) / 2
    r, c = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    x, y = c - cx, r - cy
    ca, sa = np.cos(angle), np.sin(angle)
    coords = [cy + sa * x + ca * y, cx + ca * x - sa * y]
    return np.stack([ndimage.map_coordinates(img[..., ch], coords, order=1, mode="reflect")
                     for ch in range(img.shape[-1])], axis=-1)


def frame_angles(rng, cfg: SynthConfig) -> np.ndarray:
    T, bound, vmax = cfg.frames, cfg.rotation_bound, cfg.max_angular_velocity
    if cfg.rotation_model == "constant-velocity":
        omega = rng.uniform(-vmax, vmax)
        span = abs(omega) * (T - 1) / 2
        start = rng.uniform(-max(bound - span, 0.0), max(bound - span, 0.0))
        return start + omega * (np.arange(T) - (T - 1) / 2)
    angles = np.empty(T)
    angles[0] = rng.uniform(-bound, bound)
    for t in range(1, T):
        angles[t] = np.clip(angles[t - 1] + rng.normal(0.0, vmax), -bound, bound)
    return angles


def streak_layer(rng, cfg: SynthConfig, angle: float) -> np.ndarray:
    """Additive (H, W) layer of anti-aliased line segments at ``angle`` from vertical."""
    H, W = cfg.height, cfg.width
    count = rng.poisson(cfg.streak_density * H * W / 100.0)
    layer = np.zeros((H, W))
    if count == 0:
        return layer
    r, c = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    d = np.array([np.sin(angle), np.cos(angle)])  # (dx, dy) in (col, row) order
    half = cfg.streak_length / 2
    centres = rng.uniform([0, 0], [W, H], size=(count, 2))
    strengths = rng.uniform(0.5, 1.0, size=count)
    for (cx, cy), s in zip(centres, strengths):
        px, py = c - cx, r - cy
        along = np.clip(px * d[0] + py * d[1], -half, half)
        dist = np.hypot(px - along * d[0], py - along * d[1])
        layer = np.maximum(layer, s * np.clip(1.0 - dist / cfg.streak_width, 0.0, None))
    return layer


def generate_clip(cfg: SynthConfig, seed: int | None = None) -> ClipSample:
    """Deterministically generate one clip for ``seed`` (defaults to ``cfg.seed``)."""
    seed = cfg.seed if seed is None else int(seed)
    if seed < 0:
        raise ConfigError(f"seed must be non-negative, got {seed}")
    rng = np.random.default_rng([seed, 0x444C5644])
    base = base_image(rng, cfg)
    angles = frame_angles(rng, cfg)
    streak_angle = float(rng.uniform(-0.4, 0.4))
    T, c = cfg.frames, cfg.frames // 2
    clean = [rotate_image(base, a) for a in angles]
    rainy = []
    for t in range(T):
        frame = clean[t]
        if cfg.streak_intensity > 0 and cfg.streak_density > 0:
            layer = streak_layer(rng, cfg, streak_angle + cfg.streak_drift * (t - c))
            frame = np.clip(frame + cfg.streak_intensity * layer[..., None], 0.0, 1.0)
        if cfg.noise_sigma > 0:
            frame = np.clip(frame + rng.normal(0.0, cfg.noise_sigma, frame.shape), 0.0, 1.0)
        rainy.append(frame)
    return ClipSample(
        rainy=np.stack(rainy).astype(np.float32),
        clean_center=clean[c].astype(np.float32),
        true_angles=angles.astype(np.float64),
        streak_angle=streak_angle,
        seed=seed,
    )


@lru_cache(maxsize=8192)
def _cached_clip(cfg: SynthConfig, seed: int) -> ClipSample:
    return generate_clip(cfg, seed)


def clip_batch(cfg: SynthConfig, seeds):
    """Stack clips into (B, T, H, W, C) inputs, (B, H, W, C) targets and (B, T) angles."""
    clips = [_cached_clip(cfg, int(s)) for s in seeds]
    return (np.stack([c.rainy for c in clips]), np.stack([c.clean_center for c in clips]),
            np.stack([c.true_angles for c in clips]))


# -- serialization -----------------------------------------------------------

def dumps_clip(sample: ClipSample, cfg: SynthConfig) -> bytes:
    """``DLVD`` layout: magic | u32 version | u32 len + config JSON | i64 seed |
    f64 streak_angle | u32 T,H,W,C | f64 angles[T] | f32 rainy | f32 clean."""
    echo = json.dumps(dataclasses.asdict(cfg), sort_keys=True).encode()
    T, H, W, C = sample.rainy.shape
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(echo)))
    buf.write(echo)
    buf.write(struct.pack("<qd4I", sample.seed, sample.streak_angle, T, H, W, C))
    buf.write(np.ascontiguousarray(sample.true_angles, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(sample.rainy, dtype="<f4").tobytes())
    buf.write(np.ascontiguousarray(sample.clean_center, dtype="<f4").tobytes())
    return buf.getvalue()


def loads_clip(raw: bytes, source="<bytes>"):
    """Inverse of :func:`dumps_clip`; returns ``(ClipSample, config dict)``."""
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{source}: not a dataset clip (magic {raw[:4]!r})")
    try:
        version, n = struct.unpack_from("<II", raw, 4)
        if version != VERSION:
            raise VersionError(f"{source}: unsupported dataset version {version}")
        off = 12
        echo = json.loads(raw[off:off + n].decode())
        off += n
        seed, streak_angle, T, H, W, C = struct.unpack_from("<qd4I", raw, off)
        off += struct.calcsize("<qd4I")
        angles = np.frombuffer(raw, "<f8", T, off).astype(np.float64)
        off += 8 * T
        rainy = np.frombuffer(raw, "<f4", T * H * W * C, off).reshape(T, H, W, C).astype(np.float32)
        off += 4 * rainy.size
        clean = np.frombuffer(raw, "<f4", H * W * C, off).reshape(H, W, C).astype(np.float32)
        off += 4 * clean.size
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{source}: corrupt dataset clip ({exc})") from None
    if off != len(raw):
        raise FormatError(f"{source}: {len(raw) - off} trailing bytes")
    return ClipSample(rainy, clean, angles, float(streak_angle), int(seed)), echo


def write_dataset(out_dir, cfg: SynthConfig, seeds, workers: int = 1) -> Path:
    """Write one ``clip_<seed>.dlvd`` per seed plus ``manifest.json``.

    Clips are independent, so ``workers > 1`` generates them on a thread pool;
    the bytes written do not depend on the worker count.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [int(s) for s in seeds]

    def one(s):
        name = f"clip_{s:08d}.dlvd"
        (out / name).write_bytes(dumps_clip(generate_clip(cfg, s), cfg))
        return name

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            files = list(pool.map(one, seeds))
    else:
        files = [one(s) for s in seeds]
    cfg_dict = dataclasses.asdict(cfg)
    manifest = {"version": VERSION, "config_hash": config_hash(cfg_dict), "config": cfg_dict,
                "seeds": seeds, "files": files}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_dataset(path):
    """Load a dataset directory (or its manifest); returns ``(SynthConfig, [ClipSample])``."""
    path = Path(path)
    manifest_path = path / "manifest.json" if path.is_dir() else path
    manifest = json.loads(manifest_path.read_text())
    cfg = SynthConfig(**manifest["config"])
    clips = []
    for name in manifest["files"]:
        fp = manifest_path.parent / name
        clip, _ = loads_clip(fp.read_bytes(), source=str(fp))
        clips.append(clip)
    return cfg, clips
