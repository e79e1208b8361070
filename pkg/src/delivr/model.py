"""Patch transformer whose attention logits carry the rotation-aware bias.

Forward pass for a batch of clips ``(B, T, H, W, C)``:

1. non-overlapping patches are flattened and linearly embedded,
2. the SO(2) head pools each frame's tokens and predicts a bounded angle,
3. the angles rotate the unit-sphere patch coordinates and produce the
   spatial, temporal and fused token-level biases (differentiably),
4. ``layers`` pre-norm transformer blocks consume the same bias,
5. the centre frame's tokens are projected back to pixels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import engine as E
from .bias import BLOCKED_LOGIT, band_mask, decay_matrix, to_tokens
from .config import BiasConfig, ModelConfig
from .coords import build_grid
from .engine import Tensor
from .errors import ConfigError, ShapeError


def patchify(frames: np.ndarray, ps: int) -> np.ndarray:
    """(B, T, H, W, C) -> (B, T*N, ps*ps*C), tokens frame-major then row-major."""
    B, T, H, W, C = frames.shape
    if H % ps or W % ps:
        raise ConfigError(f"frame {H}x{W} not divisible by patch size {ps}")
    hp, wp = H // ps, W // ps
    x = frames.reshape(B, T, hp, ps, wp, ps, C).transpose(0, 1, 2, 4, 3, 5, 6)
    return x.reshape(B, T * hp * wp, ps * ps * C)


def unpatchify(patches: Tensor, hp: int, wp: int, ps: int, C: int) -> Tensor:
    """(B, N, ps*ps*C) -> (B, H, W, C); inverse of :func:`patchify` for one frame."""
    B = patches.shape[0]
    x = patches.reshape(B, hp, wp, ps, ps, C)
    x = E.transpose(x, (0, 1, 3, 2, 4, 5))
    return x.reshape(B, hp * ps, wp * ps, C)


@dataclass
class ForwardResult:
    frame: Tensor              # (B, H, W, C)
    omega: Tensor              # (B, T) raw head outputs
    angles: Tensor             # (B, T) bounded angles
    velocities: Tensor         # (B, T-1)
    b_total: Tensor | None     # (B, T*N, T*N)
    blocked: np.ndarray | None  # (T*N, T*N) bool


class DelivrModel:
    """Parameters live in ``self.params`` (name -> leaf Tensor), in a fixed order."""

    def __init__(self, cfg: ModelConfig, bias: BiasConfig, image_shape, seed: int | None = None):
        self.cfg = cfg
        self.bias = bias
        H, W, C = image_shape
        ps = cfg.patch_size
        if H % ps or W % ps:
            raise ConfigError(f"image {H}x{W} not divisible by patch size {ps}")
        self.image_shape = (H, W, C)
        self.grid_shape = (H // ps, W // ps)
        self.n_tokens = self.grid_shape[0] * self.grid_shape[1]
        self.dtype = np.dtype(cfg.dtype)
        self.grid = build_grid(self.grid_shape, cfg.lift_height)
        self.params = init_params(cfg, ps * ps * C, cfg.seed if seed is None else seed, self.dtype)
        self._frame_consts = {}

    # -- bookkeeping --------------------------------------------------------

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ShapeError("load_state_dict", (len(missing),), (len(extra),))
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ShapeError(f"load_state_dict[{k}]", p.shape, arr.shape)
            p.data = arr.astype(self.dtype)

    def _p(self, name) -> Tensor:
        return self.params[name]

    # -- components ---------------------------------------------------------

    def patch_embed(self, clips) -> Tensor:
        clips = np.asarray(clips, dtype=self.dtype)
        if clips.ndim == 4:
            clips = clips[None]
        if clips.shape[2:] != self.image_shape:
            raise ShapeError("patch_embed", clips.shape[2:], self.image_shape)
        x = Tensor(patchify(clips, self.cfg.patch_size))
        return E.linear(x, self._p("embed.w"), self._p("embed.b"))

    def so2_head(self, tokens: Tensor, T: int):
        """Per-frame mean pool -> MLP -> omega; returns ``(omega, angles)``, each (B, T)."""
        B, d = tokens.shape[0], tokens.shape[-1]
        pooled = tokens.reshape(B, T, self.n_tokens, d).mean(axis=2)
        h = E.relu(E.linear(pooled, self._p("head.w1"), self._p("head.b1")))
        omega = E.linear(h, self._p("head.w2"), self._p("head.b2")).reshape(B, T)
        return omega, self.bound(omega)

    def bound(self, omega: Tensor) -> Tensor:
        if self.cfg.theta_max == 0:
            return Tensor(np.zeros(omega.shape, dtype=self.dtype))
        return E.tanh(omega) * self.cfg.theta_max

    def rotated_coords(self, angles: Tensor) -> Tensor:
        """(B, T) angles -> (B, T*N, 3) rotated unit coordinates."""
        B, T = angles.shape
        pts = self.grid.points.astype(self.dtype)
        x, y, z = (Tensor(pts[:, k]) for k in range(3))
        c = E.cos(angles).reshape(B, T, 1)
        s = E.sin(angles).reshape(B, T, 1)
        xr = x * c - y * s
        yr = x * s + y * c
        zr = Tensor(np.broadcast_to(pts[:, 2], (B, T, self.n_tokens)).astype(self.dtype))
        rc = E.stack([xr, yr, zr], axis=-1)
        return rc.reshape(B, T * self.n_tokens, 3)

    def spatial_bias(self, angles: Tensor) -> Tensor:
        rc = self.rotated_coords(angles)
        return rc @ rc.T

    def temporal_bias(self, angles: Tensor) -> Tensor:
        """(B, T, T) matrix of -|wrap(theta_s - theta_t)| / kappa."""
        B, T = angles.shape
        diff = angles.reshape(B, 1, T) - angles.reshape(B, T, 1)
        return E.abs_(E.wrap_angle(diff)) * (-1.0 / self.bias.kappa)

    def _frame_constants(self, T):
        if T not in self._frame_consts:
            N = self.n_tokens
            decay = decay_matrix(T, self.bias.tau)
            mask = band_mask(T, self.bias.delta)
            scale = to_tokens(decay * mask, N).astype(self.dtype)
            blocked = to_tokens(mask, N) == 0 if self.bias.mask_mode == "hard" else None
            if blocked is not None and not blocked.any():
                blocked = None
            self._frame_consts[T] = (scale, blocked)
        return self._frame_consts[T]

    def total_bias(self, angles: Tensor):
        """Fused token-level bias for the configured ablation; ``(None, None)`` for the baseline."""
        mode = self.cfg.ablation
        if mode == "baseline":
            return None, None
        B, T = angles.shape
        N = self.n_tokens
        total = self.spatial_bias(angles)
        if mode in ("time", "full"):
            bt = self.temporal_bias(angles).reshape(B, T, 1, T, 1)
            bt = (bt * Tensor(np.ones((1, 1, N, 1, N), dtype=self.dtype))).reshape(B, T * N, T * N)
            total = total + bt * self.bias.alpha
        if mode != "full":
            return total, None
        scale, blocked = self._frame_constants(T)
        return total * Tensor(scale), blocked

    def biased_attention(self, x: Tensor, b_total: Tensor | None, blocked, prefix: str) -> Tensor:
        B, L, d = x.shape
        h = self.cfg.heads
        dh = d // h
        if b_total is not None and b_total.shape[-2:] != (L, L):
            raise ShapeError("biased_attention", b_total.shape, (L, L))
        if blocked is not None and blocked.shape != (L, L):
            raise ShapeError("biased_attention", blocked.shape, (L, L))

        def split(t):
            return E.transpose(t.reshape(B, L, h, dh), (0, 2, 1, 3))

        q = split(E.linear(x, self._p(prefix + "wq"), self._p(prefix + "bq")))
        k = split(E.linear(x, self._p(prefix + "wk"), self._p(prefix + "bk")))
        v = split(E.linear(x, self._p(prefix + "wv"), self._p(prefix + "bv")))
        logits = (q @ k.T) * (1.0 / math.sqrt(dh))
        if b_total is not None:
            logits = logits + b_total.reshape(B, 1, L, L)
        if blocked is not None:
            logits = E.masked_fill(logits, np.broadcast_to(blocked, logits.shape), BLOCKED_LOGIT)
        attn = E.softmax(logits)
        out = E.transpose(attn @ v, (0, 2, 1, 3)).reshape(B, L, d)
        return E.linear(out, self._p(prefix + "wo"), self._p(prefix + "bo"))

    def transformer_block(self, x: Tensor, b_total, blocked, layer: int) -> Tensor:
        pre = f"blocks.{layer}."
        hn = E.layer_norm(x, self._p(pre + "ln1.g"), self._p(pre + "ln1.b"))
        x = x + self.biased_attention(hn, b_total, blocked, pre + "attn.")
        hn = E.layer_norm(x, self._p(pre + "ln2.g"), self._p(pre + "ln2.b"))
        ff = E.relu(E.linear(hn, self._p(pre + "ffn.w1"), self._p(pre + "ffn.b1")))
        return x + E.linear(ff, self._p(pre + "ffn.w2"), self._p(pre + "ffn.b2"))

    def decode_center(self, tokens: Tensor, T: int) -> Tensor:
        if T % 2 == 0:
            raise ConfigError(f"centre frame undefined for an even window (T={T})")
        B, d = tokens.shape[0], tokens.shape[-1]
        N, c = self.n_tokens, T // 2
        centre = tokens.reshape(B, T, N, d)[:, c]
        patches = E.linear(centre, self._p("decode.w"), self._p("decode.b"))
        H, W, C = self.image_shape
        return unpatchify(patches, *self.grid_shape, self.cfg.patch_size, C)

    # -- full pass ----------------------------------------------------------

    def forward(self, clips, omega_override: Tensor | None = None,
                bias_offset: float = 0.0) -> ForwardResult:
        """Run the whole pipeline.

        ``omega_override`` replaces the head output (e.g. to force common
        angles); ``bias_offset`` adds a constant to every fused-bias entry.
        """
        clips = np.asarray(clips)
        if clips.ndim == 4:
            clips = clips[None]
        T = clips.shape[1]
        if T != self.cfg.frames:
            raise ShapeError("forward", clips.shape, (self.cfg.frames,))
        tokens = self.patch_embed(clips)
        omega, angles = self.so2_head(tokens, T)
        if omega_override is not None:
            omega = E.as_tensor(omega_override)
            if omega.shape != angles.shape:
                raise ShapeError("omega_override", omega.shape, angles.shape)
            angles = self.bound(omega)
        b_total, blocked = self.total_bias(angles)
        if bias_offset:
            if b_total is None:
                L = T * self.n_tokens
                b_total = Tensor(np.zeros((clips.shape[0], L, L), dtype=self.dtype))
            b_total = b_total + bias_offset
        for layer in range(self.cfg.layers):
            tokens = self.transformer_block(tokens, b_total, blocked, layer)
        frame = self.decode_center(tokens, T)
        if self.cfg.residual:
            frame = frame + Tensor(clips[:, T // 2].astype(self.dtype))
        return ForwardResult(frame, omega, angles, lie_velocities(angles), b_total, blocked)

    __call__ = forward


def lie_velocities(angles: Tensor) -> Tensor:
    """(B, T) -> (B, T-1) with entries |wrap(theta_t - theta_{t-1})|; empty for T = 1."""
    B, T = angles.shape
    if T < 2:
        return Tensor(np.zeros((B, 0), dtype=angles.dtype))
    return E.abs_(E.wrap_angle(angles[:, 1:] - angles[:, :-1]))


QK_INIT_SCALE = 0.1


def init_params(cfg: ModelConfig, patch_dim: int, seed: int, dtype) -> dict:
    rng = np.random.default_rng([seed, 0x4D4F44])
    d = cfg.width
    params = {}

    # zero column sums: a flat patch embeds to zero at init, so pooled head
    # features start free of the brightness offset that otherwise kills its relus
    w = rng.normal(0.0, 1.0 / math.sqrt(patch_dim), (patch_dim, d))
    params["embed.w"] = w - w.mean(axis=0, keepdims=True)
    params["embed.b"] = np.zeros(d)
    params["head.w1"] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, d // 2))
    params["head.b1"] = np.zeros(d // 2)
    params["head.w2"] = np.zeros((d // 2, 1))
    params["head.b2"] = np.zeros(1)
    for layer in range(cfg.layers):
        pre = f"blocks.{layer}."
        params[pre + "ln1.g"] = np.ones(d)
        params[pre + "ln1.b"] = np.zeros(d)
        for m in ("q", "k", "v", "o"):
            # small query/key weights leave initial logits to the structural bias
            scale = QK_INIT_SCALE if m in "qk" else 1.0
            params[pre + f"attn.w{m}"] = rng.normal(0.0, scale / math.sqrt(d), (d, d))
            params[pre + f"attn.b{m}"] = np.zeros(d)
        params[pre + "ln2.g"] = np.ones(d)
        params[pre + "ln2.b"] = np.zeros(d)
        params[pre + "ffn.w1"] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, 4 * d))
        params[pre + "ffn.b1"] = np.zeros(4 * d)
        params[pre + "ffn.w2"] = rng.normal(0.0, 1.0 / math.sqrt(4 * d), (4 * d, d))
        params[pre + "ffn.b2"] = np.zeros(d)
    # zero decoder: the first output is decode.b (or the skip), not an
    # amplified copy of the residual stream
    params["decode.w"] = np.zeros((d, patch_dim))
    params["decode.b"] = np.zeros(patch_dim)
    return {k: Tensor(v.astype(dtype), requires_grad=True) for k, v in params.items()}
