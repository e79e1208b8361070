"""Configuration dataclasses and the TOML run-config file.

A run config has four sections, ``[model]``, ``[bias]``, ``[synth]`` and
``[train]``, whose keys map one-to-one onto the dataclass fields below.
Unknown sections or keys are rejected.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields

import tomli
import tomli_w

from .bias import MASK_MODES, BiasParams
from .errors import ConfigError

ABLATIONS = ("baseline", "space", "time", "full")
ROTATION_MODELS = ("random-walk", "constant-velocity")


@dataclass(frozen=True)
class ModelConfig:
    frames: int = 5
    patch_size: int = 8
    width: int = 64
    heads: int = 4
    layers: int = 4
    theta_max: float = 0.35
    lift_height: float = 1.0
    residual: bool = False
    ablation: str = "full"
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.frames < 1:
            raise ConfigError(f"frames must be >= 1, got {self.frames}")
        if self.patch_size < 1:
            raise ConfigError(f"patch_size must be >= 1, got {self.patch_size}")
        if self.width < 2 or self.heads < 1 or self.width % self.heads:
            raise ConfigError(f"width {self.width} must be divisible by heads {self.heads}")
        if self.layers < 0:
            raise ConfigError(f"layers must be >= 0, got {self.layers}")
        if self.theta_max < 0:
            raise ConfigError(f"theta_max must be >= 0, got {self.theta_max}")
        if not self.lift_height > 0:
            raise ConfigError(f"lift_height must be positive, got {self.lift_height}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")


@dataclass(frozen=True)
class BiasConfig:
    alpha: float = 1.0
    kappa: float = 1.0
    tau: float = 2.0
    delta: int = 2
    mask_mode: str = "hard"

    def __post_init__(self):
        if self.mask_mode not in MASK_MODES:
            raise ConfigError(f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}")
        self.params()

    def params(self) -> BiasParams:
        return BiasParams(self.alpha, self.kappa, self.tau, self.delta, self.mask_mode)


@dataclass(frozen=True)
class SynthConfig:
    height: int = 32
    width: int = 32
    frames: int = 5
    channels: int = 1
    octaves: int = 4
    rotation_model: str = "random-walk"
    max_angular_velocity: float = 0.02
    rotation_bound: float = 0.3
    horizon_ramp: float = 0.4
    streak_density: float = 1.0
    streak_length: float = 10.0
    streak_width: float = 1.0
    streak_intensity: float = 0.5
    streak_drift: float = 0.05
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.height < 4 or self.width < 4:
            raise ConfigError(f"frames must be at least 4x4, got {self.height}x{self.width}")
        if self.frames < 1 or self.channels not in (1, 3) or self.octaves < 1:
            raise ConfigError("frames >= 1, channels in {1, 3} and octaves >= 1 required")
        if self.rotation_model not in ROTATION_MODELS:
            raise ConfigError(f"rotation_model must be one of {ROTATION_MODELS}")
        for name in ("max_angular_velocity", "rotation_bound", "horizon_ramp", "streak_density",
                     "streak_intensity", "noise_sigma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not (self.streak_length > 0 and self.streak_width > 0):
            raise ConfigError("streak_length and streak_width must be positive")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch: int = 8
    lr: float = 2e-4
    lr_min: float = 1e-6
    weight_decay: float = 0.0
    beta: float = 0.5
    lambda_theta: float = 0.02
    lambda_v: float = 0.02
    train_clips: int = 512
    eval_clips: int = 32
    eval_seed_offset: int = 1_000_000
    log_every: int = 50

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1:
            raise ConfigError("steps must be >= 0 and batch >= 1")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        if self.lambda_theta < 0 or self.lambda_v < 0:
            raise ConfigError("regularizer weights must be non-negative")
        if self.train_clips < 1 or self.eval_clips < 1:
            raise ConfigError("train_clips and eval_clips must be >= 1")
        if self.eval_seed_offset < self.train_clips:
            raise ConfigError("eval_seed_offset must exceed train_clips (disjoint seeds)")


SECTIONS = {"model": ModelConfig, "bias": BiasConfig, "synth": SynthConfig, "train": TrainConfig}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    bias: BiasConfig = field(default_factory=BiasConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.model.frames != self.synth.frames:
            raise ConfigError(f"model.frames ({self.model.frames}) != synth.frames ({self.synth.frames})")
        ps = self.model.patch_size
        if self.synth.height % ps or self.synth.width % ps:
            raise ConfigError(f"image {self.synth.height}x{self.synth.width} not divisible by patch {ps}")

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def replace(self, **overrides) -> "RunConfig":
        """Override fields using ``section.key`` names, e.g. ``{"train.steps": 0}``."""
        data = self.to_dict()
        for dotted, value in overrides.items():
            section, _, key = dotted.partition(".")
            if section not in data or key not in data[section]:
                raise ConfigError(f"unknown config key {dotted!r}")
            data[section][key] = value
        return from_dict(data)


def config_hash(data) -> str:
    blob = json.dumps(data, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _coerce(cls, name, value):
    ftype = {f.name: f.type for f in fields(cls)}[name]
    if ftype == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{cls.__name__}.{name} must be an integer, got {value!r}")
    elif ftype == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{cls.__name__}.{name} must be a number, got {value!r}")
        return float(value)
    elif ftype == "bool" and not isinstance(value, bool):
        raise ConfigError(f"{cls.__name__}.{name} must be true or false, got {value!r}")
    elif ftype == "str" and not isinstance(value, str):
        raise ConfigError(f"{cls.__name__}.{name} must be a string, got {value!r}")
    return value


def from_dict(data: dict) -> RunConfig:
    unknown = set(data) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    parts = {}
    for section, cls in SECTIONS.items():
        values = dict(data.get(section, {}))
        known = {f.name for f in fields(cls)}
        bad = set(values) - known
        if bad:
            raise ConfigError(f"unknown key(s) in [{section}]: {sorted(bad)}")
        parts[section] = cls(**{k: _coerce(cls, k, v) for k, v in values.items()})
    return RunConfig(**parts)


def loads(text: str) -> RunConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    return from_dict(data)


def load(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return loads(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def dumps(cfg: RunConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def save(path, cfg: RunConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(cfg))


def reference_doc() -> str:
    """Markdown table of every config key and its default."""
    lines = ["| key | default |", "| --- | --- |"]
    for section, cls in SECTIONS.items():
        for f in fields(cls):
            lines.append(f"| `{section}.{f.name}` | `{f.default!r}` |")
    return "\n".join(lines) + "\n"
