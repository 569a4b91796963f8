"""Flat ``key = value`` run configuration covering model, training and sampling.

Keys are the field names of :class:`ModelConfig` and :class:`TrainConfig`;
sampler fields use the keys in :data:`SAMPLER_KEYS`. Unknown keys are errors.
Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .diffusion import SamplerConfig
from .model import ConfigError, ModelConfig


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-4
    lr_schedule: str = "cosine"
    ema_decay: float = 0.9999
    cond_dropout_p: float = 0.1
    grad_clip: float = 0.0
    weight_decay: float = 0.0
    lambda_vlb: float = 1e-3
    seed: int = 0
    dataset: str = "two-gaussians-8x8"
    dataset_size: int = 2048
    flip: bool = False
    diffusion_steps: int = 1000
    beta_1: float = 1e-4
    beta_T: float = 2e-2
    ckpt_every: int = 500
    smooth_window: int = 100
    log_wall_time: bool = False

    def __post_init__(self) -> None:
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError("lr_schedule must be cosine or constant")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError("ema_decay must be in [0, 1]")
        if not 0.0 <= self.cond_dropout_p <= 1.0:
            raise ConfigError("cond_dropout_p must be in [0, 1]")
        if self.grad_clip < 0 or self.weight_decay < 0 or self.lambda_vlb < 0:
            raise ConfigError("grad_clip, weight_decay and lambda_vlb must be >= 0")
        if self.ckpt_every < 1 or self.smooth_window < 1:
            raise ConfigError("ckpt_every and smooth_window must be positive")


# run-config key -> SamplerConfig field
SAMPLER_KEYS = {
    "sample_steps": "num_steps",
    "guidance_scale": "guidance_scale",
    "sample_seed": "seed",
    "clip_range": "clip_range",
}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def replace(self, **changes: Any) -> "RunConfig":
        """Override individual keys (same names as in the file)."""
        return from_mapping({**to_mapping(self), **changes})


def _owners() -> dict[str, tuple[str, str]]:
    out: dict[str, tuple[str, str]] = {}
    for f in fields(ModelConfig):
        out[f.name] = ("model", f.name)
    for f in fields(TrainConfig):
        out[f.name] = ("train", f.name)
    for key, name in SAMPLER_KEYS.items():
        out[key] = ("sampler", name)
    return out


_KEYS = _owners()


def _parse_value(raw: str, default: Any, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float) or default is None:
            return None if raw.lower() in ("none", "") else float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _format_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def to_mapping(cfg: RunConfig) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, (part, name) in _KEYS.items():
        out[key] = getattr(getattr(cfg, part), name)
    return out


def from_mapping(values: dict[str, Any]) -> RunConfig:
    parts: dict[str, dict[str, Any]] = {"model": {}, "train": {}, "sampler": {}}
    defaults = to_mapping(RunConfig())
    for key, value in values.items():
        if key not in _KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str) and not isinstance(defaults[key], str):
            value = _parse_value(value, defaults[key], key)
        part, name = _KEYS[key]
        parts[part][name] = value
    try:
        return RunConfig(ModelConfig(**parts["model"]), TrainConfig(**parts["train"]),
                         SamplerConfig(**parts["sampler"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def parse(text: str) -> RunConfig:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = raw
    return from_mapping(values)


def emit(cfg: RunConfig) -> str:
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in to_mapping(cfg).items())


def load(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse(text)


def model_config_text(cfg: ModelConfig) -> str:
    return "".join(f"{f.name} = {_format_value(getattr(cfg, f.name))}\n" for f in fields(cfg))


def parse_model_config(text: str) -> ModelConfig:
    defaults = dataclasses.asdict(ModelConfig())
    values = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"unknown model key {key!r}")
        values[key] = raw if isinstance(defaults[key], str) else _parse_value(raw, defaults[key], key)
    return ModelConfig(**values)
