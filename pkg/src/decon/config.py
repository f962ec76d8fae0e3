"""Experiment configuration, presets and JSON (de)serialization."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Literal

DecoderKind = Literal["none", "fcn", "fpn"]
ObjectiveKind = Literal["dense_pair", "prototype"]

DECODER_KINDS = ("none", "fcn", "fpn")
OBJECTIVE_KINDS = ("dense_pair", "prototype")
PRESET_NAMES = ("baseline", "decon-sl", "decon-ml-s", "decon-ml-l")

# toy scale: 4 encoder stages, one decoder width shared by every decoder level
ENCODER_WIDTHS = (32, 64, 128, 256)
DECODER_WIDTH = 64


class ConfigError(ValueError):
    """Raised when a configuration violates a range or consistency rule."""


@dataclass(frozen=True)
class ExperimentConfig:
    alpha: float = 1.0
    dropout_p: float = 0.0
    decoder_kind: str = "none"
    decoder_levels: int = 1
    objective_kind: str = "dense_pair"
    prototypes_enc: int = 64
    prototypes_dec: int = 64
    temp_student: float = 0.1
    temp_teacher: float = 0.07
    proj_hidden: int = 128
    proj_out: int = 32
    ema_m0: float = 0.99
    center_momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 32
    image_size: int = 64
    lr: float = 0.05
    weight_decay: float = 1e-5
    seed: int = 0

    def replace(self, **changes: Any) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {}
        for name, value in data.items():
            kwargs[name] = _coerce(name, known[name].type, value)
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config JSON must be an object")
        return cls.from_dict(data)

    def config_hash(self) -> str:
        """Stable digest of the canonical JSON rendering."""
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def _coerce(name: str, annotation: str, value: Any) -> Any:
    if annotation == "int":
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{name} must be an integer, got {value!r}")
        return int(value)
    if annotation == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number, got {value!r}")
        return float(value)
    if annotation == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{name} must be a string, got {value!r}")
        return value
    return value


def _check(cond: bool, field: str, message: str) -> None:
    if not cond:
        raise ConfigError(f"{field}: {message}")


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """Check every invariant; returns the (possibly normalized) config.

    The only normalization is ``decoder_levels`` being pinned to 1 for the
    single-level FCN decoder.
    """
    _check(0.0 <= cfg.alpha <= 1.0, "alpha", f"must lie in [0, 1], got {cfg.alpha}")
    _check(0.0 <= cfg.dropout_p < 1.0, "dropout_p", f"must lie in [0, 1), got {cfg.dropout_p}")
    _check(cfg.decoder_kind in DECODER_KINDS, "decoder_kind",
           f"must be one of {DECODER_KINDS}, got {cfg.decoder_kind!r}")
    _check(1 <= cfg.decoder_levels <= 4, "decoder_levels",
           f"must lie in 1..4, got {cfg.decoder_levels}")
    _check(cfg.objective_kind in OBJECTIVE_KINDS, "objective_kind",
           f"must be one of {OBJECTIVE_KINDS}, got {cfg.objective_kind!r}")
    if cfg.decoder_kind == "none":
        _check(cfg.alpha == 1.0, "alpha", "decoder_kind=none requires alpha=1")
    for name in ("prototypes_enc", "prototypes_dec", "epochs", "batch_size", "image_size"):
        _check(getattr(cfg, name) >= 1, name, "must be a positive integer")
    if cfg.objective_kind == "prototype":
        _check(cfg.prototypes_enc >= 2, "prototypes_enc", "prototype objective needs at least 2")
        _check(cfg.prototypes_dec >= 2, "prototypes_dec", "prototype objective needs at least 2")
    _check(cfg.temp_student > 0, "temp_student", "must be positive")
    _check(cfg.temp_teacher > 0, "temp_teacher", "must be positive")
    _check(cfg.proj_out >= 1, "proj_out", "must be >= 1")
    _check(cfg.proj_hidden >= cfg.proj_out, "proj_hidden", "must be >= proj_out")
    _check(0.0 <= cfg.ema_m0 < 1.0, "ema_m0", "must lie in [0, 1)")
    _check(0.0 <= cfg.center_momentum < 1.0, "center_momentum", "must lie in [0, 1)")
    _check(cfg.image_size % 16 == 0, "image_size", "must be divisible by 16")
    _check(cfg.lr >= 0, "lr", "must be nonnegative")
    _check(cfg.weight_decay >= 0, "weight_decay", "must be nonnegative")
    _check(0 <= cfg.seed < 2**64, "seed", "must be a 64-bit unsigned integer")
    if cfg.decoder_kind == "fcn" and cfg.decoder_levels != 1:
        cfg = cfg.replace(decoder_levels=1)
    return cfg


_PRESETS: dict[str, dict[str, Any]] = {
    "baseline": dict(decoder_kind="none", alpha=1.0, dropout_p=0.0, decoder_levels=1),
    "decon-sl": dict(decoder_kind="fcn", alpha=0.25, dropout_p=0.0, decoder_levels=1),
    "decon-ml-l": dict(decoder_kind="fpn", alpha=0.0, dropout_p=0.5, decoder_levels=4,
                       proj_hidden=128),
    "decon-ml-s": dict(decoder_kind="fpn", alpha=0.0, dropout_p=0.5, decoder_levels=2,
                       proj_hidden=64),
}


def preset(name: str) -> ExperimentConfig:
    try:
        values = _PRESETS[name]
    except KeyError:
        raise ConfigError(
            f"unknown preset {name!r}; valid presets: {', '.join(PRESET_NAMES)}"
        ) from None
    return ExperimentConfig(**values)


def load_config(path: str | Path) -> ExperimentConfig:
    return ExperimentConfig.from_json(Path(path).read_text())


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(cfg.to_json() + "\n")
