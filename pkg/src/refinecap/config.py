"""Run configuration: model, data, training and decoding knobs.

Config files are flat JSON objects with dotted keys (``"model.D": 32``).
Unknown keys are rejected before any work starts.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    D_raw: int = 64
    D: int = 32
    D_prime: int = 32
    K: int = 32
    M: int = 8
    N_enc: int = 2
    N_dec: int = 2
    heads: int = 4
    ffn_width: int = 64
    T_max: int = 20
    dropout_rate: float = 0.1
    refinement_enabled: bool = True
    ln_eps: float = 1e-5

    def validate(self) -> None:
        for name in ("D_raw", "D", "D_prime", "K", "M", "heads", "ffn_width", "T_max"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"model.{name} must be positive")
        if self.N_enc < 0 or self.N_dec < 1:
            raise ConfigError("model.N_enc must be >= 0 and model.N_dec >= 1")
        if self.K % self.M:
            raise ConfigError(f"model.K={self.K} must be divisible by model.M={self.M}")
        if self.D % self.heads:
            raise ConfigError(f"model.D={self.D} must be divisible by model.heads={self.heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("model.dropout_rate must lie in [0, 1)")


@dataclass
class DataConfig:
    n_scenes: int = 500
    max_objects: int = 3
    noise: float = 0.05
    train_frac: float = 0.8
    val_frac: float = 0.1
    min_count: int = 1

    def validate(self) -> None:
        if self.n_scenes < 1:
            raise ConfigError("data.n_scenes must be >= 1")
        if self.max_objects < 1:
            raise ConfigError("data.max_objects must be >= 1")
        if not (0 < self.train_frac <= 1 and 0 <= self.val_frac and self.train_frac + self.val_frac <= 1):
            raise ConfigError("data split fractions must be in [0,1] and sum to <= 1")


@dataclass
class TrainConfig:
    batch_size: int = 50
    patience: int = 5
    tag_pretrain_epochs: int = 0
    mle_epochs: int = 30
    rl_epochs: int = 10
    lr_tag: float = 1e-4
    lr_mle: float = 1e-4
    lr_rl: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    expand_references: bool = False
    dtype: str = "float32"

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.patience < 1:
            raise ConfigError("train.patience must be >= 1")
        if min(self.tag_pretrain_epochs, self.mle_epochs, self.rl_epochs) < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("train.dtype must be float32 or float64")


@dataclass
class DecodeConfig:
    beam: int = 5
    length_normalization: bool = False

    def validate(self) -> None:
        if self.beam < 1:
            raise ConfigError("decode.beam must be >= 1")


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)

    def validate(self) -> "RunConfig":
        if self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        for section in (self.model, self.data, self.train, self.decode):
            section.validate()
        return self

    def to_flat(self) -> dict[str, Any]:
        flat: dict[str, Any] = {"seed": self.seed}
        for section in ("model", "data", "train", "decode"):
            for k, v in dataclasses.asdict(getattr(self, section)).items():
                flat[f"{section}.{k}"] = v
        return flat

    def update(self, flat: dict[str, Any]) -> "RunConfig":
        for key, value in flat.items():
            if key == "seed":
                self.seed = _coerce("seed", value, int)
                continue
            section, _, name = key.partition(".")
            target = getattr(self, section, None) if section in ("model", "data", "train", "decode") else None
            if target is None or name not in {f.name for f in dataclasses.fields(target)}:
                raise ConfigError(f"unknown config key {key!r}")
            kind = {f.name: f.type for f in dataclasses.fields(target)}[name]
            setattr(target, name, _coerce(key, value, _TYPES[kind]))
        return self

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_flat(), indent=2, sort_keys=True) + "\n")


_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def _coerce(key: str, value: Any, kind: type) -> Any:
    if kind is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


# Desk-scale defaults are the dataclass defaults; the toy preset adds learning
# rates that converge on the synthetic corpus within the epoch budget.
PRESETS: dict[str, dict[str, Any]] = {
    "toy": {
        "train.batch_size": 10,
        "train.lr_tag": 1e-3,
        "train.lr_mle": 2e-3,
        "train.lr_rl": 1e-4,
    },
    "full": {
        "model.D_raw": 2048,
        "model.D": 512,
        "model.D_prime": 512,
        "model.K": 1000,
        "model.M": 50,
        "model.N_enc": 3,
        "model.N_dec": 3,
        "model.heads": 8,
        "model.ffn_width": 2048,
        "model.T_max": 20,
        "model.dropout_rate": 0.1,
        "data.min_count": 5,
        "train.batch_size": 50,
        "train.patience": 5,
        "decode.beam": 5,
    },
}


def resolve_config(
    preset: str | None = None,
    config_path: str | Path | None = None,
    overrides: dict[str, Any] | None = None,
) -> RunConfig:
    """Defaults, then preset, then config file, then explicit overrides."""
    cfg = RunConfig()
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        cfg.update(PRESETS[preset])
    if config_path is not None:
        try:
            raw = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a flat JSON object")
        cfg.update(raw)
    if overrides:
        cfg.update(overrides)
    return cfg.validate()
