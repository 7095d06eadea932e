"""Training configuration and the plain-text ``key=value`` config file schema.

Defaults follow the reference recipe where one exists (temperature 0.07,
initial lr 0.03, SGD momentum 0.9, weight decay 1e-4, stride tau=8, tempo
ratio alpha=2, taps res3/res4/res5) and desk-scale stand-ins elsewhere
(batch 32 instead of 256, 50 epochs instead of 200, negatives clamped to
n-1). Unknown keys are rejected by name; so are constraint violations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, replace
from pathlib import Path

from .encoder import STAGE_NAMES
from .errors import ConfigError

KNOWN_TAP_SETS = {
    1: ("res5",),
    2: ("res4", "res5"),
    3: ("res3", "res4", "res5"),
}


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.03
    batch_size: int = 32
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 50
    temperature: float = 0.07
    alpha: int = 2
    tau: int = 8
    taps: tuple[str, ...] = ("res3", "res4", "res5")
    bank_momentum: float = 0.5
    num_negatives: int | None = None  # None: min(16384, n-1)
    embed_dim: int = 128
    stage_channels: tuple[int, int, int, int] = (8, 16, 32, 64)
    fast_width_mult: float = 0.5
    level_weights: tuple[float, ...] | None = None  # aligned with taps; None: all 1.0
    seed: int = 0
    deterministic: bool = True
    checkpoint_every: int = 1  # epochs between checkpoint files

    def validate(self) -> None:
        for key in ("lr0", "batch_size", "sgd_momentum", "temperature", "alpha", "tau", "embed_dim", "fast_width_mult", "checkpoint_every"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0.0 <= self.bank_momentum <= 1.0:
            raise ConfigError(f"bank_momentum must be in [0, 1], got {self.bank_momentum}")
        if 64 % self.tau != 0:
            raise ConfigError(f"tau must divide 64, got tau={self.tau}")
        if self.tau % self.alpha != 0:
            raise ConfigError(f"alpha must divide tau, got alpha={self.alpha} tau={self.tau}")
        if not self.taps or any(t not in STAGE_NAMES for t in self.taps):
            raise ConfigError(f"taps must be a non-empty subset of {STAGE_NAMES}, got {self.taps}")
        if self.num_negatives is not None and self.num_negatives < 1:
            raise ConfigError(f"num_negatives must be >= 1, got {self.num_negatives}")
        if self.level_weights is not None:
            if len(self.level_weights) != len(self.taps):
                raise ConfigError("level_weights must align with taps")
            if any(w < 0 for w in self.level_weights):
                raise ConfigError("level weights must be >= 0")
        if len(self.stage_channels) != 4 or any(c < 1 for c in self.stage_channels):
            raise ConfigError(f"stage_channels must be 4 positive ints, got {self.stage_channels}")

    def level_weight_map(self) -> dict[str, float] | None:
        if self.level_weights is None:
            return None
        return dict(zip(self.taps, self.level_weights))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @staticmethod
    def from_dict(raw: dict) -> "TrainConfig":
        kwargs = dict(raw)
        for key in ("taps", "stage_channels"):
            if key in kwargs and kwargs[key] is not None:
                kwargs[key] = tuple(kwargs[key])
        if kwargs.get("level_weights") is not None:
            kwargs["level_weights"] = tuple(kwargs["level_weights"])
        cfg = TrainConfig(**kwargs)
        cfg.validate()
        return cfg


def with_depth(config: TrainConfig, depth: int) -> TrainConfig:
    """Config variant using the standard tap set of the given depth."""
    if depth not in KNOWN_TAP_SETS:
        raise ConfigError(f"depth must be one of {sorted(KNOWN_TAP_SETS)}, got {depth}")
    cfg = replace(config, taps=KNOWN_TAP_SETS[depth], level_weights=None)
    cfg.validate()
    return cfg


_PARSERS = {
    "lr0": float,
    "batch_size": int,
    "sgd_momentum": float,
    "weight_decay": float,
    "epochs": int,
    "temperature": float,
    "alpha": int,
    "tau": int,
    "bank_momentum": float,
    "num_negatives": int,
    "embed_dim": int,
    "fast_width_mult": float,
    "seed": int,
    "checkpoint_every": int,
}


def _parse_bool(value: str, key: str) -> bool:
    low = value.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}")


def parse_config_text(text: str) -> TrainConfig:
    """Parse ``key=value`` lines into a TrainConfig; an empty file is all defaults."""
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {stripped!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.strip()
        if key in _PARSERS:
            try:
                values[key] = _PARSERS[key](value)
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
        elif key == "taps":
            values[key] = tuple(t.strip() for t in value.split(",") if t.strip())
        elif key == "stage_channels":
            values[key] = tuple(int(c) for c in value.split(","))
        elif key == "level_weights":
            values[key] = tuple(float(w) for w in value.split(","))
        elif key == "deterministic":
            values[key] = _parse_bool(value, key)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    cfg = TrainConfig(**values)
    cfg.validate()
    return cfg


def parse_config(path: str | Path) -> TrainConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    return parse_config_text(path.read_text())
