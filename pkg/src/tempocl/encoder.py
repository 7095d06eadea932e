"""Width-configurable 3D-convolutional video encoders with multi-depth taps.

The encoder is a four-stage convnet (stages named res2..res5). Every stage
halves the spatial resolution and keeps the temporal length, so a 64x64 input
yields 32/16/8/4 px activations at res2/res3/res4/res5. Any ordered subset of
stages can be tapped; each tap exposes the pre-pool activation map and its
global average pool.

Replicate padding is used on every convolution. Besides avoiding dark borders,
it makes the temporal behaviour exact: an input that is constant along time
produces activations that are constant along time, for any kernel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ShapeError

STAGE_NAMES = ("res2", "res3", "res4", "res5")


@dataclass(frozen=True)
class EncoderConfig:
    stage_channels: tuple[int, int, int, int] = (8, 16, 32, 64)
    taps: tuple[str, ...] = ("res3", "res4", "res5")
    temporal_kernel: tuple[bool, bool, bool, bool] = (True, True, True, True)
    pathway: str = "slow"
    in_channels: int = 3

    def validate(self) -> None:
        if len(self.stage_channels) != 4 or any(c < 1 for c in self.stage_channels):
            raise ConfigError(f"stage_channels must be 4 positive ints, got {self.stage_channels}")
        if len(self.temporal_kernel) != 4:
            raise ConfigError("temporal_kernel must have one flag per stage")
        if not self.taps:
            raise ConfigError("taps must be non-empty")
        order = [STAGE_NAMES.index(t) for t in self.taps if t in STAGE_NAMES]
        if len(order) != len(self.taps) or order != sorted(order) or len(set(order)) != len(order):
            raise ConfigError(f"taps must be an ordered subset of {STAGE_NAMES}, got {self.taps}")
        if self.pathway not in ("slow", "fast"):
            raise ConfigError(f"pathway must be 'slow' or 'fast', got {self.pathway!r}")
        if self.in_channels < 1:
            raise ConfigError("in_channels must be >= 1")

    @property
    def final_tap(self) -> str:
        return self.taps[-1]

    def tap_channels(self, tap: str) -> int:
        return self.stage_channels[STAGE_NAMES.index(tap)]

    def to_json(self) -> str:
        return json.dumps(
            {
                "stage_channels": list(self.stage_channels),
                "taps": list(self.taps),
                "temporal_kernel": list(self.temporal_kernel),
                "pathway": self.pathway,
                "in_channels": self.in_channels,
            }
        )

    @staticmethod
    def from_json(text: str) -> "EncoderConfig":
        raw = json.loads(text)
        cfg = EncoderConfig(
            stage_channels=tuple(raw["stage_channels"]),
            taps=tuple(raw["taps"]),
            temporal_kernel=tuple(bool(x) for x in raw["temporal_kernel"]),
            pathway=raw["pathway"],
            in_channels=int(raw["in_channels"]),
        )
        cfg.validate()
        return cfg


@dataclass
class FeaturePyramid:
    """Per-tap pre-pool activations and their pooled vectors for one clip."""

    activations: dict[str, torch.Tensor]  # tap -> [C_k, T', H', W']
    pooled: dict[str, torch.Tensor]  # tap -> [C_k]


class _Stage(nn.Module):
    """conv(s=1,2,2) -> BN -> ReLU -> conv -> BN -> ReLU, replicate padding."""

    def __init__(self, c_in: int, c_out: int, temporal: bool):
        super().__init__()
        kt = 3 if temporal else 1
        pad = (kt // 2, 1, 1)
        self.conv1 = nn.Conv3d(c_in, c_out, (kt, 3, 3), stride=(1, 2, 2), padding=pad, padding_mode="replicate")
        self.bn1 = nn.BatchNorm3d(c_out)
        self.conv2 = nn.Conv3d(c_out, c_out, (kt, 3, 3), stride=1, padding=pad, padding_mode="replicate")
        self.bn2 = nn.BatchNorm3d(c_out)
        self.act = nn.ReLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.act(self.bn1(self.conv1(x)))
        x = self.act(self.bn2(self.conv2(x)))
        return x


class VideoEncoder(nn.Module):
    """Stack of four stages; forward returns the tapped activation maps."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        config.validate()
        self.config = config
        stages = {}
        c_prev = config.in_channels
        for name, c_out, temporal in zip(STAGE_NAMES, config.stage_channels, config.temporal_kernel):
            stages[name] = _Stage(c_prev, c_out, temporal)
            c_prev = c_out
        self.stages = nn.ModuleDict(stages)

    def forward(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        """x: [B, C_in, T, H, W] -> {tap: [B, C_k, T, H', W']}."""
        if x.ndim != 5 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected [B, {self.config.in_channels}, T, H, W], got {tuple(x.shape)}")
        if x.shape[3] < 16 or x.shape[4] < 16:
            raise ShapeError(f"spatial size must be >= 16, got {tuple(x.shape[3:])}")
        taps = {}
        out = x
        last_needed = STAGE_NAMES.index(self.config.final_tap)
        for i, name in enumerate(STAGE_NAMES):
            if i > last_needed:
                break
            out = self.stages[name](out)
            if name in self.config.taps:
                taps[name] = out
        return taps


def clip_to_tensor(clip: np.ndarray | torch.Tensor, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """[T, H, W, C] frames -> [C, T, H, W] tensor."""
    if isinstance(clip, np.ndarray):
        t = torch.from_numpy(np.ascontiguousarray(clip))
    else:
        t = clip
    if t.ndim != 4:
        raise ShapeError(f"expected [T, H, W, C] clip, got {tuple(t.shape)}")
    return t.permute(3, 0, 1, 2).contiguous().to(dtype)


def global_avg_pool(activation: torch.Tensor) -> torch.Tensor:
    """Mean over (T', H', W'); accepts [C, T, H, W] or [B, C, T, H, W]."""
    if activation.ndim == 4:
        return activation.mean(dim=(1, 2, 3))
    if activation.ndim == 5:
        return activation.mean(dim=(2, 3, 4))
    raise ShapeError(f"expected 4D or 5D activation, got {activation.ndim}D")


def pool_pyramid(activations: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    return {tap: global_avg_pool(act) for tap, act in activations.items()}


def encode(clip: np.ndarray | torch.Tensor, encoder: VideoEncoder) -> FeaturePyramid:
    """Run one [T, H, W, C] clip through the encoder and pool every tap."""
    dtype = next(encoder.parameters()).dtype
    x = clip_to_tensor(clip, dtype=dtype).unsqueeze(0)
    acts = encoder(x)
    activations = {tap: a.squeeze(0) for tap, a in acts.items()}
    pooled = {tap: global_avg_pool(a) for tap, a in activations.items()}
    return FeaturePyramid(activations=activations, pooled=pooled)


def count_params(config: EncoderConfig) -> int:
    """Trainable parameter count implied by a config."""
    config.validate()
    model = VideoEncoder(config)
    return sum(p.numel() for p in model.parameters())


def expected_tap_shapes(config: EncoderConfig, t: int, h: int, w: int) -> dict[str, tuple[int, int, int, int]]:
    """Documented stride table: temporal length preserved, spatial halved per stage."""
    shapes = {}
    ch, cw = h, w
    for name, c in zip(STAGE_NAMES, config.stage_channels):
        ch = (ch + 1) // 2
        cw = (cw + 1) // 2
        if name in config.taps:
            shapes[name] = (c, t, ch, cw)
    return shapes


def fast_config_from_slow(slow: EncoderConfig, width_mult: float = 0.5) -> EncoderConfig:
    """Fast-pathway twin of a slow config: same taps, thinner stages."""
    channels = tuple(max(1, int(round(c * width_mult))) for c in slow.stage_channels)
    return EncoderConfig(
        stage_channels=channels,
        taps=slow.taps,
        temporal_kernel=slow.temporal_kernel,
        pathway="fast",
        in_channels=slow.in_channels,
    )
