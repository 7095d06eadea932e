"""Synthetic moving-shapes video corpus and tempo-pair sampling.

Each instance is one shape (circle, square or triangle) gliding over a static
per-instance noise background and bouncing off the walls. Shape class gives an
appearance label, pixel-per-frame velocity gives a tempo label; both labels are
generator-side metadata for probing only and are never visible to pretraining
(a :class:`TempoPair` carries no labels).

Everything here is a pure function of ``(seed, instance_id)``: regenerating a
corpus with the same seed is bit-identical, and frames, masks and clips can be
recomputed independently by any worker.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import BoundsError, ConfigError

SHAPE_LABELS = ("circle", "square", "triangle")
SPEED_LABELS = ("slow", "medium", "fast")

# Pixels travelled per raw frame for each tempo class. Spaced so the classes
# stay separable after stride-8 temporal sampling (8 / 20 / 40 px per step).
SPEED_PIXELS = {"slow": 1.0, "medium": 2.5, "fast": 5.0}

RAW_CLIP_LEN = 64

FRAMES_MAGIC = b"VTCL"
FRAMES_VERSION = 1


@dataclass(frozen=True)
class GeneratorConfig:
    """Settings for the procedural video generator."""

    num_frames: int = 64
    height: int = 64
    width: int = 64
    channels: int = 3
    noise_sigma: float = 0.05
    min_shape_size: int = 10
    max_shape_size: int = 16

    def validate(self) -> None:
        if self.num_frames < RAW_CLIP_LEN:
            raise ConfigError(f"num_frames must be >= {RAW_CLIP_LEN}, got {self.num_frames}")
        if self.height < 16 or self.width < 16:
            raise ConfigError(f"frame size must be >= 16x16, got {self.height}x{self.width}")
        if self.channels != 3:
            raise ConfigError(f"only 3-channel videos are supported, got {self.channels}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not (4 <= self.min_shape_size <= self.max_shape_size):
            raise ConfigError("shape size range must satisfy 4 <= min <= max")
        if self.max_shape_size >= min(self.height, self.width) // 2:
            raise ConfigError("max_shape_size too large for the frame")


@dataclass
class VideoInstance:
    instance_id: int
    frames: np.ndarray  # [T, H, W, C] float32 in [0, 1]
    shape_label: str
    speed_label: str
    seed: int


@dataclass
class RawClip:
    frames: np.ndarray  # [64, H, W, C]
    instance_id: int
    start_frame: int


@dataclass
class TempoPair:
    """Slow/fast clips re-sampled from one raw clip of the same instance."""

    slow: np.ndarray  # [64/tau, H, W, C]
    fast: np.ndarray  # [alpha * 64/tau, H, W, C]
    instance_id: int
    alpha: int
    tau: int


def _instance_rng(seed: int, instance_id: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, instance_id, stream]))


def _labels_for_instance(instance_id: int) -> tuple[str, str]:
    # Round-robin over the 3x3 grid keeps per-class counts within +-1.
    shape_idx, speed_idx = divmod(instance_id % 9, 3)
    return SHAPE_LABELS[shape_idx], SPEED_LABELS[speed_idx]


def _reflect(p0: float, v: float, t: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Position at time t for linear motion with elastic wall bounces.

    Closed form via the period-2L triangle wave, so it is a pure function of t.
    """
    span = hi - lo
    u = np.mod((p0 - lo) + v * t, 2.0 * span)
    return lo + np.where(u <= span, u, 2.0 * span - u)


@dataclass(frozen=True)
class _Trajectory:
    shape: str
    size: float
    color: np.ndarray  # [3]
    cx: np.ndarray  # [T] center columns
    cy: np.ndarray  # [T] center rows


def _draw_trajectory(config: GeneratorConfig, seed: int, instance_id: int) -> _Trajectory:
    rng = _instance_rng(seed, instance_id)
    shape_label, speed_label = _labels_for_instance(instance_id)

    size = float(rng.integers(config.min_shape_size, config.max_shape_size + 1))
    half = size / 2.0
    # Foreground color at least 0.2 away from the 0.5 background mean per channel.
    offsets = rng.uniform(0.2, 0.5, size=3)
    signs = rng.choice([-1.0, 1.0], size=3)
    color = (0.5 + signs * offsets).astype(np.float32)

    lo_x, hi_x = half, config.width - 1 - half
    lo_y, hi_y = half, config.height - 1 - half
    x0 = rng.uniform(lo_x, hi_x)
    y0 = rng.uniform(lo_y, hi_y)
    angle = rng.uniform(0.0, 2.0 * math.pi)
    speed = SPEED_PIXELS[speed_label]
    vx = speed * math.cos(angle)
    vy = speed * math.sin(angle)

    t = np.arange(config.num_frames, dtype=np.float64)
    cx = _reflect(x0, vx, t, lo_x, hi_x)
    cy = _reflect(y0, vy, t, lo_y, hi_y)
    return _Trajectory(shape=shape_label, size=size, color=color, cx=cx, cy=cy)


def _shape_mask(shape: str, size: float, cx: float, cy: float, height: int, width: int) -> np.ndarray:
    yy, xx = np.ogrid[0:height, 0:width]
    dx = xx - cx
    dy = yy - cy
    half = size / 2.0
    if shape == "circle":
        return dx * dx + dy * dy <= half * half
    if shape == "square":
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    if shape == "triangle":
        # Upward triangle: apex at cy - half, base at cy + half.
        rel = (dy + half) / size  # 0 at apex row, 1 at base row
        return (rel >= 0) & (rel <= 1) & (np.abs(dx) <= rel * half)
    raise ConfigError(f"unknown shape {shape!r}")


def instance_masks(config: GeneratorConfig, seed: int, instance_id: int) -> np.ndarray:
    """Boolean [T, H, W] ground-truth occupancy of the shape, for evaluation only."""
    config.validate()
    traj = _draw_trajectory(config, seed, instance_id)
    masks = np.zeros((config.num_frames, config.height, config.width), dtype=bool)
    for t in range(config.num_frames):
        masks[t] = _shape_mask(traj.shape, traj.size, traj.cx[t], traj.cy[t], config.height, config.width)
    return masks


def generate_instance(config: GeneratorConfig, seed: int, instance_id: int) -> VideoInstance:
    config.validate()
    if instance_id < 0:
        raise ConfigError(f"instance_id must be >= 0, got {instance_id}")
    traj = _draw_trajectory(config, seed, instance_id)
    # Background texture comes from a sibling stream so trajectory and texture
    # can be regenerated independently (masks never touch the texture stream).
    background_rng = _instance_rng(seed, instance_id, stream=1)
    background = background_rng.normal(0.5, config.noise_sigma, size=(config.height, config.width, config.channels))
    background = np.clip(background, 0.0, 1.0).astype(np.float32)

    frames = np.empty((config.num_frames, config.height, config.width, config.channels), dtype=np.float32)
    for t in range(config.num_frames):
        mask = _shape_mask(traj.shape, traj.size, traj.cx[t], traj.cy[t], config.height, config.width)
        frame = background.copy()
        frame[mask] = traj.color
        frames[t] = frame

    shape_label, speed_label = _labels_for_instance(instance_id)
    return VideoInstance(
        instance_id=instance_id,
        frames=frames,
        shape_label=shape_label,
        speed_label=speed_label,
        seed=seed,
    )


def generate_dataset(num_instances: int, seed: int, config: GeneratorConfig | None = None) -> list[VideoInstance]:
    """Generate a labeled corpus; label combinations are balanced round-robin."""
    if num_instances < 1:
        raise ConfigError(f"num_instances must be >= 1, got {num_instances}")
    config = config or GeneratorConfig()
    config.validate()
    return [generate_instance(config, seed, i) for i in range(num_instances)]


def sample_raw_clip(v: VideoInstance, start: int) -> RawClip:
    """Take 64 consecutive frames starting at ``start``."""
    total = v.frames.shape[0]
    if start < 0 or start + RAW_CLIP_LEN > total:
        raise BoundsError(f"start={start} out of range for {total} frames (need start+{RAW_CLIP_LEN} <= total)")
    return RawClip(frames=v.frames[start : start + RAW_CLIP_LEN], instance_id=v.instance_id, start_frame=start)


def make_tempo_pair(raw: RawClip, tau: int, alpha: int) -> TempoPair:
    """Re-sample one raw clip at strides tau (slow) and tau/alpha (fast).

    alpha=1 is the degenerate case where both clips are identical and training
    reduces to plain instance discrimination.
    """
    if tau < 1 or RAW_CLIP_LEN % tau != 0:
        raise ConfigError(f"tau must divide {RAW_CLIP_LEN}, got {tau}")
    if alpha < 1:
        raise ConfigError(f"alpha must be >= 1, got {alpha}")
    if tau % alpha != 0:
        raise ConfigError(f"alpha must divide tau, got alpha={alpha} tau={tau}")
    slow = raw.frames[::tau]
    fast = raw.frames[:: tau // alpha]
    return TempoPair(slow=slow, fast=fast, instance_id=raw.instance_id, alpha=alpha, tau=tau)


# ---------------------------------------------------------------------------
# On-disk format: one directory per instance with frames.bin + meta.json.
# frames.bin layout (little-endian): magic "VTCL", u32 version, u32 T, H, W, C,
# then T*H*W*C float32 values in row-major order.
# ---------------------------------------------------------------------------


def write_frames_bin(path: Path, frames: np.ndarray) -> None:
    frames = np.ascontiguousarray(frames, dtype=np.float32)
    t, h, w, c = frames.shape
    header = FRAMES_MAGIC + struct.pack("<IIIII", FRAMES_VERSION, t, h, w, c)
    tmp = path.with_suffix(".tmp")
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(frames.astype("<f4").tobytes())
    tmp.replace(path)


def read_frames_bin(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != FRAMES_MAGIC:
            raise ConfigError(f"{path}: bad magic {magic!r}, expected {FRAMES_MAGIC!r}")
        version, t, h, w, c = struct.unpack("<IIIII", f.read(20))
        if version != FRAMES_VERSION:
            raise ConfigError(f"{path}: unsupported frames.bin version {version}")
        payload = f.read(t * h * w * c * 4)
    frames = np.frombuffer(payload, dtype="<f4").reshape(t, h, w, c)
    return np.ascontiguousarray(frames)


def save_dataset(instances: list[VideoInstance], out_dir: str | Path, *, seed: int | None = None, config: GeneratorConfig | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for inst in instances:
        inst_dir = out / f"instance_{inst.instance_id:05d}"
        inst_dir.mkdir(exist_ok=True)
        write_frames_bin(inst_dir / "frames.bin", inst.frames)
        meta = {
            "instance_id": inst.instance_id,
            "shape_label": inst.shape_label,
            "speed_label": inst.speed_label,
            "seed": inst.seed,
            "shape": list(inst.frames.shape),
        }
        (inst_dir / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    if seed is not None:
        gen_meta = {"seed": seed, "num_instances": len(instances), "config": asdict(config or GeneratorConfig())}
        (out / "generator.json").write_text(json.dumps(gen_meta, indent=2) + "\n")
    return out


def load_dataset(data_dir: str | Path) -> list[VideoInstance]:
    data = Path(data_dir)
    inst_dirs = sorted(data.glob("instance_*"))
    if not inst_dirs:
        raise ConfigError(f"no instance_* directories under {data}")
    instances = []
    for d in inst_dirs:
        meta = json.loads((d / "meta.json").read_text())
        frames = read_frames_bin(d / "frames.bin")
        instances.append(
            VideoInstance(
                instance_id=int(meta["instance_id"]),
                frames=frames,
                shape_label=meta["shape_label"],
                speed_label=meta["speed_label"],
                seed=int(meta["seed"]),
            )
        )
    instances.sort(key=lambda i: i.instance_id)
    return instances


def load_generator_meta(data_dir: str | Path) -> tuple[int, GeneratorConfig]:
    """Seed and config the corpus was generated with (needed to regenerate masks)."""
    path = Path(data_dir) / "generator.json"
    if not path.exists():
        raise ConfigError(f"{path} not found; dataset was not written by gen-data")
    meta = json.loads(path.read_text())
    return int(meta["seed"]), GeneratorConfig(**meta["config"])
