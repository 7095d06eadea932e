"""Pretraining loop: tempo-pair batches, hierarchical loss, SGD, bank updates.

One epoch visits every instance exactly once as a query pair, in a seeded
random order. Each step runs both encoders and all projection heads, takes one
SGD step on the weighted hierarchical loss (half-period cosine learning rate,
weight decay everywhere except normalization parameters), and then writes the
freshly computed, detached unit embeddings into the memory banks at the batch
indices. Checkpoints round-trip the complete state: parameters, norm-layer
running statistics, banks, optimizer momentum, RNG state and counters, so a
resumed run is bit-identical to an uninterrupted one in deterministic mode.
"""

from __future__ import annotations

import json
import math
from dataclasses import replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .config import TrainConfig
from .container import load_container, save_container
from .contrastive import LossConfig, ProjectionHead, hierarchical_loss
from .data import RAW_CLIP_LEN, TempoPair, VideoInstance, make_tempo_pair, sample_raw_clip
from .encoder import EncoderConfig, VideoEncoder, clip_to_tensor, fast_config_from_slow, pool_pyramid
from .errors import CheckpointError, ConfigError, TrainingDiverged
from .memory_bank import MemoryBank

CHECKPOINT_KIND = "train_checkpoint"
EXPORT_KIND = "slow_encoder_export"
CHECKPOINT_FORMAT_VERSION = 1


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Half-period cosine: lr0 at step 0, lr0/2 at the midpoint, 0 at the end."""
    if total_steps <= 0:
        raise ConfigError(f"total_steps must be > 0, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step must be in [0, {total_steps}], got {step}")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def head_key(pathway: str, tap: str) -> str:
    return f"{pathway}__{tap}"


class TrainState:
    """Everything the trainer owns; its serialized form is the checkpoint."""

    def __init__(self, num_instances: int, config: TrainConfig):
        config.validate()
        if num_instances < 2:
            raise ConfigError(f"need at least 2 instances so every query has a negative, got {num_instances}")
        self.config = config
        self.num_instances = num_instances
        self.step = 0
        self.epoch = 0

        torch.manual_seed(config.seed)
        slow_cfg = EncoderConfig(stage_channels=config.stage_channels, taps=config.taps, pathway="slow")
        fast_cfg = fast_config_from_slow(slow_cfg, config.fast_width_mult)
        self.slow_encoder = VideoEncoder(slow_cfg)
        self.fast_encoder = VideoEncoder(fast_cfg)
        heads = {}
        for tap in config.taps:
            heads[head_key("fast", tap)] = ProjectionHead(fast_cfg.tap_channels(tap), config.embed_dim)
            heads[head_key("slow", tap)] = ProjectionHead(slow_cfg.tap_channels(tap), config.embed_dim)
        self.heads = nn.ModuleDict(heads)

        self.banks: dict[tuple[str, str], MemoryBank] = {}
        for k, tap in enumerate(config.taps):
            for j, pathway in enumerate(("fast", "slow")):
                bank_seed_seq = np.random.SeedSequence([config.seed, 3, k, j])
                self.banks[(pathway, tap)] = MemoryBank(
                    num_instances,
                    config.embed_dim,
                    momentum=config.bank_momentum,
                    pathway=pathway,
                    level=tap,
                    seed=int(bank_seed_seq.generate_state(1)[0]),
                )
        self.rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))

        self._flat_params = self._collect_params()
        decay, no_decay = [], []
        for path, p in self._flat_params:
            (no_decay if ".bn" in path else decay).append(p)
        self.optimizer = torch.optim.SGD(
            [
                {"params": decay, "weight_decay": config.weight_decay},
                {"params": no_decay, "weight_decay": 0.0},
            ],
            lr=config.lr0,
            momentum=config.sgd_momentum,
        )

    def _collect_params(self) -> list[tuple[str, nn.Parameter]]:
        out = []
        for prefix, module in (
            ("slow_encoder", self.slow_encoder),
            ("fast_encoder", self.fast_encoder),
            ("heads", self.heads),
        ):
            for name, p in module.named_parameters():
                out.append((f"{prefix}.{name}", p))
        return out

    @property
    def loss_config(self) -> LossConfig:
        return LossConfig(
            temperature=self.config.temperature,
            num_negatives=self.config.num_negatives,
            level_weights=self.config.level_weight_map(),
        )

    def heads_view(self) -> dict[tuple[str, str], ProjectionHead]:
        return {(pw, tap): self.heads[head_key(pw, tap)] for pw in ("fast", "slow") for tap in self.config.taps}

    def total_steps(self) -> int:
        return self.config.epochs * steps_per_epoch(self.num_instances, self.config.batch_size)

    def set_mode(self, training: bool) -> None:
        for m in (self.slow_encoder, self.fast_encoder, self.heads):
            m.train(training)


def steps_per_epoch(num_instances: int, batch_size: int) -> int:
    return math.ceil(num_instances / batch_size)


def apply_determinism(deterministic: bool) -> None:
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def _pairs_to_tensors(pairs: list[TempoPair]) -> tuple[torch.Tensor, torch.Tensor, np.ndarray]:
    slow = torch.stack([clip_to_tensor(p.slow) for p in pairs])
    fast = torch.stack([clip_to_tensor(p.fast) for p in pairs])
    indices = np.array([p.instance_id for p in pairs], dtype=np.int64)
    return slow, fast, indices


def train_step(state: TrainState, pairs: list[TempoPair], out_dir: str | Path | None = None) -> dict:
    """One SGD step on a batch of tempo pairs; returns per-step metrics."""
    if not pairs:
        raise ConfigError("empty batch")
    cfg = state.config
    lr = cosine_lr(state.step, state.total_steps(), cfg.lr0)
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    xs, xf, indices = _pairs_to_tensors(pairs)
    state.set_mode(True)
    pooled_slow = pool_pyramid(state.slow_encoder(xs))
    pooled_fast = pool_pyramid(state.fast_encoder(xf))

    embeddings: dict[tuple[str, str], torch.Tensor] = {}
    total, per_level = hierarchical_loss(
        pooled_fast,
        pooled_slow,
        state.heads_view(),
        state.banks,
        indices,
        state.loss_config,
        state.rng,
        taps=cfg.taps,
        embeddings_out=embeddings,
    )
    if not torch.isfinite(total):
        _dump_divergence(state, pooled_fast, pooled_slow, indices, out_dir)

    state.optimizer.zero_grad()
    total.backward()
    state.optimizer.step()

    with torch.no_grad():
        for tap in cfg.taps:
            for pathway in ("fast", "slow"):
                z = embeddings[(pathway, tap)]
                z = z / z.norm(dim=1, keepdim=True)
                state.banks[(pathway, tap)].update(indices, z)

    metrics = {"step": state.step, "lr": lr, "loss_total": float(total.detach())}
    for tap in cfg.taps:
        metrics[f"loss_{tap}"] = float(per_level[tap].detach())
    state.step += 1
    return metrics


def _dump_divergence(state, pooled_fast, pooled_slow, indices, out_dir) -> None:
    """Dump the full query-vs-bank logit matrices per level, then abort."""
    arrays = {}
    with torch.no_grad():
        for tap in state.config.taps:
            for pathway, pooled in (("fast", pooled_fast), ("slow", pooled_slow)):
                z = state.heads[head_key(pathway, tap)](pooled[tap])
                norms = z.norm(dim=1, keepdim=True)
                z = z / torch.where(norms > 0, norms, torch.ones_like(norms))
                bank = state.banks[("slow" if pathway == "fast" else "fast", tap)]
                logits = (z @ bank.entries.T) / state.config.temperature
                arrays[f"logits_{pathway}_{tap}"] = logits.numpy()
    location = ""
    if out_dir is not None:
        path = Path(out_dir) / f"divergence_step_{state.step}.npz"
        np.savez(path, indices=indices, **arrays)
        location = f"; logits dumped to {path}"
    stats = {k: (float(np.nanmin(v)), float(np.nanmax(v))) for k, v in arrays.items()}
    raise TrainingDiverged(f"non-finite loss at step {state.step}; logit ranges {stats}{location}")


def format_log_line(metrics: dict, taps: tuple[str, ...]) -> str:
    parts = [f"step={metrics['step']}", f"lr={metrics['lr']:.9g}", f"loss_total={metrics['loss_total']:.9g}"]
    parts += [f"loss_{tap}={metrics[f'loss_{tap}']:.9g}" for tap in taps]
    return " ".join(parts)


def _validate_dataset(dataset: list[VideoInstance]) -> None:
    if len(dataset) < 2:
        raise ConfigError(f"need at least 2 instances so every query has a negative, got {len(dataset)}")
    for position, inst in enumerate(dataset):
        if inst.instance_id != position:
            raise ConfigError("dataset instance ids must be exactly 0..n-1 so bank rows align")
        if inst.frames.shape[0] < RAW_CLIP_LEN:
            raise ConfigError(f"instance {inst.instance_id} has fewer than {RAW_CLIP_LEN} frames")


def pretrain(
    dataset: list[VideoInstance],
    config: TrainConfig,
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainState:
    """Run the pretext training; returns the final state, checkpointing per epoch."""
    config.validate()
    _validate_dataset(dataset)
    apply_determinism(config.deterministic)

    if resume_from is not None:
        state = load_checkpoint(resume_from)
        if state.config != config:
            raise ConfigError("resume checkpoint was trained with a different config")
        if state.num_instances != len(dataset):
            raise ConfigError("resume checkpoint covers a different number of instances")
    else:
        state = TrainState(len(dataset), config)

    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "train_log.txt", "a")

    n = state.num_instances
    total_frames = dataset[0].frames.shape[0]
    try:
        while state.epoch < config.epochs:
            order = state.rng.permutation(n)
            if total_frames > RAW_CLIP_LEN:
                starts = state.rng.integers(0, total_frames - RAW_CLIP_LEN + 1, size=n)
            else:
                starts = np.zeros(n, dtype=np.int64)
            for lo in range(0, n, config.batch_size):
                ids = order[lo : lo + config.batch_size]
                pairs = [
                    make_tempo_pair(sample_raw_clip(dataset[i], int(starts[i])), config.tau, config.alpha)
                    for i in ids
                ]
                metrics = train_step(state, pairs, out_dir=out)
                line = format_log_line(metrics, config.taps)
                if log_file is not None:
                    log_file.write(line + "\n")
                    log_file.flush()
                if on_step is not None:
                    on_step(metrics)
            state.epoch += 1
            if out is not None and (state.epoch % config.checkpoint_every == 0 or state.epoch == config.epochs):
                save_checkpoint(state, out / f"checkpoint_epoch_{state.epoch:04d}.vtck")
        if out is not None:
            save_checkpoint(state, out / "checkpoint_final.vtck")
    finally:
        if log_file is not None:
            log_file.close()
    return state


# ---------------------------------------------------------------------------
# Checkpoint serialization (see container.py for the byte-level format).
# ---------------------------------------------------------------------------


def _module_arrays(prefix: str, module: nn.Module) -> dict[str, np.ndarray]:
    return {f"{prefix}/{name}": tensor.detach().numpy().copy() for name, tensor in module.state_dict().items()}


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    arrays: dict[str, np.ndarray] = {}
    arrays.update(_module_arrays("slow_encoder", state.slow_encoder))
    arrays.update(_module_arrays("fast_encoder", state.fast_encoder))
    arrays.update(_module_arrays("heads", state.heads))
    for (pathway, tap), bank in state.banks.items():
        arrays[f"banks/{head_key(pathway, tap)}/entries"] = bank.state_arrays()["entries"]
    for idx, (_, p) in enumerate(state._flat_params):
        buf = state.optimizer.state.get(p, {}).get("momentum_buffer")
        if buf is not None:
            arrays[f"optim/momentum/{idx}"] = buf.detach().numpy().copy()
    meta = {
        "kind": CHECKPOINT_KIND,
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": json.loads(state.config.to_json()),
        "n_instances": state.num_instances,
        "step": state.step,
        "epoch": state.epoch,
        "rng_state": state.rng.bit_generator.state,
    }
    return save_container(path, meta, arrays)


def _load_module_arrays(prefix: str, module: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state_dict = {}
    for name, tensor in module.state_dict().items():
        key = f"{prefix}/{name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint is missing array {key!r}")
        state_dict[name] = torch.from_numpy(np.ascontiguousarray(arrays[key])).to(tensor.dtype)
    module.load_state_dict(state_dict)


def load_checkpoint(path: str | Path) -> TrainState:
    meta, arrays = load_container(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise CheckpointError(f"{path}: not a train checkpoint (kind={meta.get('kind')!r})")
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format version")
    config = TrainConfig.from_dict(meta["config"])
    state = TrainState(int(meta["n_instances"]), config)
    state.step = int(meta["step"])
    state.epoch = int(meta["epoch"])
    _load_module_arrays("slow_encoder", state.slow_encoder, arrays)
    _load_module_arrays("fast_encoder", state.fast_encoder, arrays)
    _load_module_arrays("heads", state.heads, arrays)
    for (pathway, tap), bank in state.banks.items():
        bank.load_state_arrays({"entries": arrays[f"banks/{head_key(pathway, tap)}/entries"]})
    for idx, (_, p) in enumerate(state._flat_params):
        key = f"optim/momentum/{idx}"
        if key in arrays:
            state.optimizer.state[p] = {"momentum_buffer": torch.from_numpy(np.ascontiguousarray(arrays[key]))}
    state.rng.bit_generator.state = meta["rng_state"]
    return state


def export_slow_encoder(checkpoint_path: str | Path, out_path: str | Path) -> Path:
    """Write a smaller artifact holding only the slow encoder and its config."""
    meta, arrays = load_container(checkpoint_path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise CheckpointError(f"{checkpoint_path}: not a train checkpoint")
    config = TrainConfig.from_dict(meta["config"])
    slow_cfg = EncoderConfig(stage_channels=config.stage_channels, taps=config.taps, pathway="slow")
    subset = {k: v for k, v in arrays.items() if k.startswith("slow_encoder/")}
    if not subset:
        raise CheckpointError(f"{checkpoint_path}: no slow encoder arrays found")
    export_meta = {
        "kind": EXPORT_KIND,
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "encoder_config": json.loads(slow_cfg.to_json()),
        "tau": config.tau,
    }
    return save_container(out_path, export_meta, subset)


def load_encoder_artifact(path: str | Path) -> tuple[VideoEncoder, dict]:
    """Load the slow encoder from either a full checkpoint or an export file."""
    meta, arrays = load_container(path)
    kind = meta.get("kind")
    if kind == CHECKPOINT_KIND:
        config = TrainConfig.from_dict(meta["config"])
        slow_cfg = EncoderConfig(stage_channels=config.stage_channels, taps=config.taps, pathway="slow")
        tau = config.tau
    elif kind == EXPORT_KIND:
        slow_cfg = EncoderConfig.from_json(json.dumps(meta["encoder_config"]))
        tau = int(meta.get("tau", 8))
    else:
        raise CheckpointError(f"{path}: unknown artifact kind {kind!r}")
    encoder = VideoEncoder(slow_cfg)
    _load_module_arrays("slow_encoder", encoder, arrays)
    encoder.eval()
    return encoder, {"kind": kind, "tau": tau, "meta": meta}
