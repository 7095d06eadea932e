"""Projection heads, temperature-scaled cosine similarity, and the losses.

The similarity between two embeddings u, v is

    sim(u, v) = (u . v) / (temperature * |u| * |v|)

i.e. cosine similarity divided by the temperature. A contrastive term treats
one positive and N sampled negatives as an (N+1)-way softmax classification
with the positive as the target:

    loss = -log( exp(sim(q, p)) / (exp(sim(q, p)) + sum_j exp(sim(q, n_j))) )

The level loss runs this in both directions: fast queries against the slow
bank and slow queries against the fast bank, each mean-reduced over the batch,
then summed. The hierarchical total is the weighted sum of level losses over
the configured taps. Gradients reach the encoders and heads through the query
embeddings only; bank rows are constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DegenerateInputError, ShapeError
from .memory_bank import MemoryBank, sample_negative_indices

PAPER_NEGATIVES = 16384  # desk-scale runs clamp this to n - 1


class ProjectionHead(nn.Module):
    """Two-layer non-linear map from tap features to the embedding space."""

    def __init__(self, in_dim: int, embed_dim: int = 128, hidden_dim: int | None = None):
        super().__init__()
        if in_dim < 1 or embed_dim < 1:
            raise ConfigError("projection head dims must be >= 1")
        hidden = hidden_dim or in_dim
        self.fc1 = nn.Linear(in_dim, hidden)
        self.act = nn.ReLU()
        self.fc2 = nn.Linear(hidden, embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.07
    num_negatives: int | None = None  # None: min(PAPER_NEGATIVES, n - 1)
    level_weights: dict[str, float] | None = None  # None: 1.0 everywhere

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.num_negatives is not None and self.num_negatives < 1:
            raise ConfigError(f"num_negatives must be >= 1, got {self.num_negatives}")
        if self.level_weights is not None:
            for tap, w in self.level_weights.items():
                if w < 0:
                    raise ConfigError(f"level weight for {tap} must be >= 0, got {w}")

    def resolve_negatives(self, num_instances: int) -> int:
        n = self.num_negatives if self.num_negatives is not None else min(PAPER_NEGATIVES, num_instances - 1)
        if not 1 <= n <= num_instances - 1:
            raise ConfigError(f"num_negatives must be in [1, {num_instances - 1}], got {n}")
        return n

    def weight(self, tap: str) -> float:
        if self.level_weights is None:
            return 1.0
        if tap not in self.level_weights:
            raise ConfigError(f"no level weight configured for tap {tap!r}")
        return self.level_weights[tap]


def _unit(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if not torch.all(norms > 0):
        raise DegenerateInputError(f"{what} contains a zero vector")
    return x / norms


def similarity(u: torch.Tensor, v: torch.Tensor, temperature: float) -> torch.Tensor:
    """Temperature-scaled cosine similarity of two vectors."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    if u.shape != v.shape or u.ndim != 1:
        raise ShapeError(f"expected two vectors of equal length, got {tuple(u.shape)} and {tuple(v.shape)}")
    return (_unit(u, "u") * _unit(v, "v")).sum() / temperature


def info_nce(query: torch.Tensor, positive: torch.Tensor, negatives: torch.Tensor, temperature: float) -> torch.Tensor:
    """Softmax cross-entropy of the positive against N sampled negatives."""
    if negatives.ndim != 2 or negatives.shape[0] < 1:
        raise ConfigError("need at least one negative; a 0-negative loss carries no signal")
    if query.ndim != 1 or query.shape != positive.shape or negatives.shape[1] != query.shape[0]:
        raise ShapeError(
            f"shape mismatch: query {tuple(query.shape)}, positive {tuple(positive.shape)}, "
            f"negatives {tuple(negatives.shape)}"
        )
    q = _unit(query, "query")
    candidates = torch.cat([positive.unsqueeze(0), negatives], dim=0)
    logits = (_unit(candidates, "candidates") @ q) / temperature
    return torch.logsumexp(logits, dim=0) - logits[0]


def _batched_info_nce(
    queries: torch.Tensor, positives: torch.Tensor, negatives: torch.Tensor, temperature: float
) -> torch.Tensor:
    """queries [B,d], positives [B,d], negatives [B,N,d] -> per-row losses [B]."""
    q = _unit(queries, "queries")
    candidates = torch.cat([positives.unsqueeze(1), negatives], dim=1)  # [B, N+1, d]
    candidates = _unit(candidates, "candidates")
    logits = torch.einsum("bd,bkd->bk", q, candidates) / temperature
    return torch.logsumexp(logits, dim=1) - logits[:, 0]


def bidirectional_level_loss(
    batch_fast: torch.Tensor,
    batch_slow: torch.Tensor,
    bank_fast: MemoryBank,
    bank_slow: MemoryBank,
    indices,
    config: LossConfig,
    rng: np.random.Generator,
) -> torch.Tensor:
    """Fast-queries-vs-slow-bank plus slow-queries-vs-fast-bank, batch means.

    One set of negative instance ids is drawn per query row and reused for both
    directions, so swapping the fast/slow roles swaps the two terms exactly.
    """
    config.validate()
    if batch_fast.shape != batch_slow.shape or batch_fast.ndim != 2:
        raise ShapeError(f"batch shapes must match, got {tuple(batch_fast.shape)} vs {tuple(batch_slow.shape)}")
    if bank_fast.num_instances != bank_slow.num_instances:
        raise ConfigError("fast and slow banks must cover the same instances")
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    if indices.size != batch_fast.shape[0]:
        raise ShapeError(f"{indices.size} indices for a batch of {batch_fast.shape[0]}")

    n = bank_fast.num_instances
    num_neg = config.resolve_negatives(n)
    neg_idx = np.stack([sample_negative_indices(n, int(i), num_neg, rng) for i in indices])  # [B, N]
    neg_idx_t = torch.from_numpy(neg_idx.reshape(-1))

    pos_slow = bank_slow.lookup(indices)  # positives for fast queries
    pos_fast = bank_fast.lookup(indices)  # positives for slow queries
    negs_slow = bank_slow.entries[neg_idx_t].reshape(indices.size, num_neg, -1).clone()
    negs_fast = bank_fast.entries[neg_idx_t].reshape(indices.size, num_neg, -1).clone()

    loss_fast_dir = _batched_info_nce(batch_fast, pos_slow, negs_slow, config.temperature).mean()
    loss_slow_dir = _batched_info_nce(batch_slow, pos_fast, negs_fast, config.temperature).mean()
    return loss_fast_dir + loss_slow_dir


def hierarchical_loss(
    pooled_fast: dict[str, torch.Tensor],
    pooled_slow: dict[str, torch.Tensor],
    heads: dict[tuple[str, str], ProjectionHead],
    banks: dict[tuple[str, str], MemoryBank],
    indices,
    config: LossConfig,
    rng: np.random.Generator,
    taps: tuple[str, ...] | None = None,
    embeddings_out: dict[tuple[str, str], torch.Tensor] | None = None,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Weighted sum of level losses over taps; also returns the raw per-level values.

    With a single tap and unit weight this is bit-identical to calling
    :func:`bidirectional_level_loss` on that tap directly. If the caller passes
    ``embeddings_out``, the detached projected embeddings of each (pathway, tap)
    are stored there; the trainer feeds them to the bank updates.
    """
    config.validate()
    taps = taps or tuple(pooled_fast.keys())
    per_level: dict[str, torch.Tensor] = {}
    total = None
    for tap in taps:
        for pooled, name in ((pooled_fast, "fast"), (pooled_slow, "slow")):
            if tap not in pooled:
                raise ConfigError(f"{name} pyramid is missing tap {tap!r}")
        for key_owner, name in ((heads, "head"), (banks, "bank")):
            for pathway in ("fast", "slow"):
                if (pathway, tap) not in key_owner:
                    raise ConfigError(f"no {name} for ({pathway!r}, {tap!r})")
        z_fast = heads[("fast", tap)](pooled_fast[tap])
        z_slow = heads[("slow", tap)](pooled_slow[tap])
        if embeddings_out is not None:
            embeddings_out[("fast", tap)] = z_fast.detach()
            embeddings_out[("slow", tap)] = z_slow.detach()
        level = bidirectional_level_loss(
            z_fast, z_slow, banks[("fast", tap)], banks[("slow", tap)], indices, config, rng
        )
        per_level[tap] = level
        weighted = config.weight(tap) * level
        total = weighted if total is None else total + weighted
    if total is None:
        raise ConfigError("hierarchical loss needs at least one tap")
    return total, per_level
