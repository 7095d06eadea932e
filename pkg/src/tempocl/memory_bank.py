"""Momentum-averaged embedding store, one per (pathway, tap level).

Row i always belongs to instance i. Updates mix the stored row with a freshly
computed unit embedding, ``row <- m * row + (1 - m) * new``, and re-normalize,
since a convex combination of unit vectors is generally not unit and the
similarity function assumes cosine geometry. ``renormalize=False`` exists only
so tests can check the unrolled closed form of the update.
"""

from __future__ import annotations

import numpy as np
import torch

from .errors import BoundsError, ConfigError, DegenerateInputError


def sample_negative_indices(num_instances: int, exclude: int, num: int, rng: np.random.Generator) -> np.ndarray:
    """num indices drawn uniformly without replacement from [0, n) minus exclude."""
    if not 0 <= exclude < num_instances:
        raise BoundsError(f"exclude={exclude} out of range for {num_instances} instances")
    if num < 1 or num > num_instances - 1:
        raise ConfigError(f"need 1 <= num <= {num_instances - 1}, got {num}")
    drawn = rng.choice(num_instances - 1, size=num, replace=False)
    return np.where(drawn >= exclude, drawn + 1, drawn).astype(np.int64)


class MemoryBank:
    def __init__(
        self,
        num_instances: int,
        dim: int,
        *,
        momentum: float = 0.5,
        pathway: str = "slow",
        level: str = "res5",
        seed: int = 0,
        renormalize: bool = True,
        dtype: torch.dtype = torch.float32,
    ):
        if num_instances < 1 or dim < 1:
            raise ConfigError(f"bank needs num_instances >= 1 and dim >= 1, got {num_instances}x{dim}")
        if not 0.0 <= momentum <= 1.0:
            raise ConfigError(f"momentum must be in [0, 1], got {momentum}")
        self.num_instances = num_instances
        self.dim = dim
        self.momentum = momentum
        self.pathway = pathway
        self.level = level
        self.seed = seed
        self.renormalize = renormalize

        rng = np.random.default_rng(seed)
        rows = rng.standard_normal((num_instances, dim))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        self.entries = torch.from_numpy(rows).to(dtype)

    def _check_indices(self, indices: np.ndarray) -> np.ndarray:
        indices = np.asarray(indices, dtype=np.int64).reshape(-1)
        if indices.size and (indices.min() < 0 or indices.max() >= self.num_instances):
            raise BoundsError(f"indices out of range for bank of size {self.num_instances}")
        return indices

    @torch.no_grad()
    def update(self, indices, new_embeddings: torch.Tensor) -> None:
        """row_i <- normalize(m * row_i + (1 - m) * new_i); new rows must be unit."""
        indices = self._check_indices(indices)
        if len(set(indices.tolist())) != indices.size:
            raise ConfigError("duplicate indices in one update call are ambiguous")
        new = new_embeddings.detach().to(self.entries.dtype)
        if new.shape != (indices.size, self.dim):
            raise ConfigError(f"expected embeddings of shape {(indices.size, self.dim)}, got {tuple(new.shape)}")
        norms = new.norm(dim=1)
        if not torch.all((norms - 1.0).abs() < 1e-3):
            raise DegenerateInputError("update embeddings must be unit-normalized")
        idx = torch.from_numpy(indices)
        mixed = self.momentum * self.entries[idx] + (1.0 - self.momentum) * new
        if self.renormalize:
            mixed = mixed / mixed.norm(dim=1, keepdim=True)
        self.entries[idx] = mixed

    def lookup(self, indices) -> torch.Tensor:
        """Copies of the requested rows; mutating them never touches the bank."""
        indices = self._check_indices(indices)
        return self.entries[torch.from_numpy(indices)].clone()

    def sample_negatives(self, exclude: int, num: int, rng: np.random.Generator) -> torch.Tensor:
        """num rows drawn uniformly without replacement from indices != exclude."""
        drawn = sample_negative_indices(self.num_instances, exclude, num, rng)
        return self.entries[torch.from_numpy(drawn)].clone()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {"entries": self.entries.numpy().copy()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        entries = torch.from_numpy(np.ascontiguousarray(arrays["entries"]))
        if tuple(entries.shape) != (self.num_instances, self.dim):
            raise ConfigError("bank state has the wrong shape")
        self.entries = entries.to(self.entries.dtype)
