"""Feature pooling, similarity and the cyclic negative-sample queues."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .errors import SampleError

TAU_FLOOR = 1e-3
MODALITIES = ("image", "ots", "formula")


def pool_first_token(h: torch.Tensor, mode: str = "first", key_mask: torch.Tensor | None = None) -> torch.Tensor:
    """L2-normalized global feature from ``h`` of shape [..., n_t, d_f].

    ``mode="mean"`` averages the unmasked tokens instead of taking token 0.
    All-zero summaries map to the unit vector e_1.
    """
    if h.shape[-2] < 1:
        raise ValueError("need at least one token to pool")
    if mode == "first":
        v = h[..., 0, :]
    elif mode == "mean":
        if key_mask is None:
            v = h.mean(dim=-2)
        else:
            w = key_mask.to(h.dtype).unsqueeze(-1)
            v = (h * w).sum(dim=-2) / w.sum(dim=-2).clamp_min(1.0)
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    norm = v.norm(dim=-1, keepdim=True)
    e1 = torch.zeros_like(v)
    e1[..., 0] = 1.0
    safe = torch.where(norm > 0, norm, torch.ones_like(norm))
    return torch.where(norm > 0, v / safe, e1)


def cosine_sim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Dot product of already-normalized features (broadcasting over leading dims)."""
    return (a * b).sum(dim=-1)


def _normalize_rows(x: torch.Tensor) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(1e-12)


class FeatureQueue:
    """Fixed-capacity ring of detached, unit-norm features.

    Pre-filled with normalized Gaussian noise so it is never empty.
    """

    def __init__(self, capacity: int, dim: int, seed: int = 0, dtype: torch.dtype = torch.float32):
        if capacity < 1:
            raise ValueError("queue capacity must be positive")
        gen = torch.Generator().manual_seed(int(seed) % 2**63)
        self.capacity = capacity
        self.dim = dim
        self.buffer = _normalize_rows(torch.randn(capacity, dim, generator=gen, dtype=torch.float64)).to(dtype)
        self.write_index = 0

    def push(self, batch: torch.Tensor) -> None:
        batch = batch.detach().to(self.buffer.dtype).reshape(-1, self.dim)
        n = batch.shape[0]
        if n == 0:
            return
        if n >= self.capacity:
            # only the newest `capacity` items survive; keep ring order consistent
            batch = batch[n - self.capacity :]
            start = (self.write_index + n - self.capacity) % self.capacity
            idx = (start + torch.arange(self.capacity)) % self.capacity
        else:
            idx = (self.write_index + torch.arange(n)) % self.capacity
        self.buffer[idx] = batch
        self.write_index = (self.write_index + n) % self.capacity

    def sample(self, n: int, seed: int) -> torch.Tensor:
        """``n`` distinct entries, deterministic given ``seed``."""
        if n > self.capacity:
            raise SampleError(f"cannot draw {n} negatives from a queue of {self.capacity}")
        idx = sample_indices(self.capacity, n, seed)
        return self.buffer[torch.as_tensor(idx)].clone()

    def ordered(self) -> torch.Tensor:
        """Contents oldest-first."""
        idx = (self.write_index + torch.arange(self.capacity)) % self.capacity
        return self.buffer[idx]

    def state(self) -> dict:
        return {"buffer": self.buffer.clone(), "write_index": self.write_index}

    def load_state(self, state: dict) -> None:
        buf = state["buffer"]
        if tuple(buf.shape) != (self.capacity, self.dim):
            raise ValueError("queue snapshot shape mismatch")
        self.buffer = buf.clone().to(self.buffer.dtype)
        self.write_index = int(state["write_index"])


def sample_indices(capacity: int, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(int(seed) % 2**64)
    return rng.permutation(capacity)[:n]


def queue_push(q: FeatureQueue, batch: torch.Tensor) -> None:
    q.push(batch)


def queue_sample(q: FeatureQueue, n: int, seed: int) -> torch.Tensor:
    return q.sample(n, seed)


class Temperatures(nn.Module):
    """Learnable contrastive temperature ``tau`` and the KD denominator temperature.

    ``tau_prime=None`` ties the denominator temperature to ``tau``.
    """

    def __init__(self, tau: float = 0.07, tau_prime: float | None = None, learnable: bool = True):
        super().__init__()
        if tau <= 0 or (tau_prime is not None and tau_prime <= 0):
            raise ValueError("temperatures must be positive")
        self.tau = nn.Parameter(torch.tensor(float(tau)), requires_grad=learnable)
        self.register_buffer("tau_prime_fixed", torch.tensor(float(tau_prime if tau_prime is not None else -1.0)))

    @property
    def tied(self) -> bool:
        return float(self.tau_prime_fixed) < 0

    @property
    def tau_prime(self) -> torch.Tensor:
        return self.tau if self.tied else self.tau_prime_fixed

    @torch.no_grad()
    def clamp_(self) -> None:
        self.tau.clamp_(min=TAU_FLOOR)
