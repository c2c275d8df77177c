"""Input corruption: the continuous blend used by adversarial training, plus the
fixed-noise baselines (blackout, speckle, gaussian).

All randomness flows through an explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

NOISE_LATENT_DIM = 256
STRATEGY_KINDS = ("none", "blackout", "speckle", "gaussian", "alcn")


@dataclass(frozen=True)
class AlphaPolicy:
    low: float = 0.2
    high: float = 0.9
    per_sample: bool = False

    def __post_init__(self):
        if not 0.0 < self.low < self.high < 1.0:
            raise ValueError(f"alpha bounds must satisfy 0 < low < high < 1, got ({self.low}, {self.high})")


@dataclass(frozen=True)
class NoiseStrategy:
    kind: str = "alcn"
    p: float = 0.2
    sigma: float = 0.5
    alpha_policy: AlphaPolicy = field(default_factory=AlphaPolicy)

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown noise strategy {self.kind!r}; expected one of {STRATEGY_KINDS}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"corruption probability p must be in [0, 1], got {self.p}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")

    @property
    def label(self) -> str:
        return {
            "none": "DAE",
            "blackout": f"DAE+Blackout(p={self.p:g})",
            "speckle": f"DAE+Speckle(p={self.p:g})",
            "gaussian": f"DAE+Gaussian(sigma={self.sigma:g})",
            "alcn": "DAE+ALCN",
        }[self.kind]


def blend(x, n, alpha):
    """Convex mix ``alpha * x + (1 - alpha) * n``.

    ``alpha`` may be a float or a tensor broadcastable against ``x`` (one value
    per sample when the per-sample policy is used).
    """
    if x.shape != n.shape:
        raise ValueError(f"blend shape mismatch: image {tuple(x.shape)} vs noise {tuple(n.shape)}")
    return alpha * x + (1 - alpha) * n


def sample_alpha(policy: AlphaPolicy, rng: np.random.Generator, batch_size=None):
    """One blend weight per training step, or per sample if the policy says so."""
    if policy.per_sample and batch_size is not None:
        return rng.uniform(policy.low, policy.high, size=batch_size)
    return float(rng.uniform(policy.low, policy.high))


def sample_latent(batch_size, rng: np.random.Generator, dim=NOISE_LATENT_DIM) -> torch.Tensor:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return torch.from_numpy(rng.standard_normal((batch_size, dim), dtype=np.float32))


def apply_strategy(strategy: NoiseStrategy, x: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """Corrupt a clean batch with one of the fixed baselines."""
    kind = strategy.kind
    if kind == "none":
        return x
    if kind == "alcn":
        raise ValueError("alcn corruption is learned; use train.train_step instead of apply_strategy")
    shape = tuple(x.shape)
    if kind == "blackout":
        hit = torch.from_numpy(rng.random(shape) < strategy.p)
        return x.masked_fill(hit, 0.0)
    if kind == "speckle":
        hit = torch.from_numpy(rng.random(shape) < strategy.p)
        fill = torch.from_numpy(rng.random(shape, dtype=np.float32)).to(x.dtype)
        return torch.where(hit, fill, x)
    # gaussian
    noise = torch.from_numpy(rng.standard_normal(shape, dtype=np.float32)).to(x.dtype)
    return (x + strategy.sigma * noise).clamp(0.0, 1.0)
