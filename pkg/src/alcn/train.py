"""Adversarial noise training: alternating ascent (noise generator) and descent
(denoiser) steps, the fixed-noise baseline step, and the epoch loop.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import corruption
from .corruption import AlphaPolicy, NoiseStrategy, blend, sample_alpha, sample_latent
from .data import BatchPlan, ProtocolSplit, make_batches
from .losses import LossWeights, minimax_objective, recon_loss
from .model import ArchSpec, init_params, set_trainable

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    lr_denoiser: float = 1e-5
    lr_noisegen: float = 8e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = None

    def __post_init__(self):
        # zero is allowed so that a null update can be exercised
        if self.lr_denoiser < 0 or self.lr_noisegen < 0:
            raise ValueError("learning rates must be >= 0")


@dataclass
class StepStats:
    step: int
    recon_loss_pre_noise_update: float
    recon_loss_post: float
    alpha: float
    grad_norm_denoiser: float
    grad_norm_noisegen: float


@dataclass
class TrainState:
    denoiser: torch.nn.Module
    noisegen: torch.nn.Module | None
    opt_denoiser: torch.optim.Optimizer
    opt_noisegen: torch.optim.Optimizer | None
    rng: np.random.Generator
    step: int = 0
    config_hash: str = ""
    optim: OptimConfig = field(default_factory=OptimConfig)


def make_optimizer(net, lr, cfg: OptimConfig):
    return torch.optim.Adam(net.parameters(), lr=lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)


def init_state(denoiser_arch: ArchSpec, noisegen_arch: ArchSpec | None, optim: OptimConfig, seed=0, config_hash=""):
    """Fresh networks and optimizers; every random stream derives from ``seed``."""
    d_seed, g_seed = np.random.SeedSequence(seed).generate_state(2)
    denoiser = init_params(denoiser_arch, int(d_seed))
    noisegen = init_params(noisegen_arch, int(g_seed)) if noisegen_arch is not None else None
    return TrainState(
        denoiser=denoiser,
        noisegen=noisegen,
        opt_denoiser=make_optimizer(denoiser, optim.lr_denoiser, optim),
        opt_noisegen=make_optimizer(noisegen, optim.lr_noisegen, optim) if noisegen is not None else None,
        rng=np.random.default_rng([seed, 1]),
        config_hash=config_hash,
        optim=optim,
    )


def _grad_norm(net) -> float:
    sq = sum(float((p.grad.double() ** 2).sum()) for p in net.parameters() if p.grad is not None)
    return math.sqrt(sq)


def _update(net, opt, objective, clip):
    opt.zero_grad(set_to_none=True)
    objective.backward()
    norm = _grad_norm(net)
    if clip:
        torch.nn.utils.clip_grad_norm_(net.parameters(), clip)
    opt.step()
    return norm


def _check_finite(value, state, alpha, phase):
    if not math.isfinite(value):
        raise TrainingError(f"non-finite {phase} loss at step {state.step} (alpha={alpha})")


def _latent_width(net):
    arch = getattr(net, "arch", None)
    return getattr(arch, "noise_latent_dim", corruption.NOISE_LATENT_DIM)


def _alpha_tensor(alpha, x):
    if isinstance(alpha, np.ndarray):
        return torch.as_tensor(alpha, dtype=x.dtype).view(-1, *([1] * (x.dim() - 1)))
    return alpha


def noise_objective(denoiser, noisegen, x, z, alpha, loss="ffl", weights=LossWeights()):
    """Reconstruction loss through freshly generated noise, and the generator's objective."""
    recon = recon_loss(loss, x, denoiser(blend(x, noisegen(z), _alpha_tensor(alpha, x))))
    return recon, minimax_objective(recon, weights)[1]


def denoise_objective(denoiser, noise, x, alpha, loss="ffl", weights=LossWeights()):
    """Reconstruction loss against a fixed noise image, and the denoiser's objective."""
    recon = recon_loss(loss, x, denoiser(blend(x, noise, _alpha_tensor(alpha, x))))
    return recon, minimax_objective(recon, weights)[0]


def ascent_step(state: TrainState, x, z, alpha, loss="ffl", weights=LossWeights()):
    """Freeze the denoiser and push the noise generator up the reconstruction loss."""
    set_trainable(state.denoiser, False)
    set_trainable(state.noisegen, True)
    recon, objective = noise_objective(state.denoiser, state.noisegen, x, z, alpha, loss, weights)
    _check_finite(recon.item(), state, alpha, "noise-generator")
    norm = _update(state.noisegen, state.opt_noisegen, objective, state.optim.grad_clip)
    set_trainable(state.denoiser, True)
    return recon.item(), norm


def descent_step(state: TrainState, x, z, alpha, loss="ffl", weights=LossWeights()):
    """Freeze the noise generator, regenerate the noise and pull the denoiser down the loss."""
    set_trainable(state.noisegen, False)
    set_trainable(state.denoiser, True)
    with torch.no_grad():
        noise = state.noisegen(z)
    recon, objective = denoise_objective(state.denoiser, noise, x, alpha, loss, weights)
    _check_finite(recon.item(), state, alpha, "denoiser")
    norm = _update(state.denoiser, state.opt_denoiser, objective, state.optim.grad_clip)
    set_trainable(state.noisegen, True)
    return recon.item(), norm


def train_step(state: TrainState, x, rng=None, *, loss="ffl", weights=LossWeights(), alpha_policy=AlphaPolicy()):
    """One adversarial step on a clean batch ``x``.

    The noise generator moves first (ascent with the denoiser frozen); the
    denoiser then trains against noise regenerated by the updated generator
    from the same latent and blend weight.
    """
    if state.noisegen is None:
        raise TrainingError("train_step needs a noise generator; use train_baseline_step for fixed noise")
    rng = state.rng if rng is None else rng
    x = torch.as_tensor(x)
    alpha = sample_alpha(alpha_policy, rng, x.shape[0])
    z = sample_latent(x.shape[0], rng, _latent_width(state.noisegen)).to(x.dtype)
    pre, g_norm = ascent_step(state, x, z, alpha, loss, weights)
    post, d_norm = descent_step(state, x, z, alpha, loss, weights)
    state.step += 1
    alpha_log = float(np.mean(alpha))
    return state, StepStats(state.step, pre, post, alpha_log, d_norm, g_norm)


def train_baseline_step(state: TrainState, x, strategy: NoiseStrategy, rng=None, *, loss="ffl", weights=LossWeights()):
    """Single denoiser update against a fixed corruption (or none)."""
    if strategy.kind == "alcn":
        raise TrainingError("strategy 'alcn' is trained with train_step")
    rng = state.rng if rng is None else rng
    x = torch.as_tensor(x)
    x_in = corruption.apply_strategy(strategy, x, rng)
    set_trainable(state.denoiser, True)
    x_rec = state.denoiser(x_in)
    value = recon_loss(loss, x, x_rec)
    _check_finite(value.item(), state, 1.0, "denoiser")
    denoiser_obj, _ = minimax_objective(value, weights)
    d_norm = _update(state.denoiser, state.opt_denoiser, denoiser_obj, state.optim.grad_clip)
    state.step += 1
    # no blend happens here; alpha=1 is the clean-input limit
    return state, StepStats(state.step, value.item(), value.item(), 1.0, d_norm, 0.0)


@dataclass
class FitConfig:
    """The subset of the experiment configuration the training loop reads."""

    strategy: NoiseStrategy = field(default_factory=NoiseStrategy)
    loss: str = "ffl"
    weights: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    epochs: int = 50
    batch_size: int = 128
    seed: int = 0
    latent_dim: int = 128
    channel_widths: tuple | None = None
    config_hash: str = ""


def build_state(cfg: FitConfig, channels, resolution) -> TrainState:
    extra = {"latent_dim": cfg.latent_dim}
    if cfg.channel_widths:
        extra["channel_widths"] = tuple(cfg.channel_widths)
    d_arch = ArchSpec.for_resolution("denoiser", channels, resolution, **extra)
    g_arch = None
    if cfg.strategy.kind == "alcn":
        g_arch = ArchSpec.for_resolution("noise_generator", channels, resolution, **extra)
    return init_state(d_arch, g_arch, cfg.optim, cfg.seed, cfg.config_hash)


def validation_loss(denoiser, images, batch_size=256, limit=512) -> float:
    """Mean clean-input L2 reconstruction error over (a prefix of) ``images``."""
    images = images[:limit]
    if len(images) == 0:
        return float("nan")
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = torch.from_numpy(images[i:i + batch_size])
            total += float(((denoiser(x) - x) ** 2).flatten(1).mean(1).sum())
    return total / len(images)


def fit(cfg: FitConfig, split: ProtocolSplit, state: TrainState | None = None, on_step=None, on_epoch=None):
    """Run ``cfg.epochs`` passes over the normal training images.

    ``on_step(state, stats)`` fires after each step and ``on_epoch(state,
    epoch, val_loss)`` after each epoch; the CLI hooks logging and
    checkpointing in through them.
    """
    c, h, _ = split.train.shape
    if state is None:
        state = build_state(cfg, c, h)
    arch = state.denoiser.arch
    if (arch.in_channels, arch.resolution) != (c, h):
        raise TrainingError(f"config expects {arch.in_channels}x{arch.resolution}px images, split has {c}x{h}px")
    plan = BatchPlan(min(cfg.batch_size, len(split.train)), shuffle=True, seed=cfg.seed, drop_last=False)
    held_out = split.normal_test().images
    history = []
    state.denoiser.train()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        for batch in make_batches(split.train, plan, epoch):
            x = torch.from_numpy(batch)
            if cfg.strategy.kind == "alcn":
                state, stats = train_step(
                    state, x, loss=cfg.loss, weights=cfg.weights, alpha_policy=cfg.strategy.alpha_policy
                )
            else:
                state, stats = train_baseline_step(state, x, cfg.strategy, loss=cfg.loss, weights=cfg.weights)
            history.append(stats)
            if on_step is not None:
                on_step(state, stats)
        val = validation_loss(state.denoiser, held_out)
        log.info("epoch %d/%d step %d val_l2 %.5f (%.1fs)", epoch + 1, cfg.epochs, state.step, val, time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(state, epoch, val)
    return state, history
