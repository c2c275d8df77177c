"""Reconstruction losses (pixel L2, focal frequency loss) and the minimax weighting."""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class LossWeights:
    lambda0: float = 1.0  # denoiser term
    lambda1: float = 1.0  # noise-generator term

    def __post_init__(self):
        if self.lambda0 < 0 or self.lambda1 < 0:
            raise ValueError("loss weights must be >= 0")
        if self.lambda0 == 0 and self.lambda1 == 0:
            raise ValueError("lambda0 and lambda1 cannot both be zero")


def _check_pair(x, x_rec):
    if x.shape != x_rec.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_rec.shape)}")


def dft2(image: torch.Tensor) -> torch.Tensor:
    """Orthonormal 2-D DFT over the last two axes (complex output)."""
    if not torch.isfinite(image).all():
        raise ValueError("dft2 input contains non-finite values")
    return torch.fft.fft2(image, norm="ortho")


def l2(x, x_rec, reduce=True):
    """Mean squared error; ``reduce=False`` gives one value per image."""
    _check_pair(x, x_rec)
    err = (x - x_rec) ** 2
    if reduce:
        return err.mean()
    return err.flatten(1).mean(1)


def ffl(x, x_rec, focal=True, reduce=True):
    """Focal frequency loss.

    Squared complex distance between the spectra of ``x`` and ``x_rec``,
    averaged over channels and frequency bins. With ``focal`` each bin is
    weighted by its own spectrum gap divided by the per-image maximum gap;
    the weight is detached so it only rescales the gradient.
    """
    _check_pair(x, x_rec)
    diff = dft2(x) - dft2(x_rec)
    dist = diff.real**2 + diff.imag**2
    if focal:
        with torch.no_grad():
            mag = dist.sqrt()
            peak = mag.flatten(1).amax(1).clamp_min(1e-12)
            w = mag / peak.view(-1, *([1] * (mag.dim() - 1)))
        dist = w * dist
    if reduce:
        return dist.mean()
    return dist.flatten(1).mean(1)


RECON_LOSSES = {
    "l2": lambda x, r, reduce=True: l2(x, r, reduce),
    "ffl": lambda x, r, reduce=True: ffl(x, r, True, reduce),
    "ffl_plain": lambda x, r, reduce=True: ffl(x, r, False, reduce),
}


def recon_loss(kind, x, x_rec, reduce=True):
    try:
        fn = RECON_LOSSES[kind]
    except KeyError:
        raise ValueError(f"unknown loss {kind!r}; expected one of {sorted(RECON_LOSSES)}") from None
    return fn(x, x_rec, reduce)


def minimax_objective(recon, weights: LossWeights):
    """Split one reconstruction loss into (denoiser, noise generator) objectives.

    Both are minimized; the negated noise-generator term turns its descent step
    into ascent on the reconstruction error.
    """
    return weights.lambda0 * recon, -weights.lambda1 * recon
