"""The two networks: a convolutional denoising autoencoder and a noise generator
that maps a 256-wide Gaussian latent to a sigmoid-bounded image.

Down-sampling stages are stride-2, kernel-3, padding-1 convolutions, so each
stage maps a side ``s`` to ``ceil(s / 2)``; the transposed stages pick
``output_padding`` to land back on the exact encoder sizes. That is what lets
28x28 inputs run through three stages (28 -> 14 -> 7 -> 4).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .corruption import NOISE_LATENT_DIM

KINDS = ("denoiser", "noise_generator")


@dataclass(frozen=True)
class ArchSpec:
    kind: str = "denoiser"
    in_channels: int = 1
    resolution: int = 28
    latent_dim: int = 128
    noise_latent_dim: int = NOISE_LATENT_DIM
    channel_widths: tuple = (32, 64, 128)
    negative_slope: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "channel_widths", tuple(int(w) for w in self.channel_widths))
        if self.kind not in KINDS:
            raise ValueError(f"arch kind must be one of {KINDS}, got {self.kind!r}")
        if self.in_channels not in (1, 3):
            raise ValueError(f"in_channels must be 1 or 3, got {self.in_channels}")
        if not self.channel_widths:
            raise ValueError("channel_widths must name at least one stage")
        if self.resolution < 2 ** len(self.channel_widths):
            raise ValueError(
                f"unsupported resolution {self.resolution}: {len(self.channel_widths)} stride-2 stages "
                f"need at least {2 ** len(self.channel_widths)} pixels per side"
            )

    @property
    def sizes(self) -> list[int]:
        """Spatial side after each encoder stage, input first."""
        out = [self.resolution]
        for _ in self.channel_widths:
            out.append((out[-1] + 1) // 2)
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_widths"] = list(self.channel_widths)
        return d

    @classmethod
    def for_resolution(cls, kind, in_channels, resolution, **overrides):
        """Default widths: three stages up to 32px, five stages beyond."""
        if "channel_widths" not in overrides:
            overrides["channel_widths"] = (32, 64, 128) if resolution <= 64 else (16, 32, 64, 128, 128)
        return cls(kind=kind, in_channels=in_channels, resolution=resolution, **overrides)


class _Decoder(nn.Module):
    """Dense projection from a vector, then mirrored transposed convolutions."""

    def __init__(self, arch: ArchSpec, in_features: int):
        super().__init__()
        widths = arch.channel_widths
        sizes = arch.sizes
        self.slope = arch.negative_slope
        self.start = (widths[-1], sizes[-1], sizes[-1])
        self.project = nn.Linear(in_features, widths[-1] * sizes[-1] ** 2)
        outs = list(widths[-2::-1]) + [arch.in_channels]
        ups = []
        for i, (c_in, c_out) in enumerate(zip(widths[::-1], outs)):
            target = sizes[-2 - i]
            pad = 1 if target % 2 == 0 else 0
            ups.append(nn.ConvTranspose2d(c_in, c_out, 3, stride=2, padding=1, output_padding=pad))
        self.ups = nn.ModuleList(ups)

    def forward(self, h):
        h = F.leaky_relu(self.project(h), self.slope).view(-1, *self.start)
        for i, up in enumerate(self.ups):
            h = up(h)
            if i < len(self.ups) - 1:
                h = F.leaky_relu(h, self.slope)
        return torch.sigmoid(h)


class Denoiser(nn.Module):
    def __init__(self, arch: ArchSpec):
        super().__init__()
        self.arch = arch
        self.slope = arch.negative_slope
        chans = (arch.in_channels,) + arch.channel_widths
        self.downs = nn.ModuleList(
            nn.Conv2d(c_in, c_out, 3, stride=2, padding=1) for c_in, c_out in zip(chans[:-1], chans[1:])
        )
        side = arch.sizes[-1]
        self.bottleneck = nn.Linear(arch.channel_widths[-1] * side * side, arch.latent_dim)
        self.decoder = _Decoder(arch, arch.latent_dim)

    def forward(self, x):
        expected = (self.arch.in_channels, self.arch.resolution, self.arch.resolution)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ValueError(f"denoiser expects (B, {expected[0]}, {expected[1]}, {expected[2]}), got {tuple(x.shape)}")
        h = x
        for down in self.downs:
            h = F.leaky_relu(down(h), self.slope)
        z = F.leaky_relu(self.bottleneck(h.flatten(1)), self.slope)
        return self.decoder(z)


class NoiseGenerator(nn.Module):
    def __init__(self, arch: ArchSpec):
        super().__init__()
        self.arch = arch
        self.decoder = _Decoder(arch, arch.noise_latent_dim)

    def forward(self, z):
        if z.dim() != 2 or z.shape[1] != self.arch.noise_latent_dim:
            raise ValueError(f"noise generator expects (B, {self.arch.noise_latent_dim}) latents, got {tuple(z.shape)}")
        return self.decoder(z)


def init_params(arch: ArchSpec, seed=0) -> nn.Module:
    """Build a network with He-uniform weights (leaky-ReLU gain) and zero biases."""
    net = Denoiser(arch) if arch.kind == "denoiser" else NoiseGenerator(arch)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in net.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                nn.init.kaiming_uniform_(p, a=arch.negative_slope, nonlinearity="leaky_relu", generator=gen)
    return net


def forward_denoiser(net: Denoiser, x):
    return net(x)


def forward_noise_generator(net: NoiseGenerator, z):
    return net(z)


def count_parameters(params) -> int:
    """Total element count of a module or a name -> tensor mapping."""
    if isinstance(params, nn.Module):
        tensors = params.parameters()
    else:
        tensors = params.values()
    return sum(t.numel() for t in tensors)


def set_trainable(net: nn.Module, flag: bool) -> None:
    for p in net.parameters():
        p.requires_grad_(flag)
