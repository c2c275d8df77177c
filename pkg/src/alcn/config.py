"""Experiment configuration: a flat mapping of dotted keys stored as sorted JSON.

Keys missing from a config file fall back to :data:`DEFAULTS`; CLI flags are
applied on top. ``seed`` has no default and must be given somewhere.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .corruption import AlphaPolicy, NoiseStrategy
from .losses import LossWeights
from .train import FitConfig, OptimConfig

DEFAULTS = {
    "name": None,
    "dataset.kind": "synth",
    "dataset.path": None,
    "dataset.category": None,
    "dataset.resolution": None,
    "dataset.channels": 3,
    "dataset.num_classes": 2,
    "dataset.per_class": 40,
    "dataset.seed": 0,
    "protocol.mode": "one_vs_rest",
    "protocol.target": None,
    "protocol.split_ratio": None,
    "protocol.manifest": None,
    "strategy.kind": "alcn",
    "strategy.p": 0.2,
    "strategy.sigma": 0.5,
    "strategy.alpha_low": 0.2,
    "strategy.alpha_high": 0.9,
    "strategy.per_sample_alpha": False,
    "loss.kind": "ffl",
    "loss.lambda0": 1.0,
    "loss.lambda1": 1.0,
    "optim.lr_denoiser": 1e-5,
    "optim.lr_noisegen": 8e-3,
    "optim.beta1": 0.9,
    "optim.beta2": 0.999,
    "optim.eps": 1e-8,
    "optim.grad_clip": None,
    "arch.latent_dim": 128,
    "arch.channel_widths": None,
    "train.epochs": 50,
    "train.batch_size": 4096,
    "train.log_every": 10,
    "train.checkpoint_every": 5,
    "eval.score_kind": "l2",
    "eval.batch_size": 256,
    "seed": None,
    "output_dir": None,
}

_DEFAULT_RESOLUTION = {"mnist": 28, "cifar10": 32, "folder": 256, "synth": 28}
_DEFAULT_RATIO = {"folder": 0.7}
# keys that do not change what gets trained
_UNHASHED = {"output_dir", "train.checkpoint_every", "train.log_every"}


class ConfigError(ValueError):
    pass


class ExperimentConfig(dict):
    """Flat ``dotted.key -> value`` mapping with typed views for each module."""

    @classmethod
    def from_sources(cls, path=None, overrides=None):
        values = dict(DEFAULTS)
        if path is not None:
            loaded = json.loads(Path(path).read_text(encoding="utf-8"))
            unknown = sorted(set(loaded) - set(DEFAULTS))
            if unknown:
                raise ConfigError(f"{path}: unknown config keys {unknown}")
            values.update(loaded)
        for key, value in (overrides or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            if value is not None:
                values[key] = value
        cfg = cls(values)
        cfg.fill_defaults()
        return cfg

    def fill_defaults(self):
        kind = self["dataset.kind"]
        if self["dataset.resolution"] is None:
            self["dataset.resolution"] = _DEFAULT_RESOLUTION.get(kind, 28)
        if self["protocol.split_ratio"] is None:
            self["protocol.split_ratio"] = _DEFAULT_RATIO.get(kind, 0.8)
        if self["name"] is None:
            self["name"] = self.strategy().label

    def validate(self, check_paths=True):
        if self["seed"] is None:
            raise ConfigError("a seed is required (config key 'seed' or --seed)")
        kind = self["dataset.kind"]
        if kind not in _DEFAULT_RESOLUTION:
            raise ConfigError(f"dataset.kind must be one of {sorted(_DEFAULT_RESOLUTION)}, got {kind!r}")
        if kind != "synth" and not self["dataset.path"]:
            raise ConfigError(f"dataset.path is required for dataset.kind={kind}")
        if check_paths:
            for key in ("dataset.path", "protocol.manifest"):
                if self[key] and not Path(self[key]).exists():
                    raise ConfigError(f"{key}: {self[key]} does not exist")
        if int(self["train.epochs"]) < 0 or int(self["train.batch_size"]) < 1:
            raise ConfigError("train.epochs must be >= 0 and train.batch_size >= 1")
        # constructing the typed views runs their own checks
        try:
            self.fit_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def dataset_spec(self) -> dict:
        kind = self["dataset.kind"]
        spec = {"kind": kind}
        if kind == "synth":
            spec.update(
                num_classes=int(self["dataset.num_classes"]),
                per_class=int(self["dataset.per_class"]),
                resolution=int(self["dataset.resolution"]),
                seed=int(self["dataset.seed"]),
            )
        else:
            spec["path"] = str(Path(self["dataset.path"]).resolve())
        if kind == "folder":
            spec.update(
                category=self["dataset.category"],
                resolution=int(self["dataset.resolution"]),
                channels=int(self["dataset.channels"]),
            )
        return spec

    def strategy(self) -> NoiseStrategy:
        return NoiseStrategy(
            kind=self["strategy.kind"],
            p=float(self["strategy.p"]),
            sigma=float(self["strategy.sigma"]),
            alpha_policy=AlphaPolicy(
                float(self["strategy.alpha_low"]),
                float(self["strategy.alpha_high"]),
                bool(self["strategy.per_sample_alpha"]),
            ),
        )

    def fit_config(self) -> FitConfig:
        clip = self["optim.grad_clip"]
        widths = self["arch.channel_widths"]
        return FitConfig(
            strategy=self.strategy(),
            loss=self["loss.kind"],
            weights=LossWeights(float(self["loss.lambda0"]), float(self["loss.lambda1"])),
            optim=OptimConfig(
                lr_denoiser=float(self["optim.lr_denoiser"]),
                lr_noisegen=float(self["optim.lr_noisegen"]),
                beta1=float(self["optim.beta1"]),
                beta2=float(self["optim.beta2"]),
                eps=float(self["optim.eps"]),
                grad_clip=float(clip) if clip is not None else None,
            ),
            epochs=int(self["train.epochs"]),
            batch_size=int(self["train.batch_size"]),
            seed=int(self["seed"]),
            latent_dim=int(self["arch.latent_dim"]),
            channel_widths=tuple(int(w) for w in widths) if widths else None,
            config_hash=self.digest(),
        )

    def snapshot(self) -> str:
        return json.dumps(dict(sorted(self.items())), indent=1) + "\n"

    def digest(self) -> str:
        hashed = {k: v for k, v in sorted(self.items()) if k not in _UNHASHED}
        return hashlib.sha256(json.dumps(hashed, sort_keys=True).encode("utf-8")).hexdigest()


def parse_assignment(text):
    """``key=value`` with the value decoded as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"expected key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw
    return key.strip(), value
