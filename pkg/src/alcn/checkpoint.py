"""Binary checkpoint container for a :class:`~alcn.train.TrainState`.

Layout (all integers little-endian)::

    magic        8 bytes   b"ALCNCKPT"
    version      u32
    config hash  32 bytes  sha256 digest of the config snapshot (zeros if none)
    meta length  u32, then that many bytes of UTF-8 JSON
    tensor count u32, then per tensor:
        name length u16, name (UTF-8)
        dtype tag   u8   (1 = float32)
        ndim        u8,  then ndim x u32 dims
        payload     prod(dims) x float32 little-endian
    checksum     32 bytes  sha256 of everything above

Files are written to a temporary sibling and renamed into place.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import warnings
from pathlib import Path

import numpy as np
import torch

from .model import ArchSpec, init_params
from .train import OptimConfig, TrainState, make_optimizer

MAGIC = b"ALCNCKPT"
VERSION = 1
DTYPE_F32 = 1
_DIGEST = 32


class CheckpointError(Exception):
    code = "format"


class CheckpointVersionError(CheckpointError):
    code = "version"


class CheckpointDigestError(CheckpointError):
    code = "digest"


class CheckpointTruncatedError(CheckpointError):
    code = "truncated"


class ConfigMismatchError(CheckpointError):
    code = "config_mismatch"


def _hash_bytes(config_hash: str) -> bytes:
    if not config_hash:
        return bytes(_DIGEST)
    raw = bytes.fromhex(config_hash)
    if len(raw) != _DIGEST:
        raise ValueError("config_hash must be a sha256 hex digest")
    return raw


def _tensor_records(state: TrainState):
    nets = {"denoiser": (state.denoiser, state.opt_denoiser), "noisegen": (state.noisegen, state.opt_noisegen)}
    for tag, (net, opt) in nets.items():
        if net is None:
            continue
        for name, p in net.named_parameters():
            yield f"{tag}/{name}", p.detach()
        params = dict(net.named_parameters())
        for name, p in params.items():
            st = opt.state.get(p)
            if not st:
                continue
            for key in ("exp_avg", "exp_avg_sq", "step"):
                yield f"opt/{tag}/{name}/{key}", torch.as_tensor(st[key]).detach()


def _metadata(state: TrainState, extra):
    meta = {
        "step": state.step,
        "rng_state": state.rng.bit_generator.state,
        "optim": {k: getattr(state.optim, k) for k in ("lr_denoiser", "lr_noisegen", "beta1", "beta2", "eps", "grad_clip")},
        "denoiser_arch": state.denoiser.arch.to_dict(),
        "noisegen_arch": state.noisegen.arch.to_dict() if state.noisegen is not None else None,
    }
    if extra:
        meta["extra"] = extra
    return meta


def dumps_checkpoint(state: TrainState, extra=None) -> bytes:
    meta = json.dumps(_metadata(state, extra), sort_keys=True).encode("utf-8")
    records = list(_tensor_records(state))
    parts = [MAGIC, struct.pack("<I", VERSION), _hash_bytes(state.config_hash), struct.pack("<I", len(meta)), meta,
             struct.pack("<I", len(records))]
    for name, t in records:
        arr = np.ascontiguousarray(t.cpu().numpy(), dtype="<f4")
        bname = name.encode("utf-8")
        parts.append(struct.pack("<H", len(bname)) + bname)
        parts.append(struct.pack("<BB", DTYPE_F32, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(state: TrainState, path, extra=None) -> Path:
    path = Path(path)
    blob = dumps_checkpoint(state, extra)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, buf, end):
        self.buf, self.pos, self.end = buf, 0, end

    def take(self, n):
        if self.pos + n > self.end:
            raise CheckpointTruncatedError(f"checkpoint ends early: need {n} bytes at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_checkpoint(blob: bytes):
    """Validate and decode a checkpoint into (config_hash, metadata, tensors)."""
    if len(blob) < len(MAGIC) + 4:
        raise CheckpointTruncatedError("checkpoint shorter than its header")
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not an ALCN checkpoint (bad magic bytes)")
    (version,) = struct.unpack("<I", blob[len(MAGIC):len(MAGIC) + 4])
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, this build reads {VERSION}")
    if len(blob) < len(MAGIC) + 4 + _DIGEST * 2 + 8:
        raise CheckpointTruncatedError("checkpoint shorter than its header")

    r = _Reader(blob, len(blob) - _DIGEST)
    r.take(len(MAGIC) + 4)
    cfg = r.take(_DIGEST)
    (meta_len,) = r.unpack("<I")
    meta_raw = r.take(meta_len)
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8", errors="replace")
        dtype, ndim = r.unpack("<BB")
        if dtype != DTYPE_F32:
            raise CheckpointError(f"tensor {name!r} has unknown dtype tag {dtype}")
        shape = r.unpack(f"<{ndim}I")
        payload = r.take(4 * int(np.prod(shape, dtype=np.int64)))
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if r.pos != r.end:
        raise CheckpointTruncatedError(f"{r.end - r.pos} unexpected bytes before the checksum")
    if hashlib.sha256(blob[:-_DIGEST]).digest() != blob[-_DIGEST:]:
        raise CheckpointDigestError("checkpoint checksum mismatch; file is corrupted")
    try:
        meta = json.loads(meta_raw.decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"unreadable metadata block: {exc}") from None
    config_hash = "" if cfg == bytes(_DIGEST) else cfg.hex()
    return config_hash, meta, tensors


def _restore(net, opt, tag, tensors):
    with torch.no_grad():
        for name, p in net.named_parameters():
            key = f"{tag}/{name}"
            if key not in tensors:
                raise CheckpointError(f"checkpoint lacks tensor {key!r}")
            p.copy_(torch.from_numpy(tensors[key]))
    for name, p in net.named_parameters():
        prefix = f"opt/{tag}/{name}/"
        if prefix + "exp_avg" not in tensors:
            continue
        opt.state[p] = {
            "step": torch.from_numpy(tensors[prefix + "step"]).reshape(()),
            "exp_avg": torch.from_numpy(tensors[prefix + "exp_avg"]),
            "exp_avg_sq": torch.from_numpy(tensors[prefix + "exp_avg_sq"]),
        }


def load_checkpoint(path, expected_config_hash=None, force=False) -> TrainState:
    """Rebuild a training state.

    A config hash differing from ``expected_config_hash`` always warns and
    raises :class:`ConfigMismatchError` unless ``force`` is set.
    """
    path = Path(path)
    config_hash, meta, tensors = parse_checkpoint(path.read_bytes())
    if expected_config_hash is not None and expected_config_hash != config_hash:
        msg = f"{path}: written under config {config_hash[:12] or '<none>'}, expected {expected_config_hash[:12]}"
        warnings.warn(msg, stacklevel=2)
        if not force:
            raise ConfigMismatchError(msg + " (pass force=True / --force to override)")

    optim = OptimConfig(**meta["optim"])
    denoiser = init_params(ArchSpec(**meta["denoiser_arch"]), 0)
    opt_d = make_optimizer(denoiser, optim.lr_denoiser, optim)
    _restore(denoiser, opt_d, "denoiser", tensors)
    noisegen = opt_g = None
    if meta.get("noisegen_arch"):
        noisegen = init_params(ArchSpec(**meta["noisegen_arch"]), 0)
        opt_g = make_optimizer(noisegen, optim.lr_noisegen, optim)
        _restore(noisegen, opt_g, "noisegen", tensors)

    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    return TrainState(
        denoiser=denoiser, noisegen=noisegen, opt_denoiser=opt_d, opt_noisegen=opt_g,
        rng=rng, step=int(meta["step"]), config_hash=config_hash, optim=optim,
    )


def checkpoint_metadata(path) -> dict:
    return parse_checkpoint(Path(path).read_bytes())[1]
