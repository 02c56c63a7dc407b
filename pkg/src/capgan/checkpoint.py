"""Single-file checkpoint archive.

Layout::

    b"CAPGANCK" | u32 format version | u64 manifest length | manifest (UTF-8 JSON)
    | raw little-endian arrays | 32-byte SHA-256 of everything before it

The manifest holds the phase, step, config echo, bookkeeping counters and a
parameter table ``name -> (dtype, shape, offset, nbytes)`` into the array blob.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import torch

from .config import SCHEMA_VERSION, RunConfig
from .errors import (CheckpointCorruptError, CheckpointNotFoundError, ConfigError, IncompatibleVersionError,
                     InvalidCheckpointError)
from .models import ModelBundle

MAGIC = b"CAPGANCK"
FORMAT_VERSION = 1
PHASES = ("none", "phase1", "phase2")
RNG_KEY = "__rng_state__"

_HEADER = struct.Struct("<8sIQ")
_DIGEST = 32
_DTYPES = {torch.float32: "<f4", torch.int64: "<i8", torch.uint8: "|u1"}


@dataclass
class Checkpoint:
    config: RunConfig
    nets: ModelBundle
    phase: str = "none"
    step: int = 0
    rng_state: Optional[torch.Tensor] = None
    ema_steps: int = 0
    extra: Dict[str, Any] = field(default_factory=dict)

    def require_phase(self, *phases: str) -> None:
        if self.phase not in phases:
            raise InvalidCheckpointError(f"checkpoint phase is {self.phase!r}; this operation needs {' or '.join(phases)}")


def _tensor_table(ckpt: Checkpoint):
    tensors = dict(ckpt.nets.state_dict())
    if ckpt.rng_state is not None:
        tensors[RNG_KEY] = ckpt.rng_state
    return tensors


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    if ckpt.phase not in PHASES:
        raise InvalidCheckpointError(f"unknown phase {ckpt.phase!r}")
    table, chunks, offset = [], [], 0
    for name, t in _tensor_table(ckpt).items():
        t = t.detach().cpu()
        if t.dtype not in _DTYPES:
            raise InvalidCheckpointError(f"{name}: unsupported dtype {t.dtype}")
        raw = t.contiguous().numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        table.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "schema_version": ckpt.config.schema_version,
        "phase": ckpt.phase,
        "step": int(ckpt.step),
        "ema_steps": int(ckpt.ema_steps),
        "config": ckpt.config.to_dict(),
        "config_hash": ckpt.config.config_hash(),
        "extra": ckpt.extra,
        "tensors": table,
    }
    meta = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    body = _HEADER.pack(MAGIC, FORMAT_VERSION, len(meta)) + meta + b"".join(chunks)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body + hashlib.sha256(body).digest())
    tmp.replace(path)
    return path


def read_manifest(path) -> Dict[str, Any]:
    manifest, _ = _read(path)
    return manifest


def _read(path):
    path = Path(path)
    if not path.is_file():
        raise CheckpointNotFoundError(f"checkpoint {path} not found")
    blob = path.read_bytes()
    if len(blob) < _HEADER.size + _DIGEST:
        raise CheckpointCorruptError(f"{path}: file is truncated")
    magic, version, meta_len = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointCorruptError(f"{path}: not a checkpoint archive")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointCorruptError(f"{path}: checksum mismatch (truncated or modified file)")
    if version != FORMAT_VERSION:
        raise IncompatibleVersionError(f"{path}: archive format {version}, expected {FORMAT_VERSION}")
    start = _HEADER.size + meta_len
    manifest = json.loads(body[_HEADER.size:start].decode())
    return manifest, memoryview(body)[start:]


def load_checkpoint(path) -> Checkpoint:
    manifest, data = _read(path)
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise IncompatibleVersionError(
            f"{path}: schema_version {manifest.get('schema_version')} is not supported (expected {SCHEMA_VERSION})")
    phase = manifest["phase"]
    if phase not in PHASES:
        raise InvalidCheckpointError(f"{path}: unknown phase {phase!r}")
    try:
        cfg = RunConfig.from_dict(manifest["config"])
    except ConfigError as exc:
        raise InvalidCheckpointError(f"{path}: stored config is invalid ({exc})") from None

    tensors = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        dtype = np.dtype(entry["dtype"])
        if entry["nbytes"] != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise CheckpointCorruptError(f"{path}: {entry['name']} byte length does not match its shape")
        raw = data[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
        tensors[entry["name"]] = torch.from_numpy(arr)

    rng_state = tensors.pop(RNG_KEY, None)
    nets = ModelBundle(cfg, with_encoder=any(k.startswith("e.") for k in tensors))
    expected = set(nets.state_dict())
    if phase == "phase2" and not nets.has_encoder:
        raise InvalidCheckpointError(f"{path}: phase2 checkpoint without encoder parameters")
    missing, unexpected = sorted(expected - set(tensors)), sorted(set(tensors) - expected)
    if missing or unexpected:
        raise InvalidCheckpointError(f"{path}: parameter table mismatch; missing {missing[:5]}, unexpected {unexpected[:5]}")
    nets.load_state_dict(tensors, strict=True)
    return Checkpoint(cfg, nets, phase, manifest["step"], rng_state, manifest.get("ema_steps", 0),
                      manifest.get("extra", {}))
