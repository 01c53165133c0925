"""Flat binary parameter checkpoints.

Byte layout (all integers little-endian, documented in README.md):

    magic    8 bytes  b"NOTECKPT"
    version  uint32   currently 1
    hdr_len  uint32   byte length of the JSON header
    header   hdr_len bytes of UTF-8 JSON:
             {"variant": str, "config_hash": str, "seed": int,
              "params": [{"name": str, "shape": [int, ...]}, ...]}
    data     for each param, in header order: row-major float64 LE values

The config hash is SHA-256 over the canonical (sorted-key, compact) JSON
of the model+experiment config, so evaluation can refuse checkpoints
built under a different configuration.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .tensor import Tensor

MAGIC = b"NOTECKPT"
VERSION = 1


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass
class Checkpoint:
    variant: str
    config_hash: str
    seed: int
    params: dict[str, np.ndarray]


def save_checkpoint(path: str, variant: str, cfg_hash: str, seed: int,
                    named_params: list[tuple[str, Tensor]]):
    header = {
        "variant": variant,
        "config_hash": cfg_hash,
        "seed": seed,
        "params": [{"name": name, "shape": list(t.shape)} for name, t in named_params],
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for _, t in named_params:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValidationError(f"{path} is not a checkpoint file (bad magic)")
        version, hdr_len = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ValidationError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(hdr_len).decode("utf-8"))
        params: dict[str, np.ndarray] = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ValidationError(f"checkpoint truncated while reading {entry['name']!r}")
            params[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return Checkpoint(header["variant"], header["config_hash"], header["seed"], params)


def restore_into(model, checkpoint: Checkpoint):
    """Copy checkpoint arrays into a freshly built model's tensors."""
    names = [name for name, _ in model.parameters()]
    missing = [n for n in names if n not in checkpoint.params]
    extra = [n for n in checkpoint.params if n not in names]
    if missing or extra:
        raise ValidationError(f"checkpoint/model parameter mismatch: missing={missing} extra={extra}")
    for name, tensor in model.parameters():
        arr = checkpoint.params[name]
        if arr.shape != tensor.data.shape:
            raise ValidationError(f"parameter {name!r} shape {arr.shape} != model {tensor.data.shape}")
        tensor.data[...] = arr
