"""Checkpoint file `model.fvc`: JSON header + raw little-endian tensors.

Layout: magic "FVCK", uint32 header length, UTF-8 JSON header, then every
parameter tensor's bytes in the order declared by param_shapes. The header
records the model config (including vocab layout), training step, sequence
layout kind, provenance (training seeds, codebook hash) and a content hash
over the tensor bytes, so loads verify integrity and reruns can assert
bit-identity.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from ..errors import DataError
from .model import ModelConfig, param_shapes

_MAGIC = b"FVCK"
_FORMAT = 1


def _tensor_bytes(params, cfg: ModelConfig) -> bytes:
    out = []
    for name in param_shapes(cfg):
        out.append(np.ascontiguousarray(params[name], dtype="<f4").tobytes())
    return b"".join(out)


def save_checkpoint(path, params, cfg: ModelConfig, step: int = 0,
                    extra: dict | None = None) -> None:
    body = _tensor_bytes(params, cfg)
    header = {
        "format": _FORMAT,
        "config": cfg.to_dict(),
        "step": step,
        "content_hash": hashlib.blake2b(body, digest_size=8).hexdigest(),
        "tensors": [{"name": n, "shape": list(s)}
                    for n, s in param_shapes(cfg).items()],
    }
    if extra:
        header.update(extra)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(body)


def load_checkpoint(path):
    """Returns (params, cfg, header)."""
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise DataError(f"{path}: not a flowcot checkpoint")
    (hlen,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8:8 + hlen].decode("utf-8"))
    if header.get("format") != _FORMAT:
        raise DataError(f"{path}: unsupported checkpoint format")
    cfg = ModelConfig.from_dict(header["config"])
    body = data[8 + hlen:]
    digest = hashlib.blake2b(body, digest_size=8).hexdigest()
    if digest != header["content_hash"]:
        raise DataError(f"{path}: content hash mismatch")
    params = {}
    off = 0
    for name, shape in param_shapes(cfg).items():
        count = int(np.prod(shape))
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=off)
        params[name] = arr.reshape(shape).astype(np.float32)
        off += count * 4
    if off != len(body):
        raise DataError(f"{path}: trailing bytes in tensor section")
    return params, cfg, header
