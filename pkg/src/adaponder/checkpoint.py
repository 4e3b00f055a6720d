"""Versioned binary checkpoints.

Layout::

    b"PLM3" | uint32 LE version | uint64 LE header length | UTF-8 JSON header | payload

The header holds the model config, ponder settings and a tensor manifest
(``name -> {"shape", "offset"}``); the payload is the concatenation of all
tensors as little-endian float32 in manifest order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .config import ModelConfig, PonderSettings, from_dict, to_dict
from .errors import CheckpointFormatError, ConfigConflictError, ConfigError
from .model import PonderTransformer

MAGIC = b"PLM3"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


@dataclass
class Checkpoint:
    model_config: ModelConfig
    ponder: PonderSettings
    tensors: dict[str, torch.Tensor]
    extra: dict[str, Any] = field(default_factory=dict)

    def build_model(self) -> PonderTransformer:
        model = PonderTransformer(self.model_config, self.ponder.max_steps)
        expected = model.state_dict()
        for name, ref in expected.items():
            if name not in self.tensors:
                raise CheckpointFormatError(f"tensor {name!r} missing from checkpoint")
            if tuple(self.tensors[name].shape) != tuple(ref.shape):
                raise CheckpointFormatError(
                    f"tensor {name!r} has shape {tuple(self.tensors[name].shape)}, "
                    f"model expects {tuple(ref.shape)}"
                )
        unexpected = sorted(set(self.tensors) - set(expected))
        if unexpected:
            raise CheckpointFormatError(f"unexpected tensor {unexpected[0]!r} in checkpoint")
        model.load_state_dict(self.tensors)
        model.eval()
        return model


def save_checkpoint(model: PonderTransformer, ponder: PonderSettings, path: str | Path,
                    extra: dict[str, Any] | None = None) -> None:
    manifest = {}
    blobs = []
    offset = 0
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4", copy=False)
        manifest[name] = {"shape": list(arr.shape), "offset": offset}
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "model_config": to_dict(model.cfg),
        "ponder_settings": to_dict(ponder),
        "tensors": manifest,
        "payload_bytes": offset,
        "extra": extra or {},
    }
    # insertion order keeps the manifest in payload order
    head = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def read_header(path: str | Path) -> tuple[dict[str, Any], bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointFormatError("file too short for a checkpoint header")
    magic, version, head_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic bytes {magic!r}")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size
    if len(raw) < start + head_len:
        raise CheckpointFormatError("truncated header")
    try:
        header = json.loads(raw[start : start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable header: {exc}") from None
    return header, raw[start + head_len :]


def load_checkpoint(path: str | Path, max_steps: int | None = None) -> Checkpoint:
    """Read a checkpoint; ``max_steps`` asserts the stored K matches."""
    header, payload = read_header(path)
    try:
        cfg = from_dict(ModelConfig, header["model_config"], "model")
        ponder = from_dict(PonderSettings, header["ponder_settings"], "ponder")
        manifest = header["tensors"]
    except KeyError as exc:
        raise CheckpointFormatError(f"header is missing {exc}") from None
    except ConfigError as exc:
        raise CheckpointFormatError(f"header holds an invalid config: {exc}") from None
    if max_steps is not None and max_steps != ponder.max_steps:
        raise ConfigConflictError(
            f"checkpoint has ponder.max_steps={ponder.max_steps}, requested {max_steps}"
        )
    tensors = {}
    for name, entry in manifest.items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        begin = entry["offset"]
        end = begin + 4 * count
        if end > len(payload):
            raise CheckpointFormatError(f"payload truncated inside tensor {name!r}")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=begin).reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    return Checkpoint(cfg, ponder, tensors, extra=header.get("extra", {}))
