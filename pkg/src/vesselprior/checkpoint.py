"""Single-file network checkpoints.

Layout::

    b"VPCK" | uint32 version | uint32 header length | header (UTF-8 JSON) | payload

The header holds the model kind, the model config, free-form metadata and a
manifest of ``{path, shape, dtype}`` entries. The payload is every tensor in
manifest order as little-endian float32. Non-float buffers (batch-norm step
counters) are stored as float32 and cast back on load.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .architectures import ModelConfig, build_model
from .errors import ConfigError

MAGIC = b"VPCK"
VERSION = 1


@dataclass
class Checkpoint:
    kind: str
    model_config: ModelConfig
    state: dict[str, torch.Tensor]
    epoch: int = 0
    val_metric: float = float("nan")
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def model(self) -> nn.Module:
        net = build_model(self.kind, self.model_config)
        net.load_state_dict(self.state)
        return net.eval()


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    manifest, chunks = [], []
    for path, tensor in ckpt.state.items():
        arr = tensor.detach().cpu().numpy()
        manifest.append({"path": path, "shape": list(arr.shape), "dtype": str(arr.dtype)})
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    header = {
        "kind": ckpt.kind,
        "model_config": ckpt.model_config.to_text(),
        "epoch": ckpt.epoch,
        "val_metric": ckpt.val_metric,
        "config_hash": ckpt.config_hash,
        "extra": ckpt.extra,
        "tensors": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    return MAGIC + struct.pack("<II", VERSION, len(blob)) + blob + b"".join(chunks)


def decode_checkpoint(data: bytes) -> Checkpoint:
    if data[:4] != MAGIC:
        raise ConfigError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    header = json.loads(data[12 : 12 + hlen])
    buf = io.BytesIO(data[12 + hlen :])
    state = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        raw = buf.read(4 * count)
        if len(raw) != 4 * count:
            raise ConfigError(f"truncated checkpoint at {entry['path']}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(entry["dtype"])
        state[entry["path"]] = torch.from_numpy(arr.copy())
    return Checkpoint(
        kind=header["kind"],
        model_config=ModelConfig.from_text(header["model_config"]),
        state=state,
        epoch=header["epoch"],
        val_metric=header["val_metric"],
        config_hash=header["config_hash"],
        extra=header.get("extra", {}),
    )


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())


def from_model(model: nn.Module, **meta) -> Checkpoint:
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return Checkpoint(model.kind, model.config, state, **meta)
