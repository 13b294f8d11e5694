"""Single-file checkpoint container.

Layout: 8-byte magic, little-endian u32 header length, UTF-8 JSON header
(format version, model config, step, run metadata, RNG state, tensor index),
then the raw little-endian tensor payloads in index order. Tensor bytes round-
trip exactly, so a reloaded model reproduces forward outputs bit-for-bit.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import ConfigError
from .model import ModelConfig, ScobModel

MAGIC = b"SCOBCKP\x01"
FORMAT_VERSION = 1

_DTYPES = {
    "float32": (np.float32, torch.float32),
    "float64": (np.float64, torch.float64),
    "int64": (np.int64, torch.int64),
    "uint8": (np.uint8, torch.uint8),
}
_TORCH_NAMES = {torch.float32: "float32", torch.float64: "float64", torch.int64: "int64", torch.uint8: "uint8"}


@dataclass
class Checkpoint:
    format_version: int
    step: int
    model_config: ModelConfig
    meta: dict
    rng: dict
    tensors: dict[str, torch.Tensor]


def _collect_tensors(model: ScobModel, optimizer: Optional[torch.optim.Optimizer]) -> dict[str, torch.Tensor]:
    tensors: dict[str, torch.Tensor] = {}
    params = dict(model.named_parameters())
    for name, p in params.items():
        tensors[f"model/{name}"] = p.detach()
    if optimizer is not None:
        by_param = {id(p): name for name, p in params.items()}
        for p, state in optimizer.state.items():
            name = by_param.get(id(p))
            if name is None:
                continue
            for key, value in state.items():
                if isinstance(value, torch.Tensor):
                    tensors[f"optim/{name}/{key}"] = value.detach()
                else:
                    tensors[f"optim/{name}/{key}"] = torch.tensor(float(value), dtype=torch.float32)
    return tensors


def save_checkpoint(
    path,
    model: ScobModel,
    step: int,
    meta: Optional[dict] = None,
    optimizer: Optional[torch.optim.Optimizer] = None,
    rng: Optional[dict] = None,
) -> None:
    tensors = _collect_tensors(model, optimizer)
    index = []
    payloads = []
    for name in sorted(tensors):
        t = tensors[name].cpu().contiguous()
        dtype_name = _TORCH_NAMES.get(t.dtype)
        if dtype_name is None:
            raise ConfigError(f"tensor {name} has unsupported dtype {t.dtype}")
        np_dtype = _DTYPES[dtype_name][0]
        raw = t.numpy().astype(np_dtype, copy=False)
        blob = raw.astype(raw.dtype.newbyteorder("<"), copy=False).tobytes()
        index.append({"name": name, "dtype": dtype_name, "shape": list(t.shape), "nbytes": len(blob)})
        payloads.append(blob)
    header = {
        "format_version": FORMAT_VERSION,
        "step": int(step),
        "model_config": dataclasses.asdict(model.config),
        "meta": meta or {},
        "rng": rng or {},
        "tensors": index,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for blob in payloads:
            f.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ConfigError(f"{path}: not a checkpoint file (bad magic)")
        (header_len,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(header_len).decode("utf-8"))
        if header["format_version"] != FORMAT_VERSION:
            raise ConfigError(
                f"{path}: unsupported checkpoint format version {header['format_version']}"
            )
        tensors: dict[str, torch.Tensor] = {}
        for entry in header["tensors"]:
            np_dtype, torch_dtype = _DTYPES[entry["dtype"]]
            blob = f.read(entry["nbytes"])
            arr = np.frombuffer(blob, dtype=np.dtype(np_dtype).newbyteorder("<"))
            arr = arr.astype(np_dtype).reshape(entry["shape"])
            tensors[entry["name"]] = torch.from_numpy(arr.copy()).to(torch_dtype)
    return Checkpoint(
        format_version=header["format_version"],
        step=header["step"],
        model_config=ModelConfig(**header["model_config"]),
        meta=header["meta"],
        rng=header["rng"],
        tensors=tensors,
    )


def restore_model(ckpt: Checkpoint, model: ScobModel) -> None:
    params = dict(model.named_parameters())
    for name, p in params.items():
        key = f"model/{name}"
        if key not in ckpt.tensors:
            raise ConfigError(f"checkpoint missing tensor {key}")
        saved = ckpt.tensors[key]
        if tuple(saved.shape) != tuple(p.shape):
            raise ConfigError(f"tensor {key} shape mismatch: {tuple(saved.shape)} vs {tuple(p.shape)}")
        with torch.no_grad():
            p.copy_(saved.to(p.dtype))


def restore_optimizer(ckpt: Checkpoint, optimizer: torch.optim.Optimizer, model: ScobModel) -> None:
    for name, p in model.named_parameters():
        prefix = f"optim/{name}/"
        state = {
            key[len(prefix):]: tensor.clone()
            for key, tensor in ckpt.tensors.items()
            if key.startswith(prefix)
        }
        if state:
            optimizer.state[p] = state
