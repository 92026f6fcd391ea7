import os
import json
import yaml
import struct
import numpy as np
import torch
import torch.nn as nn
from pathlib import Path
from constants import CHECKPOINT_MAGIC
from .errors import DimensionError, FormatError, InputError
from typing import Any, Dict


def save_json_file(data: Dict[str, Any], path: str, **kwargs):
    parent = Path(path).parent
    os.makedirs(parent, exist_ok=True)
    with open(path, "w") as f:
        json.dump(data, f, **kwargs)

def load_json_file(path: str, **kwargs) -> Dict[str, Any]:
    with open(path, "r") as f:
        data = json.load(f, **kwargs)
    return data

def save_yaml_file(data: Dict[str, Any], path: str, **kwargs):
    parent = Path(path).parent
    os.makedirs(parent, exist_ok=True)
    with open(path, "w") as f:
        yaml.safe_dump(data, f, **kwargs)

def load_yaml_file(path: str, **kwargs) -> Dict[str, Any]:
    with open(path, "r") as f:
        data = yaml.safe_load(f, **kwargs)
    return data


def save_checkpoint(tensors: Dict[str, torch.Tensor], path: str):
    """
    MDCK1 layout: the magic bytes, then one record per tensor:
    uint32 name length, utf-8 name, uint32 rank, rank x uint32 extents and the
    values as little-endian float32 in row-major order. All integers little-endian.
    """
    parent = Path(path).parent
    os.makedirs(parent, exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        for name, tensor in tensors.items():
            name_bytes = name.encode("utf-8")
            values     = tensor.detach().cpu().numpy().astype("<f4", copy=False)
            f.write(struct.pack("<I", len(name_bytes)))
            f.write(name_bytes)
            f.write(struct.pack("<I", values.ndim))
            f.write(struct.pack(f"<{values.ndim}I", *values.shape))
            f.write(np.ascontiguousarray(values).tobytes())
    os.replace(tmp_path, path)


def load_checkpoint(path: str) -> Dict[str, np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise FormatError(f"{path} is not an MDCK1 checkpoint", offset=0)

    tensors = {}
    offset  = len(CHECKPOINT_MAGIC)

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(raw):
            raise FormatError(f"{path} is truncated", offset=offset)
        chunk = raw[offset:offset + n]
        offset += n
        return chunk

    while offset < len(raw):
        (name_len, ) = struct.unpack("<I", take(4))
        name_offset  = offset
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{path} has a tensor name that is not utf-8", offset=name_offset)
        (rank, )     = struct.unpack("<I", take(4))
        shape        = struct.unpack(f"<{rank}I", take(4 * rank))
        count        = int(np.prod(shape)) if rank else 1
        values       = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
        tensors[name] = values.copy()
    return tensors


def module_state(module: nn.Module, prefix: str) -> Dict[str, torch.Tensor]:
    return {f"{prefix}.{name}": p for name, p in module.named_parameters()}


def load_module_state(module: nn.Module, tensors: Dict[str, np.ndarray], prefix: str, strict: bool=True):
    params = dict(module.named_parameters())
    with torch.no_grad():
        for name, p in params.items():
            key = f"{prefix}.{name}"
            if key not in tensors:
                raise InputError(f"checkpoint has no entry for {key}")
            value = tensors[key]
            if tuple(value.shape) != tuple(p.shape):
                raise DimensionError(f"{key} has shape {tuple(value.shape)} in checkpoint, model expects {tuple(p.shape)}")
            p.copy_(torch.from_numpy(value).to(dtype=p.dtype))
    if strict:
        expected = {f"{prefix}.{name}" for name in params}
        extra    = [k for k in tensors if k.startswith(f"{prefix}.") and k not in expected]
        if extra:
            raise DimensionError(f"checkpoint has entries the model does not define: {extra[:5]}")


def has_prefix(tensors: Dict[str, Any], prefix: str) -> bool:
    return any(k.startswith(f"{prefix}.") for k in tensors)
