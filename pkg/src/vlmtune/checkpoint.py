"""Binary checkpoint format: header + named little-endian tensors.

Layout: magic, format version, a JSON header (model config, plan string,
arbitrary extras), then a tensor count followed by records of
{name, dtype tag, shape, row-major payload}. Everything multi-byte is
little-endian. Adapter tensors keep their reserved ``peft/`` name prefix,
which makes adapter-only export a name filter.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ModelConfig
from .errors import CheckpointMismatchError, ConfigError
from .model import VLModel

MAGIC = b"VLMT"
FORMAT_VERSION = 1

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def save_tensors(path, tensors: dict[str, np.ndarray], config: ModelConfig,
                 extras: Optional[dict] = None):
    """Write named arrays plus the config header to ``path``."""
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": config.to_dict(),
        "extras": extras or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            nb = name.encode("utf-8")
            if arr.dtype not in _DTYPE_TAGS:
                raise ConfigError(f"cannot serialize dtype {arr.dtype} for {name!r}")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", _DTYPE_TAGS[arr.dtype]))
            f.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<Q", dim))
            f.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back the named arrays and the JSON header."""
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CheckpointMismatchError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != FORMAT_VERSION:
            raise CheckpointMismatchError(
                f"{path}: format version {version}, expected {FORMAT_VERSION}")
        (blen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(blen).decode("utf-8"))
        (count,) = struct.unpack("<I", f.read(4))
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            (tag,) = struct.unpack("<B", f.read(1))
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = tuple(struct.unpack("<Q", f.read(8))[0] for _ in range(ndim))
            dtype = _TAG_DTYPES[tag].newbyteorder("<")
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(f.read(n * dtype.itemsize), dtype=dtype).reshape(shape)
            tensors[name] = arr.astype(_TAG_DTYPES[tag])
    return tensors, header


def save_model(path, model: VLModel, extras: Optional[dict] = None,
               optimizer=None, adapter_only: bool = False):
    """Serialize model weights (optionally adapters only) and optimizer state."""
    tensors = {}
    for name, t in model.named_parameters():
        if adapter_only and not name.startswith("peft/"):
            continue
        tensors[name] = t.data
    ex = dict(extras or {})
    if model.applied_plan is not None:
        ex.setdefault("plan", str(model.applied_plan))
    ex["adapter_only"] = adapter_only
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
        ex["optimizer"] = optimizer.state_scalars()
    save_tensors(path, tensors, model.cfg, ex)


def _config_mismatches(saved: dict, current: dict) -> list[str]:
    keys = sorted(set(saved) | set(current))
    return [f"{k}: checkpoint={saved.get(k)!r} model={current.get(k)!r}"
            for k in keys if saved.get(k) != current.get(k)]


def load_model(path, model: VLModel, strict: bool = True) -> dict:
    """Load weights into ``model``; configs must match field-for-field.

    Returns the header extras (plan string, optimizer scalars, ...).
    With ``strict`` every model tensor must be present unless the
    checkpoint is an adapter-only export, which only fills ``peft/`` names.
    """
    tensors, header = load_tensors(path)
    mism = _config_mismatches(header["model_config"], model.cfg.to_dict())
    if mism:
        raise CheckpointMismatchError(
            "checkpoint config does not match model: " + "; ".join(mism))
    adapter_only = header["extras"].get("adapter_only", False)
    loaded = 0
    for name, t in model.named_parameters():
        if name not in tensors:
            if adapter_only and not name.startswith("peft/"):
                continue
            if strict:
                raise CheckpointMismatchError(f"checkpoint missing tensor {name!r}")
            continue
        arr = tensors[name]
        if arr.shape != t.data.shape:
            raise CheckpointMismatchError(
                f"tensor {name!r} shape {arr.shape} != model shape {t.data.shape}")
        t.data = arr.astype(t.data.dtype, copy=True)
        loaded += 1
    if loaded == 0:
        raise CheckpointMismatchError("checkpoint contained no loadable tensors")
    return header["extras"], tensors


def optimizer_state_from(tensors: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v for k, v in tensors.items() if k.startswith("opt/")}
