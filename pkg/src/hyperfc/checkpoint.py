"""JSON checkpoints that round-trip bit-exactly.

Floats are written with ``repr`` (shortest round-tripping form), so loading
returns identical bits. Arrays are stored row-major with shape and dtype.
No timestamps are written, so identical state gives an identical file.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .nets import Architecture, PolicyParams

FORMAT = "hyperfc.checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint."""


def encode(obj):
    """Recursively convert arrays and numpy scalars to JSON-safe values."""
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": list(obj.shape), "dtype": obj.dtype.str,
                "data": obj.ravel().tolist()}
    if isinstance(obj, dict):
        return {str(k): encode(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [encode(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def decode(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["data"], dtype=np.dtype(obj["dtype"])).reshape(obj["__ndarray__"])
        return {k: decode(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [decode(v) for v in obj]
    return obj


def arch_to_dict(arch: Architecture) -> dict:
    return {"tag": arch.tag, "obs_dim": arch.obs_dim, "lam_dim": arch.lam_dim,
            "act_dim": arch.act_dim, "hidden": list(arch.hidden),
            "hyper_hidden": list(arch.hyper_hidden)}


def arch_from_dict(d: dict) -> Architecture:
    return Architecture.from_tag(d["tag"], obs_dim=d["obs_dim"], lam_dim=d["lam_dim"],
                                 act_dim=d["act_dim"], hidden=tuple(d["hidden"]),
                                 hyper_hidden=tuple(d["hyper_hidden"]))


def dumps(params: PolicyParams, extra: dict | None = None) -> str:
    doc = {"format": FORMAT, "version": VERSION, "architecture": arch_to_dict(params.arch),
           "tensors": encode(params.tensors), "extra": encode(extra or {})}
    return json.dumps(doc, indent=None, separators=(",", ":"))


def loads(text: str):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"not a JSON checkpoint: {exc}") from None
    if doc.get("format") != FORMAT:
        raise CheckpointError("not a hyperfc checkpoint")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')}")
    try:
        arch = arch_from_dict(doc["architecture"])
        params = PolicyParams(arch, decode(doc["tensors"]))
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"incompatible checkpoint: {exc}") from None
    return params, decode(doc["extra"])


def save_checkpoint(path, params: PolicyParams, extra: dict | None = None):
    """Write atomically (temporary file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(dumps(params, extra))
    os.replace(tmp, path)


def load_checkpoint(path):
    return loads(Path(path).read_text())
