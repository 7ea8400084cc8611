"""Checkpoint format: a JSON manifest plus one little-endian IEEE-754 blob.

The manifest lists every array (parameters and, when present, optimizer
moments) with its name, shape, dtype and byte offset into ``weights.bin``.
Scalars (step counter, config, RNG state) live in the manifest itself.
Round-trips are bit-exact, so a resumed run reproduces the original one.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .model import ModelConfig
from .optim import OptimState
from .tensor import Tensor

MANIFEST_NAME = "manifest.json"
BLOB_NAME = "weights.bin"

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "<f4"
    if arr.dtype == np.float64:
        return "<f8"
    raise ValueError(f"unsupported array dtype {arr.dtype}")


def save_checkpoint(directory, params: dict, cfg: ModelConfig, step: int,
                    optim: OptimState | None = None, extra: dict | None = None):
    """Write manifest + blob into ``directory`` (created if needed)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    arrays: dict[str, np.ndarray] = {f"param.{k}": p.data for k, p in params.items()}
    if optim is not None:
        for k, arr in optim.m.items():
            arrays[f"optim.m.{k}"] = arr
        for k, arr in optim.v.items():
            arrays[f"optim.v.{k}"] = arr

    entries = []
    offset = 0
    blob_parts = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        tag = _dtype_tag(arr)
        raw = arr.astype(_DTYPES[tag], copy=False).tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": tag,
            "offset": offset,
            "nbytes": len(raw),
        })
        blob_parts.append(raw)
        offset += len(raw)

    manifest = {
        "schema": 1,
        "step": int(step),
        "config": cfg.to_dict(),
        "optim_t": None if optim is None else int(optim.t),
        "arrays": entries,
    }
    if extra:
        manifest["extra"] = extra
    (directory / BLOB_NAME).write_bytes(b"".join(blob_parts))
    (directory / MANIFEST_NAME).write_text(
        json.dumps(manifest, sort_keys=True, indent=1), encoding="utf-8"
    )


def load_checkpoint(directory):
    """Read a checkpoint; returns (params, cfg, step, optim_or_None, extra)."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("schema") != 1:
        raise ValueError(f"unsupported checkpoint schema {manifest.get('schema')!r}")
    blob = (directory / BLOB_NAME).read_bytes()

    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["arrays"]:
        dt = _DTYPES[entry["dtype"]]
        raw = blob[entry["offset"]: entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=dt).reshape(entry["shape"]).copy()
        arrays[entry["name"]] = arr

    cfg = ModelConfig.from_dict(manifest["config"])
    params: dict[str, Tensor] = {}
    for name, arr in arrays.items():
        if name.startswith("param."):
            params[name[len("param."):]] = Tensor(arr, requires_grad=True)

    optim = None
    if manifest.get("optim_t") is not None:
        optim = OptimState(
            m={n[len("optim.m."):]: a for n, a in arrays.items()
               if n.startswith("optim.m.")},
            v={n[len("optim.v."):]: a for n, a in arrays.items()
               if n.startswith("optim.v.")},
            t=int(manifest["optim_t"]),
        )
    return params, cfg, int(manifest["step"]), optim, manifest.get("extra")
