"""Checkpoint format shared by every trained component.

A checkpoint is a directory holding ``header.json`` (tensor names, shapes,
dtypes, byte offsets, config hash) and ``tensors.bin`` (raw little-endian
tensor bytes concatenated in header order).  Both files are written without
timestamps, so saving the same weights twice gives byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

HEADER = "header.json"
BLOB = "tensors.bin"


class FrozenViolationError(RuntimeError):
    """A component that must stay frozen changed during training."""


def config_hash(config: Mapping | None) -> str:
    blob = json.dumps(config or {}, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _to_numpy(t: torch.Tensor) -> np.ndarray:
    a = t.detach().cpu().contiguous().numpy()
    return a.astype(a.dtype.newbyteorder("<"), copy=False)


def state_hash(state: Mapping[str, torch.Tensor]) -> str:
    """SHA-256 over names, shapes, dtypes and bytes of a state dict."""
    h = hashlib.sha256()
    for name in sorted(state):
        a = _to_numpy(state[name])
        h.update(name.encode())
        h.update(str(a.shape).encode())
        h.update(a.dtype.str.encode())
        h.update(a.tobytes())
    return h.hexdigest()


def module_hash(module: torch.nn.Module) -> str:
    return state_hash(module.state_dict())


def save_checkpoint(path: str | Path, state: Mapping[str, torch.Tensor], config: Mapping | None = None,
                    extra: Mapping | None = None) -> str:
    """Write ``state`` to directory ``path``; returns the blob's sha256."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name in sorted(state):
        a = _to_numpy(state[name])
        raw = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "dtype": a.dtype.str, "offset": offset,
                        "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    header = {"format": "asuka-lab-ckpt/1", "config_hash": config_hash(config), "config": config or {},
              "extra": extra or {}, "tensors": entries}
    (path / BLOB).write_bytes(blob)
    (path / HEADER).write_text(json.dumps(header, indent=1, sort_keys=True, default=str))
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    """Read a checkpoint; tensors come back bit-exact."""
    path = Path(path)
    header = json.loads((path / HEADER).read_text())
    blob = (path / BLOB).read_bytes()
    state = {}
    for e in header["tensors"]:
        a = np.frombuffer(blob, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                          offset=e["offset"]).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(a.copy())
    return state, header


def checkpoint_hash(path: str | Path) -> str:
    """Hash of the checkpoint directory contents (header + blob)."""
    path = Path(path)
    h = hashlib.sha256()
    for name in (HEADER, BLOB):
        h.update((path / name).read_bytes())
    return h.hexdigest()


def save_module(path: str | Path, module: torch.nn.Module, config: Mapping | None = None,
                extra: Mapping | None = None) -> str:
    return save_checkpoint(path, module.state_dict(), config, extra)


def load_module(path: str | Path, module: torch.nn.Module) -> dict:
    state, header = load_checkpoint(path)
    module.load_state_dict(state)
    return header
