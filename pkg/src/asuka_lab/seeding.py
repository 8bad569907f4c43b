"""Seed streams.

Every random draw in a run descends from one root seed.  A stream is
addressed by a tuple of non-negative integer keys; the split rule is
``numpy.random.SeedSequence(root, spawn_key=keys)`` so that
``stream(root, worker_index)`` gives independent per-worker generators.
"""

from __future__ import annotations

import zlib

import numpy as np
import torch


def _key(k: int | str) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode())
    if k < 0:
        raise ValueError(f"stream keys must be non-negative, got {k}")
    return int(k)


def stream(root: int, *keys: int | str) -> np.random.Generator:
    """Return the numpy generator for ``(root, *keys)``."""
    ss = np.random.SeedSequence(int(root), spawn_key=tuple(_key(k) for k in keys))
    return np.random.default_rng(ss)


def torch_generator(rng: np.random.Generator) -> torch.Generator:
    """Derive a torch CPU generator from a numpy generator (consumes one draw)."""
    g = torch.Generator()
    g.manual_seed(int(rng.integers(0, 2**63 - 1)))
    return g
