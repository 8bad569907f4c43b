"""Transformer pieces shared by the toy backbones and the alignment module."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


def sincos_2d(grid: int, dim: int) -> torch.Tensor:
    """Fixed 2-D sine/cosine embedding for a ``grid x grid`` patch layout, row-major."""
    assert dim % 4 == 0
    yy, xx = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64), indexing="ij")
    omega = 1.0 / 10000 ** (np.arange(dim // 4) / (dim // 4))
    parts = []
    for coord in (yy.ravel(), xx.ravel()):
        out = coord[:, None] * omega[None]
        parts += [np.sin(out), np.cos(out)]
    return torch.from_numpy(np.concatenate(parts, axis=1)).float()


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def rope_2d(x: torch.Tensor, ids: torch.Tensor, theta: float = 100.0) -> torch.Tensor:
    """Axial rotary embedding.  ``x``: (B, heads, N, d); ``ids``: (N, 2) or (B, N, 2) float positions.

    The first half of each head is rotated by the row coordinate, the second by the column.
    """
    d = x.shape[-1]
    quarter = d // 4
    freqs = theta ** (-torch.arange(quarter, dtype=x.dtype) / quarter)
    if ids.dim() == 2:
        ids = ids[None]
    ids = ids.to(x.dtype)
    out = []
    for axis, chunk in enumerate(x.split(d // 2, dim=-1)):
        ang = ids[..., axis, None] * freqs  # (B, N, quarter)
        cos, sin = ang.cos()[:, None], ang.sin()[:, None]
        a, b = chunk[..., :quarter], chunk[..., quarter:]
        out += [a * cos - b * sin, a * sin + b * cos]
    return torch.cat(out, dim=-1)


def attention(q, k, v, heads: int):
    """Plain softmax attention on (B, N, D) inputs split into heads."""
    B, Nq, D = q.shape
    split = lambda t: t.reshape(B, t.shape[1], heads, D // heads).transpose(1, 2)
    q, k, v = split(q), split(k), split(v)
    w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(D // heads), dim=-1)
    return (w @ v).transpose(1, 2).reshape(B, Nq, D)


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * ratio)
        self.fc2 = nn.Linear(dim * ratio, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, dim: int, heads: int = 4, mlp_ratio: int = 4):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x):
        q, k, v = self.qkv(self.norm1(x)).chunk(3, dim=-1)
        x = x + self.proj(attention(q, k, v, self.heads))
        return x + self.mlp(self.norm2(x))


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    return module


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
