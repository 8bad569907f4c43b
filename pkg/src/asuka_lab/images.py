"""Image helpers and the procedural toy corpus.

Images are float arrays ``(H, W, 3)`` in [0, 1]; models see torch tensors
``(B, 3, H, W)``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image


def to_tensor(image: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    a = np.asarray(image)
    if a.ndim == 3:
        a = a[None]
    return torch.from_numpy(np.ascontiguousarray(a.transpose(0, 3, 1, 2))).to(dtype)


def mask_tensor(mask: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    a = np.asarray(mask, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    return torch.from_numpy(a[:, None]).to(dtype)


def to_numpy(t: torch.Tensor) -> np.ndarray:
    a = t.detach().cpu().numpy().transpose(0, 2, 3, 1)
    return a[0] if a.shape[0] == 1 else a


def save_png(path: str | Path, image: np.ndarray):
    a = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(a).save(path, format="PNG")


def load_png(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def save_array(path: str | Path, image: np.ndarray):
    np.save(path, np.asarray(image, dtype=np.float32), allow_pickle=False)


def load_array(path: str | Path) -> np.ndarray:
    return np.load(path, allow_pickle=False).astype(np.float64)


def toy_image(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth two-colour gradient background with a few flat-coloured shapes and mild texture."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    c0, c1 = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
    theta = rng.uniform(0, 2 * np.pi)
    s = (np.cos(theta) * xx + np.sin(theta) * yy)
    s = (s - s.min()) / max(s.max() - s.min(), 1e-8)
    img = c0 * (1 - s[..., None]) + c1 * s[..., None]
    for _ in range(int(rng.integers(1, 4))):
        color = rng.uniform(0.05, 0.95, 3)
        cy, cx = rng.uniform(0, 1, 2)
        r = rng.uniform(0.1, 0.3)
        if rng.random() < 0.5:
            inside = (yy - cy) ** 2 + (xx - cx) ** 2 < r ** 2
        else:
            inside = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r * rng.uniform(0.5, 1.5))
        img[inside] = color
    freq = rng.uniform(2, 6)
    img = img + 0.03 * np.sin(2 * np.pi * freq * (xx + yy))[..., None]
    return np.clip(img, 0.0, 1.0)


def toy_corpus(seed: int, n: int, size: int, split: str = "train") -> list[np.ndarray]:
    from .seeding import stream

    return [toy_image(stream(seed, "toy-image", split, i), size) for i in range(n)]


def load_image_dir(path: str | Path, size: int) -> list[np.ndarray]:
    """All PNG/JPEG files under ``path`` (sorted), centre-cropped and resized to ``size``."""
    from .dataset import center_crop_resize

    files = sorted(p for p in Path(path).rglob("*") if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    return [np.clip(center_crop_resize(load_png(f), size), 0.0, 1.0) for f in files]


def toy_object_pool(seed: int, n: int = 8, side: int = 48) -> list[np.ndarray]:
    """Binary silhouettes (ellipses and blobs) standing in for segmentation-derived object shapes."""
    from .seeding import stream

    pool = []
    yy, xx = np.mgrid[0:side, 0:side] / (side - 1) - 0.5
    for i in range(n):
        rng = stream(seed, "object", i)
        m = np.zeros((side, side), bool)
        for _ in range(int(rng.integers(1, 4))):
            cy, cx = rng.uniform(-0.2, 0.2, 2)
            ry, rx = rng.uniform(0.1, 0.3, 2)
            m |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1
        pool.append(m.astype(np.uint8))
    return pool
