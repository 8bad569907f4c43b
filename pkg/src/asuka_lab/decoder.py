"""Mask-unmask colour-consistent decoder: training pairs, training loop,
evaluation on colour-shifted sets, and compositing."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbones import ToyVAE
from .images import load_png, mask_tensor, save_png, to_numpy, to_tensor
from .layers import freeze
from .masks import MaskRecipe, as_mask, load_mask_png, sample_jagged_mask, sample_mask, save_mask_png
from .metrics import BoundaryBand, gradient_at_edge
from .schedules import ColorJitterParams, color_jitter
from .seeding import stream
from .training import TrainResult, cosine_lr, run_loop

AUGS = ("color", "latent", "none")


def composite(decoded: np.ndarray, original: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """``mask * decoded + (1 - mask) * original``; unmasked pixels are copied bit-exactly."""
    decoded, original = np.asarray(decoded), np.asarray(original)
    if decoded.shape != original.shape or decoded.shape[:2] != np.shape(mask):
        raise ValueError(f"shape mismatch: decoded {decoded.shape}, original {original.shape}, "
                         f"mask {np.shape(mask)}")
    m = as_mask(mask).astype(bool)
    if decoded.ndim == 3:
        m = m[..., None]
    return np.where(m, decoded, original)


def composite_tensor(decoded: torch.Tensor, original: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return torch.where(mask > 0.5, decoded, original)


@dataclass
class TrainingPair:
    corrupt_image: np.ndarray
    cond_masked_image: np.ndarray
    mask: np.ndarray
    target: np.ndarray
    aug: str
    jagged: bool = False
    corrupt_latent: torch.Tensor | None = None


def draw_pair_mask(rng: np.random.Generator, size: int, recipe: MaskRecipe = MaskRecipe(), object_pool=(),
                   jagged_fraction: float = 0.25) -> tuple[np.ndarray, bool]:
    if rng.random() < jagged_fraction:
        return sample_jagged_mask(rng, size, size, object_pool, recipe)[0], True
    return sample_mask(rng, size, size, object_pool, recipe)[0], False


def build_training_pair(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator, aug: str = "color",
                        vae: ToyVAE | None = None, latent_image: np.ndarray | None = None,
                        jitter: ColorJitterParams = ColorJitterParams()) -> TrainingPair:
    """Target is the clean image; the decoder input latent comes from an
    augmented copy (colour-jittered, or the cached latent-augmented image)."""
    image = np.asarray(image, dtype=np.float64)
    mask = as_mask(mask)
    if image.shape[:2] != mask.shape:
        raise ValueError(f"image {image.shape} and mask {mask.shape} differ")
    if aug not in AUGS:
        raise ValueError(f"unknown augmentation {aug!r}")
    if aug == "color":
        corrupt = color_jitter(image, rng, jitter)
    elif aug == "latent":
        if latent_image is None:
            raise ValueError("latent augmentation needs the cached augmented image")
        corrupt = np.asarray(latent_image, dtype=np.float64)
    else:
        corrupt = image.copy()
    pair = TrainingPair(corrupt, image * (1 - mask[..., None]), mask, image, aug)
    if vae is not None:
        with torch.no_grad():
            pair.corrupt_latent = vae.encode(to_tensor(corrupt, vae.dtype))
    return pair


def sample_pairs(rng: np.random.Generator, corpus: Sequence[np.ndarray], batch: int, size: int,
                 latent_cache: Sequence[np.ndarray | None] | None = None, latent_prob: float = 0.5,
                 jagged_fraction: float = 0.25, recipe: MaskRecipe = MaskRecipe(), object_pool=(),
                 jitter: ColorJitterParams = ColorJitterParams()) -> list[TrainingPair]:
    """Latent-augmented pairs (when a cached copy exists) with probability
    ``latent_prob``; colour augmentation for all others."""
    pairs = []
    for _ in range(batch):
        i = int(rng.integers(len(corpus)))
        mask, jagged = draw_pair_mask(rng, size, recipe, object_pool, jagged_fraction)
        cached = latent_cache[i] if latent_cache is not None else None
        if cached is not None and rng.random() < latent_prob:
            p = build_training_pair(corpus[i], mask, rng, "latent", latent_image=cached)
        else:
            p = build_training_pair(corpus[i], mask, rng, "color", jitter=jitter)
        p.jagged = jagged
        pairs.append(p)
    return pairs


def _band_tensor(masks: np.ndarray, width: int) -> torch.Tensor:
    return torch.from_numpy(np.stack([BoundaryBand.from_mask(m, width).band for m in masks]).astype(np.float64))


def boundary_gradient_loss(pred: torch.Tensor, target: torch.Tensor, band: torch.Tensor) -> torch.Tensor:
    """Differentiable G@e on the [0, 1] scale, averaged over band pixels."""
    d = pred - target
    dx = F.pad(d[..., :, 1:] - d[..., :, :-1], (0, 1, 0, 0))
    dy = F.pad(d[..., 1:, :] - d[..., :-1, :], (0, 0, 0, 1))
    per = (dx.abs() + dy.abs()).mean(1)
    band = band.to(per.dtype)
    return (per * band).sum() / band.sum().clamp_min(1.0)


def decoder_loss(out, target, masks: np.ndarray, boundary_weight: float = 0.5, band_px: int = 2):
    loss = F.l1_loss(out, target)
    if boundary_weight:
        loss = loss + boundary_weight * boundary_gradient_loss(out, target, _band_tensor(masks, band_px))
    return loss


def train_decoder(vae: ToyVAE, corpus: Sequence[np.ndarray], steps: int, seed: int, batch: int = 8,
                  lr: float = 1e-3, latent_cache=None, latent_prob: float = 0.5, jagged_fraction: float = 0.25,
                  boundary_weight: float = 0.5, recipe: MaskRecipe = MaskRecipe(), object_pool=(),
                  jitter: ColorJitterParams = ColorJitterParams(), out_dir=None,
                  resume: bool = False, checkpoint_every: int = 500) -> TrainResult:
    """Fine-tune the decoder (in place) as a local harmonisation model.

    The encoder is frozen; a changed encoder hash raises ``FrozenViolationError``.
    The learning rate follows a cosine decay to zero.
    """
    freeze(vae.encoder)
    size = corpus[0].shape[0]
    decoder = nn.ModuleDict({"dec_in": vae.dec_in, "dec_up": vae.dec_up, "cond_full": vae.cond_full,
                             "head": vae.head})
    for p in decoder.parameters():
        p.requires_grad_(True)
    dtype = vae.dtype

    def step_fn(step, rng):
        pairs = sample_pairs(rng, corpus, batch, size, latent_cache, latent_prob, jagged_fraction, recipe,
                             object_pool, jitter)
        corrupt = to_tensor(np.stack([p.corrupt_image for p in pairs]), dtype)
        target = to_tensor(np.stack([p.target for p in pairs]), dtype)
        masks = np.stack([p.mask for p in pairs])
        m = mask_tensor(masks, dtype)
        with torch.no_grad():
            z = vae.encode(corrupt)
        out = vae.decode_cond(z, target * (1 - m), m)
        return decoder_loss(out, target, masks, boundary_weight), {"jagged": sum(p.jagged for p in pairs)}

    decoder.train()
    res = run_loop("decoder", decoder, step_fn, steps, lr, seed, frozen={"vae_encoder": vae.encoder},
                   out_dir=out_dir, resume=resume, lr_fn=lambda s: cosine_lr(lr, s, steps),
                   checkpoint_every=checkpoint_every)
    vae.eval()
    return res


# -- evaluation sets -------------------------------------------------------------

@dataclass
class EvalItem:
    id: str
    image: np.ndarray  # decoder input (colour-shifted)
    mask: np.ndarray
    target: np.ndarray


def color_shift_eval_set(seed: int, images: Sequence[np.ndarray], recipe: MaskRecipe = MaskRecipe(),
                         jitter: ColorJitterParams = ColorJitterParams(), object_pool=()) -> list[EvalItem]:
    """Each clean image gets a mask and a colour-jittered copy standing in for a colour-shifted generation."""
    items = []
    for i, img in enumerate(images):
        rng = stream(seed, "eval-item", i)
        mask, _ = sample_mask(rng, img.shape[0], img.shape[1], object_pool, recipe)
        items.append(EvalItem(f"item_{i:05d}", color_jitter(img, rng, jitter), mask, np.asarray(img)))
    return items


def save_eval_set(out_dir: str | Path, items: Sequence[EvalItem], meta: dict | None = None):
    out_dir = Path(out_dir)
    for sub in ("image", "mask", "target"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    records = []
    for it in items:
        save_png(out_dir / "image" / f"{it.id}.png", it.image)
        save_mask_png(out_dir / "mask" / f"{it.id}.png", it.mask)
        save_png(out_dir / "target" / f"{it.id}.png", it.target)
        records.append({"id": it.id, "image": f"image/{it.id}.png", "mask": f"mask/{it.id}.png",
                        "target": f"target/{it.id}.png"})
    (out_dir / "manifest.json").write_text(json.dumps({"meta": meta or {}, "items": records}, indent=1))


def load_eval_set(path: str | Path) -> list[EvalItem]:
    path = Path(path)
    m = json.loads((path / "manifest.json").read_text())
    return [EvalItem(r["id"], load_png(path / r["image"]), load_mask_png(path / r["mask"]), load_png(path / r["target"]))
            for r in m["items"]]


def decode_items(vae: ToyVAE, items: Sequence[EvalItem], conditional: bool = True, batch: int = 16):
    """Decode each item's latent, then composite with the ground truth outside the hole."""
    outs = []
    with torch.no_grad():
        for s in range(0, len(items), batch):
            chunk = items[s:s + batch]
            x = to_tensor(np.stack([it.image for it in chunk]), vae.dtype)
            gt = to_tensor(np.stack([it.target for it in chunk]), vae.dtype)
            m = mask_tensor(np.stack([it.mask for it in chunk]), vae.dtype)
            z = vae.encode(x)
            dec = vae.decode_cond(z, gt * (1 - m), m) if conditional else vae.decode(z)
            d = to_numpy(dec)
            d = d[None] if d.ndim == 3 else d
            outs += [composite(d[j].astype(np.float64), chunk[j].target, chunk[j].mask) for j in range(len(chunk))]
    return outs


def evaluate_gae(vae: ToyVAE, items: Sequence[EvalItem], conditional: bool = True) -> np.ndarray:
    comps = decode_items(vae, items, conditional)
    return np.array([gradient_at_edge(c, it.target, it.mask) for c, it in zip(comps, items)])


def reconstruction_l2(vae: ToyVAE, images: Sequence[np.ndarray], conditional: bool = False) -> float:
    """Mean squared error of encode -> decode on clean images (all-masked conditioning unless ``conditional``)."""
    with torch.no_grad():
        x = to_tensor(np.stack(images), vae.dtype)
        z = vae.encode(x)
        if conditional:
            zero = torch.zeros_like(x[:, :1])
            out = vae.decode_cond(z, x, zero)
        else:
            out = vae.decode(z)
        return float(((out - x) ** 2).mean())
