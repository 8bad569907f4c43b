"""Shared training machinery: batch sampling, the optimisation loop with
freeze guards and resumable checkpoints, and backbone pretraining."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbones import Backbones, ConditionBundle, latent_mask
from .checkpoint import FrozenViolationError, load_checkpoint, module_hash, save_checkpoint
from .images import mask_tensor, to_tensor
from .masks import MaskRecipe, RatioExceededError, expand_to_patch_ratio, patchify, sample_mask
from .schedules import NoiseSchedule, training_target
from .seeding import stream


@dataclass
class TrainResult:
    trace: list[dict]
    hashes_before: dict[str, str]
    hashes_after: dict[str, str]
    steps_run: int = 0


class FreezeGuard:
    """Hashes modules on entry and raises if any changed by exit."""

    def __init__(self, modules: Mapping[str, nn.Module]):
        self.modules = dict(modules)
        self.before = {k: module_hash(m) for k, m in self.modules.items()}
        self.after: dict[str, str] = {}

    def check(self):
        self.after = {k: module_hash(m) for k, m in self.modules.items()}
        changed = [k for k in self.before if self.before[k] != self.after[k]]
        if changed:
            raise FrozenViolationError(f"frozen components changed during training: {', '.join(changed)}")


def cosine_lr(base: float, step: int, total: int, floor: float = 0.0) -> float:
    if total <= 0:
        return base
    return floor + 0.5 * (base - floor) * (1 + math.cos(math.pi * min(step, total) / total))


def write_trace(path: Path, trace: Sequence[dict]):
    if not trace:
        path.write_text("")
        return
    keys = list(trace[0])
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        for row in trace:
            w.writerow(row)


def read_trace(path: Path) -> list[dict]:
    with open(path, newline="") as f:
        return [{k: float(v) if v not in ("", "None") else None for k, v in row.items()} for row in csv.DictReader(f)]


def run_loop(name: str, trainable: nn.Module, step_fn: Callable, steps: int, lr: float, seed: int,
             frozen: Mapping[str, nn.Module] = {}, out_dir: str | Path | None = None,
             checkpoint_every: int = 500, resume: bool = False, weight_decay: float = 0.0,
             lr_fn: Callable[[int], float] | None = None, grad_clip: float | None = 1.0) -> TrainResult:
    """Optimise ``trainable`` for ``steps`` steps.

    ``step_fn(step, rng)`` returns ``(loss, info)``; ``rng`` is stream
    ``(seed, name, step)`` so a resumed run replays exactly the same draws.
    Parameters of ``frozen`` modules must not change.
    """
    guard = FreezeGuard(frozen)
    params = [p for p in trainable.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)
    trace: list[dict] = []
    start = 0
    state_dir = Path(out_dir) / f"{name}_state" if out_dir else None
    if resume and state_dir is not None and (state_dir / "header.json").exists():
        state, header = load_checkpoint(state_dir)
        trainable.load_state_dict(state)
        opt.load_state_dict(torch.load(state_dir / "optimizer.pt", weights_only=False))
        start = int(header["extra"]["step"])
        trace = read_trace(state_dir / "trace.csv")[:start]
    for step in range(start, steps):
        cur_lr = lr_fn(step) if lr_fn else lr
        for g in opt.param_groups:
            g["lr"] = cur_lr
        loss, info = step_fn(step, stream(seed, name, step))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if grad_clip:
            torch.nn.utils.clip_grad_norm_(params, grad_clip)
        opt.step()
        trace.append({"step": step, "loss": float(loss.detach()), **info, "lr": cur_lr})
        if state_dir is not None and ((step + 1) % checkpoint_every == 0 or step + 1 == steps):
            save_checkpoint(state_dir, trainable.state_dict(), extra={"step": step + 1})
            torch.save(opt.state_dict(), state_dir / "optimizer.pt")
            write_trace(state_dir / "trace.csv", trace)
    guard.check()
    if out_dir:
        write_trace(Path(out_dir) / f"{name}_trace.csv", trace)
    return TrainResult(trace, guard.before, guard.after, steps - start)


# -- batches -----------------------------------------------------------------

def sample_images(rng: np.random.Generator, corpus: Sequence[np.ndarray], batch: int, dtype=torch.float32):
    idx = rng.integers(0, len(corpus), size=batch)
    return to_tensor(np.stack([corpus[i] for i in idx]), dtype), idx


def sample_masks(rng: np.random.Generator, batch: int, size: int, recipe: MaskRecipe = MaskRecipe(),
                 object_pool: Sequence[np.ndarray] = ()) -> np.ndarray:
    return np.stack([sample_mask(rng, size, size, object_pool, recipe)[0] for _ in range(batch)])


def prior_patch_mask(mask: np.ndarray, patch: int, rng: np.random.Generator, target: float = 0.75) -> np.ndarray:
    """MAE patch mask for an inpainting mask: expanded to the target ratio when
    possible, otherwise the patchified mask with at least one visible patch."""
    try:
        return expand_to_patch_ratio(mask, patch, target, rng)
    except RatioExceededError:
        grid = patchify(mask, patch)
        if grid.all():
            flat = grid.ravel().copy()
            flat[int(rng.integers(flat.size))] = False
            grid = flat.reshape(grid.shape)
        return grid


def stratified_timesteps(rng: np.random.Generator, batch: int, T: int) -> np.ndarray:
    """One uniform draw per equal-width stratum of [0, T), shuffled; lowers loss-trace variance."""
    u = (np.arange(batch) + rng.random(batch)) / batch
    return rng.permutation(np.minimum((u * T).astype(np.int64), T - 1))


@dataclass
class DiffusionBatch:
    images: torch.Tensor
    masks: torch.Tensor  # pixel masks (B, 1, H, W)
    z0: torch.Tensor
    z_masked: torch.Tensor
    lmask: torch.Tensor
    t: torch.Tensor
    z_t: torch.Tensor
    target: torch.Tensor
    np_masks: np.ndarray


def diffusion_batch(rng: np.random.Generator, corpus, backbones: Backbones, schedule: NoiseSchedule, batch: int,
                    recipe: MaskRecipe = MaskRecipe(), object_pool=(), dtype=torch.float32) -> DiffusionBatch:
    cfg = backbones.cfg
    images, _ = sample_images(rng, corpus, batch, dtype)
    np_masks = sample_masks(rng, batch, cfg.image_size, recipe, object_pool)
    masks = mask_tensor(np_masks, dtype)
    with torch.no_grad():
        z0 = backbones.vae.encode(images)
        z_masked = backbones.vae.encode(images * (1 - masks))
    lmask = latent_mask(masks, cfg.latent_down)
    t = stratified_timesteps(rng, batch, schedule.T)
    a, b = schedule.coeffs(t)
    a = torch.from_numpy(a).to(dtype)[:, None, None, None]
    b = torch.from_numpy(b).to(dtype)[:, None, None, None]
    eps = torch.from_numpy(rng.standard_normal(tuple(z0.shape))).to(dtype)
    z_t = a * z0 + b * eps
    return DiffusionBatch(images, masks, z0, z_masked, lmask, torch.from_numpy(t), z_t,
                          training_target(z0, eps, schedule), np_masks)


# -- backbone pretraining --------------------------------------------------------------

def pretrain_vae(backbones: Backbones, corpus, steps: int, seed: int, batch: int = 8, lr: float = 2e-3,
                 out_dir=None) -> TrainResult:
    """Plain autoencoding with unconditioned decoding."""
    vae = backbones.vae

    def step_fn(step, rng):
        x, _ = sample_images(rng, corpus, batch, vae.dtype)
        return F.l1_loss(vae.decode(vae.encode(x)), x), {}

    vae.train()
    res = run_loop("pretrain_vae", vae, step_fn, steps, lr, seed, out_dir=out_dir,
                   lr_fn=lambda s: cosine_lr(lr, s, steps, lr * 0.05))
    vae.eval()
    return res


def pretrain_mae(backbones: Backbones, corpus, steps: int, seed: int, batch: int = 8, lr: float = 2e-3,
                 mask_ratio: float = 0.75, full_view_prob: float = 0.25, out_dir=None) -> TrainResult:
    """MAE pretraining: random patch masking at ``mask_ratio`` (or no masking
    with probability ``full_view_prob``), pixel loss over all patches with the
    masked ones weighted 4:1."""
    mae = backbones.mae
    g = mae.cfg.grid
    n = g * g

    def step_fn(step, rng):
        x, _ = sample_images(rng, corpus, batch, next(mae.parameters()).dtype)
        pm = np.zeros((batch, n), bool)
        for i in range(batch):
            if rng.random() >= full_view_prob:
                pm[i, rng.permutation(n)[: int(round(mask_ratio * n))]] = True
        pm_t = torch.from_numpy(pm)
        pred = mae.head(mae.tokens(x, pm_t.reshape(batch, g, g)))
        err = ((pred - mae.patchify(x)) ** 2).mean(-1)
        w = 1.0 + 3.0 * pm_t.to(err.dtype)
        return (err * w).sum() / w.sum(), {}

    mae.train()
    res = run_loop("pretrain_mae", mae, step_fn, steps, lr, seed, out_dir=out_dir,
                   lr_fn=lambda s: cosine_lr(lr, s, steps, lr * 0.05))
    mae.eval()
    return res


def pretrain_denoiser(backbones: Backbones, corpus, schedule: NoiseSchedule, steps: int, seed: int,
                      batch: int = 8, lr: float = 1e-3, recipe: MaskRecipe = MaskRecipe(), out_dir=None,
                      cond_dropout: float = 0.2):
    """Inpainting denoiser pretraining on caption tokens of the clean image,
    replaced by the null condition with probability ``cond_dropout``; VAE frozen."""
    den = backbones.denoiser
    dtype = next(den.parameters()).dtype

    def step_fn(step, rng):
        b = diffusion_batch(rng, corpus, backbones, schedule, batch, recipe, dtype=dtype)
        with torch.no_grad():
            caps = den.captioner(b.images)
        drop = torch.from_numpy(rng.random(batch) < cond_dropout)[:, None, None]
        tokens = torch.where(drop, den.null_cond[None].expand_as(caps), caps)
        pred = den(b.z_t, b.z_masked, b.lmask, ConditionBundle(tokens), b.t)
        return F.mse_loss(pred, b.target), {}

    den.train()
    res = run_loop("pretrain_denoiser", den, step_fn, steps, lr, seed, frozen={"vae": backbones.vae},
                   out_dir=out_dir, lr_fn=lambda s: cosine_lr(lr, s, steps, lr * 0.05))
    den.eval()
    return res


def pretrain_backbones(backbones: Backbones, corpus, schedule: NoiseSchedule, seed: int, vae_steps: int,
                       mae_steps: int, denoiser_steps: int, batch: int = 8, out_dir=None) -> dict[str, TrainResult]:
    out = {"vae": pretrain_vae(backbones, corpus, vae_steps, seed, batch, out_dir=out_dir)}
    out["mae"] = pretrain_mae(backbones, corpus, mae_steps, seed, batch, out_dir=out_dir)
    out["denoiser"] = pretrain_denoiser(backbones, corpus, schedule, denoiser_steps, seed, batch, out_dir=out_dir)
    return out
