"""Alignment of MAE priors to a frozen generator's condition space."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbones import Backbones, ConditionBundle, MAEPrior, ShapeError
from .images import mask_tensor
from .layers import Block, freeze
from .masks import MaskRecipe
from .schedules import NoiseSchedule
from .training import TrainResult, diffusion_batch, prior_patch_mask, run_loop


class AlignmentModule(nn.Module):
    """Linear width map ``M_m -> M_s`` followed by pre-norm self-attention blocks.

    Token count is preserved: N_s = N_m.
    """

    def __init__(self, mae_dim: int = 64, cond_dim: int = 128, blocks: int = 4, heads: int = 4, mlp_ratio: int = 4):
        super().__init__()
        self.mae_dim, self.cond_dim = mae_dim, cond_dim
        self.dim_map = nn.Linear(mae_dim, cond_dim)
        self.blocks = nn.ModuleList([Block(cond_dim, heads, mlp_ratio) for _ in range(blocks)])

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-1] != self.mae_dim:
            raise ShapeError(f"prior width {tokens.shape[-1]} != configured {self.mae_dim}")
        x = self.dim_map(tokens)
        for blk in self.blocks:
            x = blk(x)
        return x


def align(module: AlignmentModule, prior: MAEPrior | torch.Tensor) -> torch.Tensor:
    """C_MAE tokens (B, N_m, M_s)."""
    return module(prior.tokens if isinstance(prior, MAEPrior) else prior)


@dataclass(frozen=True)
class PriorSchedule:
    p0: float = 1.0
    p_final: float = 0.1
    decay_steps: int = 2000

    def __post_init__(self):
        if not 0.0 <= self.p_final <= self.p0 <= 1.0:
            raise ValueError("need 0 <= p_final <= p0 <= 1")
        if self.decay_steps < 0:
            raise ValueError("decay_steps must be >= 0")


def schedule_p(step: int, sched: PriorSchedule = PriorSchedule()) -> float:
    """Probability of using the reconstructed prior: linear from p0 to p_final, then constant."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step >= sched.decay_steps:
        return sched.p_final
    return sched.p0 + (sched.p_final - sched.p0) * (step / sched.decay_steps)


def _check_pair(predicted: MAEPrior, reconstructed: MAEPrior):
    if predicted.tokens.shape != reconstructed.tokens.shape:
        raise ShapeError(f"prior shapes differ: {tuple(predicted.tokens.shape)} vs "
                         f"{tuple(reconstructed.tokens.shape)}")


def choose_prior(rng: np.random.Generator, step: int, predicted: MAEPrior, reconstructed: MAEPrior,
                 sched: PriorSchedule = PriorSchedule()) -> MAEPrior:
    """One per-sample draw: the reconstructed prior with probability ``schedule_p(step)``."""
    _check_pair(predicted, reconstructed)
    return reconstructed if rng.random() < schedule_p(step, sched) else predicted


def mix_priors(rng: np.random.Generator, step: int, predicted: MAEPrior, reconstructed: MAEPrior,
               sched: PriorSchedule = PriorSchedule()) -> tuple[torch.Tensor, np.ndarray]:
    """Batched ``choose_prior``: one independent draw per sample."""
    _check_pair(predicted, reconstructed)
    use_recon = rng.random(predicted.tokens.shape[0]) < schedule_p(step, sched)
    sel = torch.from_numpy(use_recon)[:, None, None]
    return torch.where(sel, reconstructed.tokens, predicted.tokens), use_recon


def batch_priors(backbones: Backbones, images: torch.Tensor, np_masks: np.ndarray, rng: np.random.Generator):
    """Predicted (under the expanded patch mask) and reconstructed MAE priors for a batch."""
    cfg = backbones.cfg
    pm = np.stack([prior_patch_mask(m, cfg.patch, rng) for m in np_masks])
    with torch.no_grad():
        pred = backbones.mae.predict(images, torch.from_numpy(pm))
        recon = backbones.mae.reconstruct(images)
    return pred, recon


def train_alignment(backbones: Backbones, corpus, schedule: NoiseSchedule, steps: int, seed: int,
                    module: AlignmentModule | None = None, batch: int = 8, lr: float = 5e-2,
                    prior_sched: PriorSchedule = PriorSchedule(), recipe: MaskRecipe = MaskRecipe(),
                    object_pool=(), out_dir=None, resume: bool = False,
                    weight_decay: float = 0.01, checkpoint_every: int = 500) -> tuple[AlignmentModule, TrainResult]:
    """Train only the alignment module with the generator's denoising objective.

    The denoiser, MAE and VAE are frozen and hash-checked; any change raises
    ``FrozenViolationError``.  The trace rows are ``(step, loss, p, lr)``.
    """
    cfg = backbones.cfg
    dtype = next(backbones.denoiser.parameters()).dtype
    if module is None:
        torch.manual_seed(seed)
        module = AlignmentModule(cfg.mae_dim, cfg.cond_dim, heads=cfg.heads).to(dtype)
    for m in backbones.modules().values():
        freeze(m)

    def step_fn(step, rng):
        b = diffusion_batch(rng, corpus, backbones, schedule, batch, recipe, object_pool, dtype)
        pred_prior, recon_prior = batch_priors(backbones, b.images, b.np_masks, rng)
        tokens, _ = mix_priors(rng, step, pred_prior, recon_prior, prior_sched)
        cond = ConditionBundle(align(module, tokens))
        out = backbones.denoiser(b.z_t, b.z_masked, b.lmask, cond, b.t)
        return F.mse_loss(out, b.target), {"p": schedule_p(step, prior_sched)}

    module.train()
    res = run_loop("align", module, step_fn, steps, lr, seed, frozen=backbones.modules(), out_dir=out_dir,
                   resume=resume, weight_decay=weight_decay, checkpoint_every=checkpoint_every)
    module.eval()
    return module, res
