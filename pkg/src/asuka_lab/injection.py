"""Per-layer MAE condition injection: LoRA-adapted condition QKV, sigmoid
gates, learnable task prompts and scaled positional IDs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .alignment import AlignmentModule, batch_priors, mix_priors, PriorSchedule
from .backbones import Backbones, ConditionBundle, ShapeError, ToyDenoiser
from .layers import freeze
from .masks import MaskRecipe
from .schedules import NoiseSchedule
from .training import TrainResult, diffusion_batch, run_loop

COMPONENTS = ("q", "k", "v")


class ConfigurationError(ValueError):
    pass


class LoRAAdapter(nn.Module):
    """``delta(x) = scale * (x @ down) @ up``; ``up`` starts at zero."""

    def __init__(self, dim: int, rank: int = 8, scale: float = 1.0):
        super().__init__()
        self.rank, self.scale = rank, scale
        self.down = nn.Parameter(torch.randn(dim, rank) / dim ** 0.5)
        self.up = nn.Parameter(torch.zeros(rank, dim))

    def forward(self, x):
        return self.scale * (x @ self.down) @ self.up

    def delta_weight(self) -> torch.Tensor:
        """Update in ``nn.Linear`` layout (out x in), so ``x @ delta_weight().T == forward(x)``."""
        return self.scale * (self.down @ self.up).T


class GateModule(nn.Module):
    """Linear map followed by a sigmoid.  ``force`` pins the output to a constant."""

    def __init__(self, dim: int, bias_init: float = -4.0):
        super().__init__()
        self.linear = nn.Linear(dim, dim)
        nn.init.zeros_(self.linear.weight)
        nn.init.constant_(self.linear.bias, bias_init)
        self.force: float | None = None

    def forward(self, x):
        if self.force is not None:
            return torch.full_like(x, self.force)
        return torch.sigmoid(self.linear(x))


class TaskPrompt(nn.Module):
    def __init__(self, init: torch.Tensor):
        super().__init__()
        self.tokens = nn.Parameter(init.detach().clone())

    def forward(self):
        return self.tokens


def fuse_condition(f_task: torch.Tensor, f_mae: torch.Tensor, weights, adapters, gates):
    """Gated fusion for one layer.

    For each component j in (q, k, v)::

        f_mae_j  = (W_j + dW_j) f_mae
        f_task_j = W_j f_task
        f_j      = f_task_j + G_j(f_mae + f_task) * f_mae_j

    ``weights`` are three (out x in) matrices or bias-free linear layers.
    """
    if f_task.shape[-1] != f_mae.shape[-1]:
        raise ShapeError(f"task width {f_task.shape[-1]} != MAE width {f_mae.shape[-1]}")
    if f_task.shape[-2] != f_mae.shape[-2]:
        raise ShapeError(f"task tokens {f_task.shape[-2]} != MAE tokens {f_mae.shape[-2]}")
    gate_in = f_mae + f_task
    out = []
    for W, adapter, gate in zip(weights, adapters, gates):
        lin = W if callable(W) else (lambda x, W=W: x @ W.T)
        f_mae_j = lin(f_mae) + adapter(f_mae)
        f_task_j = lin(f_task)
        out.append(f_task_j + gate(gate_in) * f_mae_j)
    return tuple(out)


@dataclass(frozen=True)
class PositionalScaling:
    r_img: float
    r_mae: float
    patches: int | None = None  # MAE patches per axis; defaults to r_mae

    @property
    def scale(self) -> float:
        s = self.r_img / self.r_mae
        return int(s) if float(s).is_integer() else s

    @property
    def P(self) -> int:
        return int(self.patches if self.patches is not None else self.r_mae)


def scaled_pos_ids(ps: PositionalScaling) -> torch.Tensor:
    """Row-major IDs ``(r*S, c*S)`` for ``0 <= r, c < P``; shape (P*P, 2)."""
    if ps.r_img <= 0 or ps.r_mae <= 0:
        raise ValueError("resolutions must be positive")
    if ps.P < 1:
        raise ValueError("need at least one patch per axis")
    S = ps.scale
    r, c = np.meshgrid(np.arange(ps.P), np.arange(ps.P), indexing="ij")
    return torch.from_numpy(np.stack([r.ravel() * S, c.ravel() * S], 1).astype(np.float64))


class InjectedDenoiser(nn.Module):
    """A frozen denoiser with MAE conditioning injected into every layer's condition QKV."""

    def __init__(self, denoiser: ToyDenoiser, adapters, gates, task_prompt: TaskPrompt,
                 alignment: AlignmentModule, pos_ids: torch.Tensor | None = None):
        super().__init__()
        self.denoiser = freeze(denoiser)
        self.adapters = adapters
        self.gates = gates
        self.task_prompt = task_prompt
        self.alignment = alignment
        self.register_buffer("pos_ids", pos_ids if pos_ids is not None else torch.zeros(0, 2), persistent=False)

    def trainable_modules(self) -> nn.ModuleDict:
        return nn.ModuleDict({"adapters": self.adapters, "gates": self.gates, "task_prompt": self.task_prompt,
                              "alignment": self.alignment})

    def force_gates(self, value: float | None):
        for layer_gates in self.gates:
            for g in layer_gates:
                g.force = value

    def condition(self, mae_tokens: torch.Tensor) -> ConditionBundle:
        ids = self.pos_ids if self.pos_ids.numel() else None
        return ConditionBundle(self.task_prompt()[None], ids, self.alignment(mae_tokens))

    def base_condition(self) -> ConditionBundle:
        """The MAE-free condition: same prompt and IDs, no injection."""
        ids = self.pos_ids if self.pos_ids.numel() else None
        return ConditionBundle(self.task_prompt()[None], ids)

    def forward(self, z_t, z_masked, mask, mae_tokens, t):
        cond = self.condition(mae_tokens)
        f_mae = cond.mae

        def hook(i, c_norm, layer):
            return fuse_condition(c_norm, f_mae, (layer.w_q, layer.w_k, layer.w_v), self.adapters[i], self.gates[i])

        return self.denoiser(z_t, z_masked, mask, cond, t, qkv_hook=hook)


def make_injection(denoiser: ToyDenoiser, alignment: AlignmentModule, rank: int = 8, scale: float = 1.0,
                   gate_bias: float = -4.0, pos: PositionalScaling | None = None) -> InjectedDenoiser:
    D = denoiser.cfg.cond_dim
    n = len(denoiser.layers)
    adapters = nn.ModuleList([nn.ModuleList([LoRAAdapter(D, rank, scale) for _ in COMPONENTS]) for _ in range(n)])
    gates = nn.ModuleList([nn.ModuleList([GateModule(D, gate_bias) for _ in COMPONENTS]) for _ in range(n)])
    prompt = TaskPrompt(denoiser.null_cond)
    ids = scaled_pos_ids(pos) if pos is not None else None
    return attach_injection(denoiser, adapters, gates, prompt, alignment, ids)


def attach_injection(denoiser: ToyDenoiser, adapters, gates, task_prompt: TaskPrompt, alignment: AlignmentModule,
                     pos_ids: torch.Tensor | None = None) -> InjectedDenoiser:
    layers = getattr(denoiser, "layers", None)
    if layers is None or not all(hasattr(l, "w_q") and hasattr(l, "w_k") and hasattr(l, "w_v") for l in layers):
        raise ConfigurationError("denoiser does not expose per-layer condition QKV hooks")
    if len(adapters) != len(layers) or len(gates) != len(layers):
        raise ConfigurationError(f"{len(adapters)} adapter / {len(gates)} gate sets for {len(layers)} layers")
    if any(len(a) != 3 for a in adapters) or any(len(g) != 3 for g in gates):
        raise ConfigurationError("each layer needs q, k and v adapters and gates")
    if task_prompt.tokens.shape[-1] != denoiser.cfg.cond_dim:
        raise ConfigurationError("task prompt width does not match the denoiser")
    if pos_ids is not None and pos_ids.shape[0] != task_prompt.tokens.shape[0]:
        raise ConfigurationError(f"{pos_ids.shape[0]} positional IDs for {task_prompt.tokens.shape[0]} tokens")
    dtype = next(denoiser.parameters()).dtype
    for m in (adapters, gates, task_prompt, alignment):
        m.to(dtype)
    return InjectedDenoiser(denoiser, adapters, gates, task_prompt, alignment,
                            pos_ids.to(dtype) if pos_ids is not None else None)


def default_positional_scaling(backbones: Backbones) -> PositionalScaling:
    cfg = backbones.cfg
    return PositionalScaling(cfg.latent_size, cfg.grid, cfg.grid)


def train_inject(backbones: Backbones, corpus, schedule: NoiseSchedule, steps: int, seed: int,
                 injected: InjectedDenoiser | None = None, alignment: AlignmentModule | None = None,
                 batch: int = 8, lr: float = 1e-3, rank: int = 8, scale: float = 1.0,
                 gate_bias: float = -4.0, prior_sched: PriorSchedule = PriorSchedule(),
                 recipe: MaskRecipe = MaskRecipe(), object_pool=(), out_dir=None,
                 resume: bool = False, checkpoint_every: int = 500) -> tuple[InjectedDenoiser, TrainResult]:
    """Fine-tune adapters, gates, task prompt and alignment; the backbone stays frozen."""
    cfg = backbones.cfg
    dtype = next(backbones.denoiser.parameters()).dtype
    for m in backbones.modules().values():
        freeze(m)
    if injected is None:
        torch.manual_seed(seed)
        alignment = alignment or AlignmentModule(cfg.mae_dim, cfg.cond_dim, heads=cfg.heads)
        injected = make_injection(backbones.denoiser, alignment.to(dtype), rank, scale, gate_bias,
                                  pos=default_positional_scaling(backbones))

    def step_fn(step, rng):
        b = diffusion_batch(rng, corpus, backbones, schedule, batch, recipe, object_pool, dtype)
        pred_prior, recon_prior = batch_priors(backbones, b.images, b.np_masks, rng)
        tokens, _ = mix_priors(rng, step, pred_prior, recon_prior, prior_sched)
        out = injected(b.z_t, b.z_masked, b.lmask, tokens, b.t)
        return F.mse_loss(out, b.target), {}

    trainable = injected.trainable_modules()
    trainable.train()
    res = run_loop("inject", trainable, step_fn, steps, lr, seed, frozen=backbones.modules(), out_dir=out_dir,
                   resume=resume, checkpoint_every=checkpoint_every)
    trainable.eval()
    return injected, res
