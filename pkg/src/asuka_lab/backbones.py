"""Toy MAE, conditional denoiser and conditional VAE.

These are deliberately small (< 5M parameters each) so every mechanism can
be trained and checked on CPU.  The denoiser exposes per-layer hooks on the
condition-stream QKV projections; that is where condition injection plugs in.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import Block, Mlp, count_params, rope_2d, sincos_2d, timestep_embedding

MAX_PARAMS = 5_000_000


@dataclass(frozen=True)
class ToyConfig:
    image_size: int = 64
    patch: int = 16
    latent_down: int = 8
    latent_ch: int = 4
    mae_dim: int = 64  # M_m
    mae_enc_dim: int = 64
    mae_enc_depth: int = 2
    mae_dec_depth: int = 1
    cond_dim: int = 128  # M_s
    layers: int = 4
    heads: int = 4
    vae_width: int = 32
    cond_mode: str = "token"  # token (joint attention, per-layer QKV hooks) | cross

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def n_tokens(self) -> int:
        return self.grid ** 2

    @property
    def latent_size(self) -> int:
        return self.image_size // self.latent_down


class ShapeError(ValueError):
    pass


# -- MAE ---------------------------------------------------------------------

@dataclass
class MAEPrior:
    tokens: torch.Tensor  # (B, N_m, M_m)
    patch_size: int
    grid: tuple[int, int]
    source: str  # predicted | reconstructed

    def __post_init__(self):
        if self.source not in ("predicted", "reconstructed"):
            raise ValueError(f"bad prior source {self.source!r}")
        if self.tokens.shape[-2] != self.grid[0] * self.grid[1]:
            raise ValueError("token count must equal grid rows * cols")


class ToyMAE(nn.Module):
    def __init__(self, cfg: ToyConfig = ToyConfig()):
        super().__init__()
        self.cfg = cfg
        p, g = cfg.patch, cfg.grid
        self.patch_embed = nn.Linear(p * p * 3, cfg.mae_enc_dim)
        self.register_buffer("pos_enc", sincos_2d(g, cfg.mae_enc_dim), persistent=False)
        self.enc = nn.ModuleList([Block(cfg.mae_enc_dim, cfg.heads) for _ in range(cfg.mae_enc_depth)])
        self.enc_norm = nn.LayerNorm(cfg.mae_enc_dim)
        self.dec_embed = nn.Linear(cfg.mae_enc_dim, cfg.mae_dim)
        self.mask_token = nn.Parameter(torch.zeros(cfg.mae_dim))
        self.register_buffer("pos_dec", sincos_2d(g, cfg.mae_dim), persistent=False)
        self.dec = nn.ModuleList([Block(cfg.mae_dim, cfg.heads) for _ in range(cfg.mae_dec_depth)])
        self.dec_norm = nn.LayerNorm(cfg.mae_dim)
        self.head = nn.Linear(cfg.mae_dim, p * p * 3)
        nn.init.normal_(self.mask_token, std=0.02)

    def patchify(self, img: torch.Tensor) -> torch.Tensor:
        B, C, H, W = img.shape
        p = self.cfg.patch
        if H % p or W % p or H // p != self.cfg.grid or W // p != self.cfg.grid:
            raise ShapeError(f"image {H}x{W} does not match the {self.cfg.grid}x{self.cfg.grid} patch grid")
        x = img.reshape(B, C, H // p, p, W // p, p).permute(0, 2, 4, 3, 5, 1)
        return x.reshape(B, (H // p) * (W // p), p * p * C)

    def unpatchify(self, x: torch.Tensor) -> torch.Tensor:
        B, N, _ = x.shape
        p, g = self.cfg.patch, self.cfg.grid
        x = x.reshape(B, g, g, p, p, 3).permute(0, 5, 1, 3, 2, 4)
        return x.reshape(B, 3, g * p, g * p)

    def _tokens_batch(self, patches: torch.Tensor, visible: torch.Tensor) -> torch.Tensor:
        # patches (B, N, P); visible (B, N) bool with the same count in every row
        B, N, _ = patches.shape
        idx = torch.stack([torch.nonzero(v).squeeze(1) for v in visible])  # (B, n_vis)
        gather = lambda t, d: torch.gather(t, 1, idx[..., None].expand(-1, -1, d))
        x = gather(self.patch_embed(patches), self.cfg.mae_enc_dim) + self.pos_enc.to(patches.dtype)[idx]
        for blk in self.enc:
            x = blk(x)
        x = self.dec_embed(self.enc_norm(x))
        full = self.mask_token.to(x.dtype).expand(B, N, -1)
        full = full.scatter(1, idx[..., None].expand(-1, -1, x.shape[-1]), x)
        y = full + self.pos_dec.to(patches.dtype)
        for blk in self.dec:
            y = blk(y)
        return self.dec_norm(y)

    def tokens(self, img: torch.Tensor, patch_mask: torch.Tensor) -> torch.Tensor:
        """Decoder tokens (B, N_m, M_m); ``patch_mask`` (B, rows, cols) or (rows, cols), True = masked."""
        patches = self.patchify(img)
        pm = torch.as_tensor(patch_mask, dtype=torch.bool)
        if pm.dim() == 2:
            pm = pm[None].expand(img.shape[0], -1, -1)
        if tuple(pm.shape[1:]) != (self.cfg.grid, self.cfg.grid):
            raise ShapeError(f"patch mask {tuple(pm.shape[1:])} does not match grid {self.cfg.grid}")
        visible = ~pm.reshape(pm.shape[0], -1)
        counts = visible.sum(1)
        if bool((counts == 0).any()):
            raise ShapeError("at least one patch must stay visible")
        out = torch.empty(img.shape[0], patches.shape[1], self.cfg.mae_dim, dtype=patches.dtype)
        # samples sharing a visible count run as one batch
        for n in torch.unique(counts).tolist():
            rows = torch.nonzero(counts == n).squeeze(1)
            out[rows] = self._tokens_batch(patches[rows], visible[rows])
        return out

    def predict(self, img, patch_mask) -> MAEPrior:
        g = self.cfg.grid
        return MAEPrior(self.tokens(img, patch_mask), self.cfg.patch, (g, g), "predicted")

    def reconstruct(self, img) -> MAEPrior:
        g = self.cfg.grid
        zero = torch.zeros(img.shape[0], g, g, dtype=torch.bool)
        return MAEPrior(self.tokens(img, zero), self.cfg.patch, (g, g), "reconstructed")

    def to_image(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.unpatchify(self.head(tokens))


def mae_predict(mae: ToyMAE, image, patch_mask) -> MAEPrior:
    with torch.no_grad():
        return mae.predict(image, patch_mask)


def mae_reconstruct(mae: ToyMAE, image) -> MAEPrior:
    with torch.no_grad():
        return mae.reconstruct(image)


# -- denoiser ------------------------------------------------------------------------

@dataclass
class ConditionBundle:
    """Condition-stream tokens with their 2-D positional IDs.

    ``tokens`` are the task prompt (or null prompt, or C_MAE in cross mode);
    ``mae`` carries the aligned MAE condition consumed by injection hooks.
    """

    tokens: torch.Tensor  # (B or 1, N, M_s)
    ids: torch.Tensor | None = None  # (N, 2)
    mae: torch.Tensor | None = None  # (B, N, M_s)


QKVHook = Callable[[int, torch.Tensor, "DenoiserLayer"], tuple]


class DenoiserLayer(nn.Module):
    def __init__(self, dim: int, heads: int, mode: str):
        super().__init__()
        self.heads, self.mode = heads, mode
        self.norm_img = nn.LayerNorm(dim)
        self.img_qkv = nn.Linear(dim, 3 * dim)
        self.img_proj = nn.Linear(dim, dim)
        self.norm_img2 = nn.LayerNorm(dim)
        self.img_mlp = Mlp(dim)
        self.norm_c = nn.LayerNorm(dim)
        # frozen condition QKV maps W_q, W_k, W_v
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)
        if mode == "token":
            self.c_proj = nn.Linear(dim, dim)
            self.norm_c2 = nn.LayerNorm(dim)
            self.c_mlp = Mlp(dim)
        else:
            self.norm_x = nn.LayerNorm(dim)
            self.cross_q = nn.Linear(dim, dim)
            self.cross_proj = nn.Linear(dim, dim)

    def cond_qkv(self, c_norm):
        return self.w_q(c_norm), self.w_k(c_norm), self.w_v(c_norm)

    def _heads(self, t):
        B, N, D = t.shape
        return t.reshape(B, N, self.heads, D // self.heads).transpose(1, 2)

    def _attend(self, q, k, v, q_ids=None, k_ids=None):
        q, k, v = self._heads(q), self._heads(k), self._heads(v)
        if q_ids is not None:
            q, k = rope_2d(q, q_ids), rope_2d(k, k_ids)
        w = torch.softmax(q @ k.transpose(-1, -2) / (q.shape[-1] ** 0.5), dim=-1)
        o = w @ v
        B, H, N, d = o.shape
        return o.transpose(1, 2).reshape(B, N, H * d)

    def forward(self, h, c, img_ids, cond_ids, index: int, hook: QKVHook | None, counts: list):
        c_norm = self.norm_c(c)
        qc, kc, vc = hook(index, c_norm, self) if hook else self.cond_qkv(c_norm)
        qi, ki, vi = self.img_qkv(self.norm_img(h)).chunk(3, dim=-1)
        if self.mode == "token":
            ids = torch.cat([cond_ids, img_ids])
            q, k, v = torch.cat([qc, qi], 1), torch.cat([kc, ki], 1), torch.cat([vc, vi], 1)
            counts.append(q.shape[1])
            o = self._attend(q, k, v, ids, ids)
            n_c = c.shape[1]
            h = h + self.img_proj(o[:, n_c:])
            c = c + self.c_proj(o[:, :n_c])
            h = h + self.img_mlp(self.norm_img2(h))
            c = c + self.c_mlp(self.norm_c2(c))
            return h, c
        counts.append(qi.shape[1] + kc.shape[1])
        h = h + self.img_proj(self._attend(qi, ki, vi, img_ids, img_ids))
        h = h + self.cross_proj(self._attend(self.cross_q(self.norm_x(h)), kc, vc))
        h = h + self.img_mlp(self.norm_img2(h))
        return h, c


class ToyCaptioner(nn.Module):
    """Frozen stand-in for a text encoder: per-patch pooled colours through a
    fixed random projection plus sine/cosine positions, one token per MAE patch."""

    def __init__(self, cfg: ToyConfig):
        super().__init__()
        self.cfg = cfg
        g = torch.Generator().manual_seed(1234)
        self.register_buffer("proj", torch.randn(3 * 4, cfg.cond_dim, generator=g) / 12 ** 0.5)
        self.register_buffer("pos", sincos_2d(cfg.grid, cfg.cond_dim) * 0.1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        # 2x2 sub-pooling per patch keeps some layout inside each token
        pooled = F.avg_pool2d(images * 2 - 1, self.cfg.patch // 2)
        B, C, H, W = pooled.shape
        x = pooled.reshape(B, C, H // 2, 2, W // 2, 2).permute(0, 2, 4, 1, 3, 5).reshape(B, -1, C * 4)
        return x @ self.proj.to(x.dtype) + self.pos.to(x.dtype)


class ToyDenoiser(nn.Module):
    """Latent denoiser over ``[z_t; z_masked; mask]`` with a condition token stream.

    ``token`` mode runs joint attention over condition and image tokens
    (per-layer condition QKV); ``cross`` mode has image tokens cross-attend
    to the condition tokens.  Both go through the same QKV hook.
    """

    def __init__(self, cfg: ToyConfig = ToyConfig()):
        super().__init__()
        if cfg.cond_mode not in ("token", "cross"):
            raise ValueError(f"unknown cond_mode {cfg.cond_mode!r}")
        self.cfg = cfg
        D, c = cfg.cond_dim, cfg.latent_ch
        self.in_proj = nn.Linear(2 * c + 1, D)
        self.t_mlp = nn.Sequential(nn.Linear(D, D), nn.SiLU(), nn.Linear(D, D))
        self.layers = nn.ModuleList([DenoiserLayer(D, cfg.heads, cfg.cond_mode) for _ in range(cfg.layers)])
        self.norm_out = nn.LayerNorm(D)
        self.out_proj = nn.Linear(D, c)
        self.null_cond = nn.Parameter(torch.randn(cfg.n_tokens, D) * 0.02)
        self.captioner = ToyCaptioner(cfg)
        s = cfg.latent_size
        yy, xx = torch.meshgrid(torch.arange(s), torch.arange(s), indexing="ij")
        self.register_buffer("img_ids", torch.stack([yy.ravel(), xx.ravel()], 1).float(), persistent=False)
        self.last_token_counts: list[int] = []

    @property
    def in_channels(self) -> int:
        return 2 * self.cfg.latent_ch + 1

    def null_condition(self) -> ConditionBundle:
        return ConditionBundle(self.null_cond[None])

    def as_estimator(self, cond: ConditionBundle | None = None):
        """``f(z_t, z_cond, mask, t)`` view used by the one-step latent estimate."""
        return lambda z_t, z_cond, mask, t: self(z_t, z_cond, mask, cond, t)

    def forward(self, z_t, z_masked, mask, cond: ConditionBundle | None, t, qkv_hook: QKVHook | None = None):
        B, c, hh, ww = z_t.shape
        if (z_masked.shape != z_t.shape or mask.shape != (B, 1, hh, ww) or c != self.cfg.latent_ch
                or hh * ww != self.img_ids.shape[0]):
            raise ShapeError(f"inconsistent denoiser inputs: z_t {tuple(z_t.shape)}, z_masked "
                             f"{tuple(z_masked.shape)}, mask {tuple(mask.shape)}")
        cond = cond or self.null_condition()
        x = torch.cat([z_t, z_masked, mask], 1).flatten(2).transpose(1, 2)
        t = torch.as_tensor(t).reshape(-1).expand(B)
        temb = self.t_mlp(timestep_embedding(t, self.cfg.cond_dim).to(z_t.dtype))
        h = self.in_proj(x) + temb[:, None]
        tokens = cond.tokens
        if tokens.shape[-1] != self.cfg.cond_dim:
            raise ShapeError(f"condition width {tokens.shape[-1]} != {self.cfg.cond_dim}")
        c_tok = tokens.expand(B, -1, -1) if tokens.shape[0] == 1 else tokens
        img_ids = self.img_ids.to(z_t.dtype)
        cond_ids = cond.ids.to(z_t.dtype) if cond.ids is not None else torch.zeros(c_tok.shape[1], 2,
                                                                                   dtype=z_t.dtype)
        counts: list[int] = []
        for i, layer in enumerate(self.layers):
            h, c_tok = layer(h, c_tok, img_ids, cond_ids, i, qkv_hook, counts)
        self.last_token_counts = counts
        out = self.out_proj(self.norm_out(h))
        return out.transpose(1, 2).reshape(B, c, hh, ww)


def denoise(model: ToyDenoiser, z_t, z_masked, mask, condition: ConditionBundle | None, t):
    return model(z_t, z_masked, mask, condition, t)


def latent_mask(mask: torch.Tensor, down: int) -> torch.Tensor:
    """Pixel mask (B, 1, H, W) to latent resolution; a latent cell is masked if any pixel is."""
    return F.max_pool2d(mask, down)


# -- conditional VAE ----------------------------------------------------------------------

class ToyVAE(nn.Module):
    """Deterministic conv autoencoder with a mask-conditioned decoder.

    The decoder sees ``masked_image * (1 - mask)`` and ``mask``, both at the
    latent resolution (pooled) and at full resolution.
    """

    def __init__(self, cfg: ToyConfig = ToyConfig()):
        super().__init__()
        self.cfg = cfg
        w, lc = cfg.vae_width, cfg.latent_ch
        n_down = int(np.log2(cfg.latent_down))
        if 2 ** n_down != cfg.latent_down:
            raise ValueError("latent_down must be a power of two")
        enc = [nn.Conv2d(3, w, 3, padding=1), nn.SiLU()]
        for _ in range(n_down):
            enc += [nn.Conv2d(w, w, 4, stride=2, padding=1), nn.SiLU()]
        enc += [nn.Conv2d(w, lc, 1)]
        self.encoder = nn.Sequential(*enc)
        self.dec_in = nn.Sequential(nn.Conv2d(lc + 4, w, 3, padding=1), nn.SiLU(),
                                    nn.Conv2d(w, w, 3, padding=1), nn.SiLU())
        up = []
        for _ in range(n_down):
            up += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(w, w, 3, padding=1), nn.SiLU()]
        self.dec_up = nn.Sequential(*up)
        self.cond_full = nn.Sequential(nn.Conv2d(4, w, 3, padding=1), nn.SiLU())
        self.head = nn.Sequential(nn.Conv2d(2 * w, w, 3, padding=1), nn.SiLU(), nn.Conv2d(w, 3, 3, padding=1))

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        return self.encoder(image * 2 - 1)

    def decode_cond(self, latent, masked_image, mask) -> torch.Tensor:
        B, _, H, W = masked_image.shape
        if mask.shape != (B, 1, H, W) or latent.shape[-2:] != (H // self.cfg.latent_down, W // self.cfg.latent_down):
            raise ShapeError(f"decoder shape mismatch: latent {tuple(latent.shape)}, image "
                             f"{tuple(masked_image.shape)}, mask {tuple(mask.shape)}")
        cond = torch.cat([(masked_image * (1 - mask)) * 2 - 1, mask], 1)
        low = F.avg_pool2d(cond, self.cfg.latent_down)
        x = self.dec_up(self.dec_in(torch.cat([latent, low], 1)))
        x = self.head(torch.cat([x, self.cond_full(cond)], 1))
        return torch.sigmoid(x)

    def decode(self, latent) -> torch.Tensor:
        """Unconditioned decode: all-masked mask with a zero image."""
        B, _, h, w = latent.shape
        H, W = h * self.cfg.latent_down, w * self.cfg.latent_down
        return self.decode_cond(latent, latent.new_zeros(B, 3, H, W), latent.new_ones(B, 1, H, W))

    def decoder_parameters(self):
        for m in (self.dec_in, self.dec_up, self.cond_full, self.head):
            yield from m.parameters()


class IdentityVAE(nn.Module):
    """Exact space-to-depth codec; latent has ``3 * down**2`` channels."""

    def __init__(self, down: int = 8):
        super().__init__()
        self.down = down
        self.register_buffer("_dt", torch.zeros(0, dtype=torch.float64))

    @property
    def dtype(self):
        return self._dt.dtype

    def encode(self, image):
        return F.pixel_unshuffle(image, self.down)

    def decode_cond(self, latent, masked_image, mask):
        return F.pixel_shuffle(latent, self.down)


def check_param_budget(*modules: nn.Module, limit: int = MAX_PARAMS):
    for m in modules:
        n = count_params(m)
        if n >= limit:
            raise ValueError(f"{type(m).__name__} has {n} parameters, above the {limit} ceiling")


@dataclass
class Backbones:
    cfg: ToyConfig
    mae: ToyMAE
    denoiser: ToyDenoiser
    vae: ToyVAE

    @classmethod
    def build(cls, cfg: ToyConfig, seed: int) -> "Backbones":
        torch.manual_seed(seed)
        b = cls(cfg, ToyMAE(cfg), ToyDenoiser(cfg), ToyVAE(cfg))
        check_param_budget(b.mae, b.denoiser, b.vae)
        return b

    def modules(self) -> dict[str, nn.Module]:
        return {"mae": self.mae, "denoiser": self.denoiser, "vae": self.vae}

    def to(self, dtype) -> "Backbones":
        for m in self.modules().values():
            m.to(dtype)
        return self
