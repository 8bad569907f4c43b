import json
from pathlib import Path

import numpy as np
import pytest
import torch

from asuka_lab.backbones import (Backbones, ConditionBundle, MAEPrior, ShapeError, ToyConfig, ToyDenoiser, ToyMAE,
                                 ToyVAE, check_param_budget, denoise, mae_predict, mae_reconstruct)
from asuka_lab.checkpoint import (checkpoint_hash, load_checkpoint, load_module, module_hash, save_checkpoint,
                                  save_module)
from asuka_lab.decoder import reconstruction_l2
from asuka_lab.images import to_tensor, toy_corpus
from asuka_lab.layers import count_params
from asuka_lab.seeding import stream

FIXTURES = Path(__file__).parent / "fixtures"


def images(n=2, size=64, seed=0):
    return to_tensor(np.stack(toy_corpus(seed, n, size, "unit")))


def test_param_budget():
    b = Backbones.build(ToyConfig(), 0)
    for m in b.modules().values():
        assert count_params(m) < 5_000_000
    with pytest.raises(ValueError):
        check_param_budget(torch.nn.Linear(10, 10), limit=50)


# -- MAE ---------------------------------------------------------------------------

def test_empty_mask_prediction_equals_reconstruction():
    mae = ToyMAE().eval()
    x = images()
    zero = torch.zeros(4, 4, dtype=torch.bool)
    p, r = mae_predict(mae, x, zero), mae_reconstruct(mae, x)
    assert torch.equal(p.tokens, r.tokens)
    assert p.source == "predicted" and r.source == "reconstructed"


def test_mae_grid_arithmetic_at_256():
    cfg = ToyConfig(image_size=256)
    mae = ToyMAE(cfg).eval()
    seen = []
    mae.enc[0].register_forward_hook(lambda m, inp, out: seen.append(inp[0].shape))
    pm = torch.zeros(16, 16, dtype=torch.bool)
    pm.view(-1)[torch.from_numpy(stream(0).permutation(256)[:192])] = True
    prior = mae_predict(mae, images(1, 256), pm)
    assert prior.tokens.shape == (1, 256, 64)
    assert seen[0][1] == 64


def test_mae_deterministic_and_batched_matches_single():
    mae = ToyMAE().eval()
    x = images(4)
    rng = stream(1)
    pm = torch.from_numpy(rng.random((4, 4, 4)) < 0.5)
    pm[:, 0, 0] = False
    a = mae_predict(mae, x, pm).tokens
    b = mae_predict(mae, x, pm).tokens
    assert torch.equal(a, b)
    for i in range(4):
        single = mae_predict(mae, x[i:i + 1], pm[i:i + 1]).tokens
        assert torch.allclose(single, a[i:i + 1], atol=1e-6)


def test_mae_errors():
    mae = ToyMAE().eval()
    with pytest.raises(ShapeError):
        mae_predict(mae, images(1, 48), torch.zeros(3, 3, dtype=torch.bool))
    with pytest.raises(ShapeError):
        mae_predict(mae, images(1), torch.zeros(3, 3, dtype=torch.bool))
    with pytest.raises(ShapeError):
        mae_predict(mae, images(1), torch.ones(4, 4, dtype=torch.bool))
    with pytest.raises(ValueError):
        MAEPrior(torch.zeros(1, 16, 64), 16, (4, 4), "guessed")


def test_mae_reconstruction_beats_prediction(pretrained):
    b, _ = pretrained
    x = images(16, 64, seed=99)
    g = b.cfg.grid
    pm = torch.zeros(16, g, g, dtype=torch.bool)
    for i in range(16):
        pm[i].view(-1)[torch.from_numpy(stream(5, i).permutation(g * g)[:12])] = True
    with torch.no_grad():
        rec = ((b.mae.to_image(mae_reconstruct(b.mae, x).tokens) - x) ** 2).mean()
        pred = ((b.mae.to_image(mae_predict(b.mae, x, pm).tokens) - x) ** 2).mean()
    assert rec < pred


# -- denoiser -------------------------------------------------------------------------

@pytest.mark.parametrize("mode", ["token", "cross"])
def test_denoiser_shapes(mode):
    cfg = ToyConfig(cond_mode=mode)
    den = ToyDenoiser(cfg).eval()
    assert den.in_channels == 2 * cfg.latent_ch + 1
    z = torch.randn(2, 4, 8, 8)
    out = denoise(den, z, z, torch.zeros(2, 1, 8, 8), None, torch.tensor([10, 900]))
    assert out.shape == z.shape
    with pytest.raises(ShapeError):
        den(z, z[:, :3], torch.zeros(2, 1, 8, 8), None, 5)
    with pytest.raises(ShapeError):
        den(z, z, torch.zeros(2, 1, 8, 8), ConditionBundle(torch.zeros(1, 16, 64)), 5)


@pytest.mark.parametrize("mode", ["token", "cross"])
def test_denoiser_condition_gradcheck(mode, f64):
    cfg = ToyConfig(cond_mode=mode, cond_dim=32, layers=2, heads=2, image_size=32)
    torch.manual_seed(0)
    den = ToyDenoiser(cfg).double().eval()
    s = cfg.latent_size
    for draw in range(10):
        g = torch.Generator().manual_seed(draw)
        z = torch.randn(1, 4, s, s, generator=g, dtype=torch.float64)
        zm = torch.randn(1, 4, s, s, generator=g, dtype=torch.float64)
        m = (torch.rand(1, 1, s, s, generator=g) < 0.5).double()
        tok = torch.randn(1, cfg.n_tokens, 32, generator=g, dtype=torch.float64, requires_grad=True)
        w = torch.randn(1, 4, s, s, generator=g, dtype=torch.float64)
        f = lambda tk: (den(z, zm, m, ConditionBundle(tk), 700) * w).sum()
        assert torch.autograd.gradcheck(f, (tok,), eps=1e-6, atol=1e-8, rtol=1e-4)


def test_eq1_conditioning_regime():
    den = ToyDenoiser().eval()
    z0 = torch.randn(1, 4, 8, 8)
    zero = torch.zeros(1, 1, 8, 8)
    seen = []
    den.in_proj.register_forward_hook(lambda m, inp, out: seen.append(inp[0]))
    den(torch.randn(1, 4, 8, 8), z0, zero, None, 600)
    x = seen[0].transpose(1, 2).reshape(1, 9, 8, 8)
    assert torch.equal(x[:, 4:8], z0) and not x[:, 8].any()


# -- VAE ---------------------------------------------------------------------------

def test_vae_shapes_and_range():
    vae = ToyVAE().eval()
    x = images(2)
    z = vae.encode(x)
    assert z.shape == (2, 4, 8, 8)
    out = vae.decode_cond(z, x, torch.zeros(2, 1, 64, 64))
    assert out.shape == x.shape and out.min() >= 0 and out.max() <= 1
    with pytest.raises(ShapeError):
        vae.decode_cond(z, x, torch.zeros(2, 1, 32, 32))


def test_all_masked_conditioning_is_ignored():
    vae = ToyVAE().eval()
    z = torch.randn(1, 4, 8, 8)
    ones = torch.ones(1, 1, 64, 64)
    a = vae.decode_cond(z, images(1, seed=1), ones)
    b = vae.decode_cond(z, images(1, seed=2), ones)
    assert torch.equal(a, b)
    assert torch.equal(a, vae.decode(z))


def test_masked_pixels_never_influence_decoder():
    vae = ToyVAE().eval()
    z = torch.randn(1, 4, 8, 8)
    m = torch.zeros(1, 1, 64, 64)
    m[..., 10:40, 20:50] = 1
    x = images(1)
    y = x.clone()
    y[..., 10:40, 20:50] = torch.rand(1, 3, 30, 30)
    assert torch.equal(vae.decode_cond(z, x, m), vae.decode_cond(z, y, m))


def test_vae_roundtrip_below_recorded_threshold(pretrained):
    b, _ = pretrained
    fixture = json.loads((FIXTURES / "vae_recon_threshold.json").read_text())
    held_out = toy_corpus(0, 32, 64, "heldout")
    assert reconstruction_l2(b.vae, held_out, conditional=True) < fixture["threshold"]


# -- checkpoints -------------------------------------------------------------------

def test_checkpoint_bit_exact_and_byte_stable(tmp_path):
    m = ToyMAE()
    save_module(tmp_path / "a", m, {"k": 1})
    save_module(tmp_path / "b", m, {"k": 1})
    for f in ("header.json", "tensors.bin"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    m2 = ToyMAE()
    load_module(tmp_path / "a", m2)
    assert module_hash(m2) == module_hash(m)
    for (k, v), (_, w) in zip(m.state_dict().items(), m2.state_dict().items()):
        assert torch.equal(v, w), k
    assert checkpoint_hash(tmp_path / "a") == checkpoint_hash(tmp_path / "b")
    header = json.loads((tmp_path / "a" / "header.json").read_text())
    assert "config_hash" in header and header["tensors"]


def test_checkpoint_dtype_roundtrip(tmp_path):
    state = {"a": torch.arange(6, dtype=torch.float64).reshape(2, 3), "b": torch.tensor([1, 2], dtype=torch.int64)}
    save_checkpoint(tmp_path / "c", state)
    loaded, _ = load_checkpoint(tmp_path / "c")
    for k in state:
        assert loaded[k].dtype == state[k].dtype and torch.equal(loaded[k], state[k])


def test_eval_mode_determinism():
    b = Backbones.build(ToyConfig(), 3)
    x = images(2)
    z1 = b.vae.eval().encode(x)
    z2 = b.vae.encode(x)
    assert torch.equal(z1, z2)
