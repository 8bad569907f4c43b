"""Shared fixtures.

``pretrained`` is a small seeded backbone set trained once per session; the
2,000-step freeze runs are session fixtures too, shared by the module tests
and the acceptance suite.
"""

import copy
import time

import pytest
import torch

from asuka_lab.alignment import train_alignment
from asuka_lab.backbones import Backbones, ToyConfig
from asuka_lab.checkpoint import module_hash
from asuka_lab.decoder import color_shift_eval_set, evaluate_gae, train_decoder
from asuka_lab.images import toy_corpus
from asuka_lab.injection import train_inject
from asuka_lab.schedules import NoiseSchedule, latent_augment_corpus
from asuka_lab.training import pretrain_backbones

SEED = 0
PRETRAIN_STEPS = dict(vae_steps=400, mae_steps=300, denoiser_steps=500)


def build_pretrained(seed: int = SEED, cond_mode: str = "token"):
    cfg = ToyConfig(cond_mode=cond_mode)
    b = Backbones.build(cfg, seed)
    corpus = toy_corpus(seed, 64, cfg.image_size)
    pretrain_backbones(b, corpus, NoiseSchedule(), seed, batch=8, **PRETRAIN_STEPS)
    return b, corpus


@pytest.fixture(scope="session")
def pretrained():
    return build_pretrained()


@pytest.fixture
def fresh(pretrained):
    """A private copy of the pretrained backbones."""
    b, corpus = pretrained
    return copy.deepcopy(b), corpus


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


@pytest.fixture(scope="session")
def align_run(pretrained, tmp_path_factory):
    b = copy.deepcopy(pretrained[0])
    hashes = {k: module_hash(m) for k, m in b.modules().items()}
    (module, res), secs = _timed(lambda: train_alignment(b, pretrained[1], NoiseSchedule(), 2000, SEED, batch=8,
                                                         lr=ALIGN_LR, out_dir=tmp_path_factory.mktemp("align")))
    return {"backbones": b, "module": module, "result": res, "hashes": hashes, "seconds": secs}


@pytest.fixture(scope="session")
def inject_run(pretrained, tmp_path_factory):
    b = copy.deepcopy(pretrained[0])
    hashes = {k: module_hash(m) for k, m in b.modules().items()}
    (injected, res), secs = _timed(lambda: train_inject(b, pretrained[1], NoiseSchedule(), 2000, SEED, batch=4,
                                                        out_dir=tmp_path_factory.mktemp("inject")))
    return {"backbones": b, "injected": injected, "result": res, "hashes": hashes, "seconds": secs}


@pytest.fixture(scope="session")
def decoder_run(pretrained, tmp_path_factory):
    """Seeded toy decoder run plus the paired G@e evaluation on 200 held-out items."""
    b, corpus = pretrained

    def run():
        baseline = copy.deepcopy(b.vae)
        vae = copy.deepcopy(b.vae)
        enc_hash = module_hash(vae.encoder)
        items = [(f"train{i:03d}", img) for i, img in enumerate(corpus)]
        cache = latent_augment_corpus(items, b.vae, b.denoiser.as_estimator(), NoiseSchedule(), SEED,
                                      tmp_path_factory.mktemp("latent_cache"), apply_prob=1.0).images
        res = train_decoder(vae, corpus, 2000, SEED, batch=8, lr=2e-3, latent_cache=cache, latent_prob=0.5,
                            out_dir=tmp_path_factory.mktemp("decoder"))
        items = color_shift_eval_set(SEED + 1, toy_corpus(SEED, 200, 64, "eval"))
        trained = evaluate_gae(vae, items, conditional=True)
        base = evaluate_gae(baseline, items, conditional=False)
        return {"vae": vae, "baseline": baseline, "result": res, "encoder_hash": enc_hash,
                "gae_trained": trained, "gae_baseline": base, "items": items}

    out, secs = _timed(run)
    out["seconds"] = secs
    return out


ALIGN_LR = 5e-2 * 8 / 1024

ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)


@pytest.fixture
def f64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)
