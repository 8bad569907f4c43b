"""The thirteen acceptance criteria, one test each.

Every test records a single ``criterion N: PASS|FAIL  <detail>`` line; the
lines are printed again as a block at the end of the pytest run.
"""

import json
import time

import numpy as np
import pytest
import torch

from asuka_lab.alignment import AlignmentModule, choose_prior, schedule_p
from asuka_lab.backbones import MAEPrior
from asuka_lab.checkpoint import module_hash
from asuka_lab.cli import main
from asuka_lab.dataset import bisecting_kmeans
from asuka_lab.images import toy_object_pool
from asuka_lab.injection import LoRAAdapter, PositionalScaling, fuse_condition, scaled_pos_ids
from asuka_lab.judge import JudgeClient, JudgeConfig
from asuka_lab.masks import BASE_TYPES, sample_mask
from asuka_lab.metrics import BoundaryBand, deep_interior, gradient_at_edge
from asuka_lab.schedules import FAMILIES, NoiseSchedule, add_noise, one_step_estimate, training_target
from asuka_lab.seeding import stream
from asuka_lab.stub_judge import StubJudgeServer, mixed_reply

from conftest import ACCEPTANCE
from test_dataset import clustered_instance, exhaustive_sse
from test_injection import build, inputs, random_fusion_instance, straight_line


def verdict(n: int, ok: bool, detail: str):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line


def directional_rel_err(loss_fn, params, gen, h=1e-5):
    """Worst relative error between autograd and a central difference along a random unit direction."""
    worst = 0.0
    for p in params:
        (grad,) = torch.autograd.grad(loss_fn(), p)
        v = torch.randn(p.shape, generator=gen, dtype=torch.float64)
        v /= v.norm()
        with torch.no_grad():
            p.add_(h * v)
            up = float(loss_fn())
            p.sub_(2 * h * v)
            down = float(loss_fn())
            p.add_(h * v)
        fd, an = (up - down) / (2 * h), float((grad * v).sum())
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-300))
    return worst


def test_c01_mask_mixture():
    t0 = time.perf_counter()
    pool = toy_object_pool(0, 8, 32)
    n = 10_000
    tags = [sample_mask(stream(101, i), 64, 64, pool)[1] for i in range(n)]
    secs = time.perf_counter() - t0
    freqs = {t: tags.count(t) / n for t in BASE_TYPES}
    dev = max(abs(freqs[t] - p) for t, p in zip(BASE_TYPES, (0.5, 0.4, 0.1)))
    verdict(1, dev <= 0.02 and secs < 30,
            f"freqs {', '.join(f'{t}={f:.4f}' for t, f in freqs.items())}; max dev {dev:.4f}; {secs:.1f}s")


class _Oracle:
    def __init__(self, z0, eps, s):
        self.target = training_target(z0, eps, s)

    def __call__(self, z_t, z0_cond, mask, t):
        return self.target


def test_c02_one_step_oracle_and_identities():
    worst, ident = {}, {}
    for fam in FAMILIES:
        s = NoiseSchedule(fam)
        rng = stream(102, fam)
        err = 0.0
        for _ in range(100):
            z0, eps = rng.standard_normal((4, 8, 8)), rng.standard_normal((4, 8, 8))
            t = int(rng.integers(500, 1000))
            z_hat = one_step_estimate(add_noise(z0, eps, t, s), t, _Oracle(z0, eps, s), z0, s)
            err = max(err, float(np.abs(z_hat - z0).max()))
        worst[fam] = err
        a, b = s.coeffs(np.arange(s.T))
        ident[fam] = float(np.abs(a ** 2 + b ** 2 - 1).max() if fam == "diffusion" else np.abs(a + b - 1).max())
    ok = all(v < 1e-6 for v in worst.values()) and all(v < 1e-9 for v in ident.values())
    verdict(2, ok, f"max recovery error {worst}; identity residual {ident}")


def test_c03_gate_closed_noop(f64):
    worst = 0.0
    for mode in ("token", "cross"):
        from asuka_lab.backbones import ToyConfig
        cfg = ToyConfig(image_size=32, cond_dim=32, mae_dim=16, heads=2, layers=2, cond_mode=mode)
        den, inj = build(seed=3, cfg=cfg)
        inj.force_gates(0.0)
        for seed in range(20):
            z, zm, m, tok, t = inputs(seed, cfg)
            with torch.no_grad():
                worst = max(worst, float((inj(z, zm, m, tok, t) - den(z, zm, m, inj.base_condition(), t)).abs().max()))
    verdict(3, worst < 1e-9, f"max |injected - uninjected| = {worst:.3e} over 20 inputs x 2 conditioning modes")


def test_c04_gradient_checks(f64):
    errs = {"alignment": 0.0, "lora": 0.0, "gates": 0.0, "task_prompt": 0.0}
    for draw in range(10):
        g = torch.Generator().manual_seed(1000 + draw)
        # alignment module, parameters and input
        torch.manual_seed(draw)
        m = AlignmentModule(8, 16, blocks=2, heads=2).double()
        with torch.no_grad():
            for p in m.parameters():
                p.add_(torch.randn(p.shape, generator=g, dtype=torch.float64) * 0.1)
        x = torch.randn(1, 5, 8, generator=g, dtype=torch.float64, requires_grad=True)
        w = torch.randn(1, 5, 16, generator=g, dtype=torch.float64)
        errs["alignment"] = max(errs["alignment"], directional_rel_err(lambda: (m(x) * w).sum(), [x, *m.parameters()], g))
        # standalone LoRA adapter
        a = LoRAAdapter(6, 2).double()
        with torch.no_grad():
            a.up.copy_(torch.randn(2, 6, generator=g, dtype=torch.float64))
        xin = torch.randn(4, 6, generator=g, dtype=torch.float64)
        wl = torch.randn(4, 6, generator=g, dtype=torch.float64)
        errs["lora"] = max(errs["lora"], directional_rel_err(lambda: (a(xin) * wl).sum(), list(a.parameters()), g))
        # adapters, gates and prompt inside the injected denoiser
        den, inj = build(seed=draw)
        with torch.no_grad():
            for layer in inj.gates:
                for gm in layer:
                    gm.linear.bias.zero_()
        z, zm, mk, tok, t = inputs(200 + draw)
        wz = torch.randn(z.shape, generator=g, dtype=torch.float64)
        loss = lambda: (inj(z, zm, mk, tok, t) * wz).sum()
        errs["lora"] = max(errs["lora"], directional_rel_err(loss, list(inj.adapters.parameters()), g))
        errs["gates"] = max(errs["gates"], directional_rel_err(loss, list(inj.gates.parameters()), g))
        errs["task_prompt"] = max(errs["task_prompt"], directional_rel_err(loss, list(inj.task_prompt.parameters()), g))
    verdict(4, all(v < 1e-4 for v in errs.values()),
            "max rel err over 10 draws: " + ", ".join(f"{k}={v:.2e}" for k, v in errs.items()))


def test_c05_freeze_invariants(align_run, inject_run, decoder_run):
    checks = {
        "align": {k: module_hash(m) for k, m in align_run["backbones"].modules().items()} == align_run["hashes"],
        "inject": {k: module_hash(m) for k, m in inject_run["backbones"].modules().items()} == inject_run["hashes"],
        "decoder(encoder)": module_hash(decoder_run["vae"].encoder) == decoder_run["encoder_hash"],
    }
    steps = {k: len(r["result"].trace) for k, r in (("align", align_run), ("inject", inject_run),
                                                       ("decoder", decoder_run))}
    ok = all(checks.values()) and all(v == 2000 for v in steps.values())
    verdict(5, ok, f"hashes unchanged {checks}; steps {steps}")


def test_c06_p_schedule():
    exact = schedule_p(0) == 1.0 and schedule_p(1000) == 0.55 and all(schedule_p(s) == 0.1 for s in (2000, 2001, 9999))
    pred = MAEPrior(torch.zeros(1, 16, 4), 4, (4, 4), "predicted")
    rec = MAEPrior(torch.ones(1, 16, 4), 4, (4, 4), "reconstructed")
    n, worst = 10_000, 0.0
    for step in (0, 250, 1000, 1500, 3000):
        rng = stream(106, step)
        hits = sum(choose_prior(rng, step, pred, rec).source == "reconstructed" for _ in range(n))
        p = schedule_p(step)
        sigma = np.sqrt(p * (1 - p) / n)
        z = abs(hits / n - p) / sigma if sigma > 0 else (0.0 if hits / n == p else np.inf)
        worst = max(worst, z)
    verdict(6, exact and worst <= 3, f"exact values {exact}; worst |z| over 5 steps = {worst:.2f}")


def test_c07_fusion_fidelity():
    worst = 0.0
    for seed in range(50):
        f_task, f_mae, Ws, adapters, gates = random_fusion_instance(500 + seed)
        with torch.no_grad():
            got = fuse_condition(f_task, f_mae, Ws, adapters, gates)
            want = straight_line(f_task, f_mae, Ws, [a.delta_weight() for a in adapters],
                                 [g.linear.weight for g in gates], [g.linear.bias for g in gates])
        worst = max(worst, max(float((a - b).abs().max()) for a, b in zip(got, want)))
    verdict(7, worst < 1e-10, f"max deviation {worst:.3e} over 50 instances")


def test_c08_positional_scaling():
    results = {}
    for r_img, r_mae in ((64, 16), (48, 16), (16, 16)):
        ps = PositionalScaling(r_img, r_mae)
        S = r_img // r_mae
        want = np.array([(r * S, c * S) for r in range(r_mae) for c in range(r_mae)], dtype=np.float64)
        results[(r_img, r_mae)] = ps.scale == S and np.array_equal(scaled_pos_ids(ps).numpy(), want)
    verdict(8, all(results.values()), f"S and ID grids match: {results}")


def test_c09_decoder_direction(decoder_run):
    tr, base = decoder_run["gae_trained"], decoder_run["gae_baseline"]
    ok = len(tr) >= 200 and tr.mean() < base.mean() and decoder_run["seconds"] < 1200
    verdict(9, ok, f"mean G@e trained {tr.mean():.3f} vs baseline {base.mean():.3f} "
                   f"(paired wins {(tr < base).sum()}/{len(tr)}); run+eval {decoder_run['seconds']:.0f}s")


def test_c10_gae_correctness():
    rng = stream(110)
    img = rng.random((32, 32, 3))
    m = np.zeros((32, 32))
    m[8:20, 5:25] = 1
    zero = gradient_at_edge(img, img, m) == 0.0
    hm = np.zeros((4, 4))
    hm[:, :2] = 1
    gt = np.zeros((4, 4, 3))
    hand = gradient_at_edge(gt + hm[..., None] * (10 / 255), gt, hm)
    invariant = True
    for i in range(50):
        r = stream(110, i)
        mask = np.zeros((32, 32))
        r0, c0 = r.integers(0, 16, 2)
        mask[r0:r0 + r.integers(8, 16), c0:c0 + r.integers(8, 16)] = 1
        pred, gt2 = r.random((32, 32, 3)), r.random((32, 32, 3))
        deep = deep_interior(mask)
        assert not (deep & BoundaryBand.from_mask(mask).band).any()
        changed = pred.copy()
        changed[deep] = r.random((int(deep.sum()), 3))
        invariant &= gradient_at_edge(changed, gt2, mask) == gradient_at_edge(pred, gt2, mask)
    verdict(10, zero and hand == 2.5 and invariant,
            f"identical->0: {zero}; 4x4 hand value 2.5, got {hand!r}; deep-interior invariance on 50 masks: {invariant}")


def test_c11_bisecting_kmeans():
    mismatches, instances = 0, 0
    for n in range(1, 9):
        for k in range(1, min(3, n) + 1):
            for seed in range(5):
                x = clustered_instance(seed, n, k)
                got = bisecting_kmeans(x, k, stream(seed)).sse_history[-1]
                instances += 1
                mismatches += abs(got - exhaustive_sse(x, k)) > 1e-9 * max(1.0, got)
    monotone = all(np.all(np.diff(bisecting_kmeans(stream(s, "sse").normal(size=(200, 6)), 25,
                                                   stream(s)).sse_history) <= 1e-9) for s in range(5))
    # unstructured points, reported for context: bisecting is greedy, the oracle is global
    rng, loose = stream(111, "uniform"), 0
    for _ in range(100):
        nn_ = int(rng.integers(3, 9))
        kk = int(rng.integers(2, 4))
        x = rng.random((nn_, 2))
        loose += bisecting_kmeans(x, kk, stream(1)).sse_history[-1] > exhaustive_sse(x, kk) + 1e-9
    verdict(11, mismatches == 0 and monotone,
            f"{instances - mismatches}/{instances} clustered instances match the exhaustive oracle; "
            f"SSE monotone at n=200: {monotone}; (uniform points above global optimum: {loose}/100)")


def test_c12_judge_client():
    items = [(f"item_{i:03d}", np.full((8, 20, 3), 0.5)) for i in range(100)]
    with StubJudgeServer(mixed_reply, delay_s=0.01) as s:
        client = JudgeClient(JudgeConfig(base_url=s.base_url, max_in_flight=4, backoff_s=0.001))
        t0 = time.perf_counter()
        recs = client.judge_many(items, item_timeout_s=10)
        secs = time.perf_counter() - t0
        peak = s.max_in_flight
    correct = 0
    for r in recs:
        kind = mixed_reply(r["id"])
        if kind == "garbage":
            correct += r["verdict"] is None and (r["error"] or "").startswith("protocol")
        else:
            correct += r["verdict"] is (kind == "yes") and r["error"] is None
    stalls = sum(r["error"] == "timeout" for r in recs)
    ok = len(recs) == 100 and correct == 100 and stalls == 0 and peak <= 4
    verdict(12, ok, f"{correct}/100 correct, {stalls} stalls, peak in-flight {peak}, {secs:.2f}s")


def test_c13_demo_determinism(tmp_path):
    args = ["demo-inpaint", "--seed", "13", "--set", "pretrain.vae_steps=60", "--set", "pretrain.mae_steps=60",
            "--set", "pretrain.denoiser_steps=60", "--set", "corpus.n_train=16", "--set", "corpus.n_eval=4"]
    digests, arrays = [], []
    for sub in ("first", "second"):
        root = tmp_path / sub  # separate roots: each run pretrains from scratch
        assert main(args + ["--run-root", str(root)]) == 0
        (run,) = [p for p in root.iterdir() if not p.name.startswith(".")]
        digests.append(json.loads((run / "metrics.json").read_text())["composite_sha256"])
        arrays.append(np.load(run / "demo" / "composite.npy"))
    same = digests[0] == digests[1] and np.array_equal(arrays[0], arrays[1])
    verdict(13, same, f"composite sha256 {digests[0][:16]}... vs {digests[1][:16]}...; bit-identical: {same}")
