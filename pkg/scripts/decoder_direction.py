"""Train the harmonization decoder on the toy corpus and compare paired G@e
against the plain decoder on a held-out colour-shift set.

    python3 scripts/decoder_direction.py --steps 2000 --items 200 --out runs/decoder_direction
"""

import argparse
import copy
import json
import time
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from asuka_lab.backbones import Backbones, ToyConfig
from asuka_lab.decoder import color_shift_eval_set, evaluate_gae, train_decoder
from asuka_lab.images import toy_corpus
from asuka_lab.schedules import NoiseSchedule, latent_augment_corpus
from asuka_lab.training import pretrain_backbones


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--items", type=int, default=200)
    ap.add_argument("--lr", type=float, default=2e-3)
    ap.add_argument("--latent-prob", type=float, default=0.5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("runs/decoder_direction"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    cfg = ToyConfig()
    b = Backbones.build(cfg, args.seed)
    corpus = toy_corpus(args.seed, 64, cfg.image_size)
    pretrain_backbones(b, corpus, NoiseSchedule(), args.seed, batch=8, vae_steps=400, mae_steps=300,
                       denoiser_steps=500)
    baseline, vae = copy.deepcopy(b.vae), copy.deepcopy(b.vae)
    cache = None
    if args.latent_prob > 0:
        named = [(f"train{i:03d}", img) for i, img in enumerate(corpus)]
        cache = latent_augment_corpus(named, b.vae, b.denoiser.as_estimator(), NoiseSchedule(), args.seed,
                                      args.out / "latent_cache", apply_prob=1.0).images
    res = train_decoder(vae, corpus, args.steps, args.seed, batch=8, lr=args.lr, latent_cache=cache,
                        latent_prob=args.latent_prob, out_dir=args.out)

    items = color_shift_eval_set(args.seed + 1, toy_corpus(args.seed, args.items, cfg.image_size, "eval"))
    trained = evaluate_gae(vae, items, conditional=True)
    base = evaluate_gae(baseline, items, conditional=False)
    # stronger control: the untrained decoder also given the visible pixels and mask
    base_cond = evaluate_gae(baseline, items, conditional=True)
    diff = trained - base
    summary = {"steps": args.steps, "items": len(items), "gae_trained": float(trained.mean()),
               "gae_baseline": float(base.mean()), "gae_baseline_conditional": float(base_cond.mean()),
               "frac_improved": float((diff < 0).mean()),
               "paired_se": float(diff.std(ddof=1) / np.sqrt(len(diff))),
               "seconds": time.perf_counter() - t0}
    print(json.dumps(summary, indent=1))
    (args.out / "summary.json").write_text(json.dumps(summary, indent=1))

    losses = [r["loss"] for r in res.trace]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.5))
    a1.plot(losses, lw=0.5)
    a1.set_xlabel("step")
    a1.set_ylabel("decoder loss")
    lim = max(base.max(), trained.max())
    a2.scatter(base, trained, s=6)
    a2.plot([0, lim], [0, lim], "k--", lw=0.8)
    a2.set_xlabel("G@e plain decoder")
    a2.set_ylabel("G@e trained decoder")
    fig.tight_layout()
    fig.savefig(args.out / "decoder_direction.png", dpi=120)


if __name__ == "__main__":
    main()
