"""Does the alignment module learn anything, and at which learning rate?

Pretrains the toy backbones, then on one fixed batch reports the denoising
loss with no condition, with the built-in caption condition, and with aligned
MAE priors (predicted and reconstructed) before and after training at each lr.
Training-trace medians of the first and last 10% are printed too.

    python3 scripts/alignment_probe.py --lrs 3.9e-4 5e-3 5e-2 --steps 2000
"""

import argparse
import copy
import sys
import time
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from asuka_lab.alignment import AlignmentModule, align, batch_priors, train_alignment
from asuka_lab.backbones import ConditionBundle
from asuka_lab.schedules import NoiseSchedule
from asuka_lab.seeding import stream
from asuka_lab.training import diffusion_batch

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
from conftest import build_pretrained  # noqa: E402


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--lrs", type=float, nargs="+", default=[5e-2 * 8 / 1024, 5e-3, 5e-2])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--eval-batch", type=int, default=512)
    ap.add_argument("--cond-mode", default="token", choices=["token", "cross"])
    args = ap.parse_args()

    b, corpus = build_pretrained(cond_mode=args.cond_mode)
    sched = NoiseSchedule()
    bt = diffusion_batch(stream(321), corpus, b, sched, args.eval_batch)
    pred, rec = batch_priors(b, bt.images, bt.np_masks, stream(322))

    def loss(cond):
        with torch.no_grad():
            return F.mse_loss(b.denoiser(bt.z_t, bt.z_masked, bt.lmask, cond, bt.t), bt.target).item()

    def aligned(m):
        return {name: round(loss(ConditionBundle(align(m, p.tokens))), 4) for name, p in (("pred", pred), ("rec", rec))}

    print("no condition", round(loss(None), 4))
    print("caption     ", round(loss(ConditionBundle(b.denoiser.captioner(bt.images))), 4))
    for lr in args.lrs:
        torch.manual_seed(0)
        init = AlignmentModule(b.cfg.mae_dim, b.cfg.cond_dim, heads=b.cfg.heads).eval()
        t0 = time.perf_counter()
        m, res = train_alignment(copy.deepcopy(b), corpus, sched, args.steps, 0, batch=args.batch, lr=lr)
        trace = np.array([r["loss"] for r in res.trace])
        k = max(1, len(trace) // 10)
        print(f"lr {lr:.3g}: init {aligned(init)} trained {aligned(m)} "
              f"trace {np.median(trace[:k]):.4f} -> {np.median(trace[-k:]):.4f} ({time.perf_counter() - t0:.0f}s)")


if __name__ == "__main__":
    main()
