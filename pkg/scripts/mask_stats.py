"""Base-type frequencies, ratio distribution and fallback rate of the training-mask sampler.

    python3 scripts/mask_stats.py --n 10000 --size 64 --out runs/mask_stats.png
"""

import argparse
import time
from collections import Counter

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from asuka_lab.images import toy_object_pool
from asuka_lab.masks import BASE_TYPES, MaskRecipe, ratio, sample_mask_detailed
from asuka_lab.seeding import stream


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=10_000)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--no-objects", action="store_true")
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    pool = [] if args.no_objects else toy_object_pool(args.seed, side=args.size // 2)
    recipe = MaskRecipe()
    tags, ratios, fallbacks = Counter(), {t: [] for t in BASE_TYPES}, 0
    t0 = time.perf_counter()
    for i in range(args.n):
        s = sample_mask_detailed(stream(args.seed, "mask", i), args.size, args.size, pool, recipe)
        tags[s.tag] += 1
        ratios[s.tag].append(ratio(s.mask))
        fallbacks += s.fallback
    secs = time.perf_counter() - t0

    expected = recipe.base_probs(bool(pool))
    print(f"{args.n} masks in {secs:.1f}s, fallback rectangles: {fallbacks}")
    for t in BASE_TYPES:
        r = np.array(ratios[t]) if ratios[t] else np.zeros(1)
        print(f"  {t:9s} freq {tags[t] / args.n:.4f} (expected {expected[t]:.2f})  "
              f"ratio mean {r.mean():.3f} min {r.min():.3f} max {r.max():.3f}")

    if args.out:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.hist([ratios[t] for t in BASE_TYPES], bins=30, stacked=True, label=list(BASE_TYPES))
        ax.set_xlabel("mask ratio")
        ax.set_ylabel("count")
        ax.legend()
        fig.tight_layout()
        fig.savefig(args.out, dpi=120)
        print("wrote", args.out)


if __name__ == "__main__":
    main()
