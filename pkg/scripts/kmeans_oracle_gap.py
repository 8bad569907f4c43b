"""How often does bisecting k-means miss the globally optimal k-partition?

Compares the final SSE against an exhaustive search over all partitions for
small n, on well-separated blobs and on uniform points.
"""

import argparse
import itertools

import numpy as np

from asuka_lab.dataset import bisecting_kmeans
from asuka_lab.seeding import stream


def sse_of(x, labels):
    return sum(float(((x[labels == c] - x[labels == c].mean(0)) ** 2).sum()) for c in np.unique(labels))


def exhaustive_sse(x, k):
    best = np.inf
    for lab in itertools.product(range(k), repeat=len(x)):
        if lab[0] == 0 and len(set(lab)) == k:
            best = min(best, sse_of(x, np.array(lab)))
    return best


def instance(rng, n, k, kind):
    if kind == "uniform":
        return rng.random((n, 2))
    centres = rng.random((k, 2)) * 100
    return centres[np.r_[np.arange(k), rng.integers(0, k, n - k)]] + rng.random((n, 2))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--trials", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    for kind in ("clustered", "uniform"):
        misses, gaps = 0, []
        for i in range(args.trials):
            rng = stream(args.seed, kind, i)
            n = int(rng.integers(3, 9))
            k = int(rng.integers(2, min(3, n) + 1))
            x = instance(rng, n, k, kind)
            got = bisecting_kmeans(x, k, stream(args.seed, "km", i)).sse_history[-1]
            opt = exhaustive_sse(x, k)
            if got > opt * (1 + 1e-9) + 1e-12:
                misses += 1
                gaps.append(got / opt - 1)
        worst = max(gaps, default=0.0)
        print(f"{kind:9s}: {misses}/{args.trials} above the optimum, worst relative gap {worst:.3f}")


if __name__ == "__main__":
    main()
