"""Benchmark construction: embed a corpus, cluster it with bisecting k-means,
keep the member nearest each centre, crop/resize and attach masks."""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import cv2
import httpx
import numpy as np

from .images import save_png
from .masks import MaskRecipe, as_mask, ratio, sample_mask, save_mask_png
from .seeding import stream

DOMAINS = ("indoor", "landscape", "building", "background")
EXACT_PAIR_LIMIT = 2000


@dataclass
class FeatureMatrix:
    values: np.ndarray  # (n, d)
    ids: list

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or len(self.ids) != self.values.shape[0]:
            raise ValueError("features must be (n, d) with one id per row")
        if not np.isfinite(self.values).all():
            raise ValueError("features must be finite")


@dataclass
class ClusterResult:
    assignment: np.ndarray  # (n,) ints in [0, k)
    centers: np.ndarray  # (k, d)
    sse_history: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.centers.shape[0]


def _sse(x: np.ndarray) -> float:
    return float(((x - x.mean(0)) ** 2).sum()) if len(x) else 0.0


def _farthest_pair(x: np.ndarray, rng: np.random.Generator) -> tuple[int, int]:
    if len(x) <= EXACT_PAIR_LIMIT:
        d = ((x[:, None, :] - x[None, :, :]) ** 2).sum(-1)
        i, j = np.unravel_index(int(np.argmax(d)), d.shape)
        return int(i), int(j)
    # two farthest-point sweeps from a random start
    start = int(rng.integers(len(x)))
    i = int(np.argmax(((x - x[start]) ** 2).sum(1)))
    j = int(np.argmax(((x - x[i]) ** 2).sum(1)))
    return i, j


def two_means(x: np.ndarray, rng: np.random.Generator, inner_iters: int = 25) -> np.ndarray:
    """Boolean split of ``x`` (True = second side) by Lloyd iterations from farthest-pair seeds."""
    i, j = _farthest_pair(x, rng)
    if np.array_equal(x[i], x[j]):
        side = np.zeros(len(x), bool)
        side[-1] = True  # all points identical: peel one off
        return side
    c = np.stack([x[i], x[j]])
    side = None
    for _ in range(inner_iters):
        d = ((x[:, None, :] - c[None]) ** 2).sum(-1)
        new = d[:, 1] < d[:, 0]
        if not new.any() or new.all():
            break
        if side is not None and np.array_equal(new, side):
            break
        side = new
        c = np.stack([x[~side].mean(0), x[side].mean(0)])
    if side is None:
        side = np.zeros(len(x), bool)
        side[j] = True
    return side


def bisecting_kmeans(features: FeatureMatrix | np.ndarray, k: int, rng: np.random.Generator | None = None,
                     inner_iters: int = 25) -> ClusterResult:
    """Split the highest-SSE cluster with 2-means until ``k`` clusters exist.

    Total SSE is checked to be non-increasing after every split.
    """
    x = features.values if isinstance(features, FeatureMatrix) else np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    rng = rng if rng is not None else np.random.default_rng(0)
    assign = np.zeros(n, np.int64)
    sse = [_sse(x)]
    cluster_sse = [sse[0]]
    for new_label in range(1, k):
        sizes = np.bincount(assign, minlength=new_label)
        candidates = [c for c in range(new_label) if sizes[c] >= 2]
        target = max(candidates, key=lambda c: (cluster_sse[c], -c))
        members = np.flatnonzero(assign == target)
        side = two_means(x[members], rng, inner_iters)
        assign[members[side]] = new_label
        cluster_sse[target] = _sse(x[assign == target])
        cluster_sse.append(_sse(x[assign == new_label]))
        total = float(sum(cluster_sse))
        if total > sse[-1] + 1e-9 * max(1.0, sse[-1]):
            raise AssertionError(f"SSE increased on split {new_label}: {sse[-1]} -> {total}")
        sse.append(total)
    centers = np.stack([x[assign == c].mean(0) for c in range(k)])
    return ClusterResult(assign, centers, sse)


def select_representatives(features: FeatureMatrix, result: ClusterResult) -> list:
    """Per cluster, the member nearest the centre; ties go to the smallest id."""
    x = features.values
    out = []
    for c in range(result.k):
        members = np.flatnonzero(result.assignment == c)
        d = ((x[members] - result.centers[c]) ** 2).sum(1)
        best = min(zip(d.tolist(), (features.ids[m] for m in members)), key=lambda t: (t[0], t[1]))
        out.append(best[1])
    return out


def center_crop_resize(image: np.ndarray, side: int = 512, interpolation=cv2.INTER_LINEAR) -> np.ndarray:
    """Centred square crop of side ``min(h, w)``, then bilinear resize to ``side``."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    s = min(h, w)
    if s < 1:
        raise ValueError("image must be non-empty")
    top, left = (h - s) // 2, (w - s) // 2
    crop = image[top:top + s, left:left + s]
    if s == side:
        return crop.copy()
    return cv2.resize(crop, (side, side), interpolation=interpolation)


def background_mask(mask: np.ndarray, fg_segmentation: np.ndarray) -> np.ndarray:
    """``mask AND NOT fg``: keep holes off the segmented foreground."""
    mask, fg = as_mask(mask), as_mask(fg_segmentation)
    if mask.shape != fg.shape:
        raise ValueError(f"mask {mask.shape} and segmentation {fg.shape} differ")
    return (mask & (1 - fg)).astype(np.uint8)


# -- embedders -----------------------------------------------------------------

Embedder = Callable[[Sequence[np.ndarray]], np.ndarray]


def toy_embedder(images: Sequence[np.ndarray], grid: int = 4) -> np.ndarray:
    """Deterministic features: a ``grid x grid`` area-downsampled thumbnail plus per-channel mean and std."""
    feats = []
    for img in images:
        img = np.asarray(img, dtype=np.float32)
        thumb = cv2.resize(img, (grid, grid), interpolation=cv2.INTER_AREA).ravel()
        feats.append(np.concatenate([thumb, img.mean((0, 1)), img.std((0, 1))]))
    return np.asarray(feats, dtype=np.float64)


class HttpEmbedder:
    """Client for an external embedding service: POST ``{"images": [base64 png]}``,
    reply ``{"embeddings": [[...], ...]}``."""

    def __init__(self, url: str, timeout_s: float = 60.0):
        self.url, self.timeout_s = url, timeout_s

    def __call__(self, images):
        from .judge import encode_png

        payload = {"images": [base64.b64encode(encode_png(im)).decode() for im in images]}
        r = httpx.post(self.url, json=payload, timeout=self.timeout_s)
        r.raise_for_status()
        return np.asarray(r.json()["embeddings"], dtype=np.float64)


_EMBEDDERS: dict[str, Embedder] = {"toy": toy_embedder}


def register_embedder(name: str, fn: Embedder):
    _EMBEDDERS[name] = fn


def get_embedder(name: str) -> Embedder:
    if name not in _EMBEDDERS:
        raise KeyError(f"no embedder registered as {name!r}; known: {sorted(_EMBEDDERS)}")
    return _EMBEDDERS[name]


# -- benchmark assembly ---------------------------------------------------------------

@dataclass
class SourceItem:
    id: str
    image: np.ndarray
    source_dataset: str
    domain_tag: str
    fg_segmentation: np.ndarray | None = None

    def __post_init__(self):
        if self.domain_tag not in DOMAINS:
            raise ValueError(f"domain_tag must be one of {DOMAINS}, got {self.domain_tag!r}")


def build_benchmark(items: Sequence[SourceItem], k: int, seed: int, out_dir: str | Path, side: int = 512,
                    embedder: Embedder = toy_embedder, recipe: MaskRecipe = MaskRecipe(),
                    object_pool=()) -> list[dict]:
    """Cluster ``items`` into ``k`` groups, keep one representative each and
    write ``images/``, ``masks/`` and ``manifest.json``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    feats = FeatureMatrix(embedder([it.image for it in items]), [it.id for it in items])
    result = bisecting_kmeans(feats, k, stream(seed, "cluster"))
    reps = select_representatives(feats, result)
    by_id = {it.id: (i, it) for i, it in enumerate(items)}
    records = []
    for cluster_id, rid in enumerate(reps):
        idx, it = by_id[rid]
        img = np.clip(center_crop_resize(it.image, side), 0.0, 1.0)
        mask, tag = sample_mask(stream(seed, "bench-mask", idx), side, side, object_pool, recipe)
        if it.fg_segmentation is not None:
            fg = center_crop_resize(as_mask(it.fg_segmentation), side, cv2.INTER_NEAREST)
            mask = background_mask(mask, fg)
        save_png(out_dir / "images" / f"{rid}.png", img)
        save_mask_png(out_dir / "masks" / f"{rid}.png", mask)
        records.append({"id": rid, "source_dataset": it.source_dataset, "cluster_id": cluster_id,
                        "mask_ratio": ratio(mask), "domain_tag": it.domain_tag, "mask_type": tag})
    (out_dir / "manifest.json").write_text(json.dumps({"seed": seed, "k": k, "side": side, "items": records},
                                                      indent=1))
    return records
