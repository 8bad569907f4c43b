"""Inpainting mask synthesis and morphology.

Masks are ``uint8`` arrays of shape ``(H, W)`` holding 0 (visible) or
1 (hole).  Generators take an explicit ``numpy.random.Generator`` and are
pure functions of its state and their arguments.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
from PIL import Image

MIN_SIDE = 16
BASE_TYPES = ("object", "irregular", "regular")


class InvalidSizeError(ValueError):
    pass


class RatioExceededError(ValueError):
    pass


@dataclass(frozen=True)
class MaskRecipe:
    p_object: float = 0.5
    p_irregular: float = 0.4
    p_regular: float = 0.1
    p_combine_object_with_irregular: float = 0.5
    ratio_min: float = 0.1
    ratio_max: float = 0.75
    dilation_px: tuple[int, int] = (5, 20)
    max_rejections: int = 100

    def __post_init__(self):
        probs = (self.p_object, self.p_irregular, self.p_regular, self.p_combine_object_with_irregular)
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ValueError(f"probabilities must lie in [0, 1]: {probs}")
        if abs(self.p_object + self.p_irregular + self.p_regular - 1.0) > 1e-9:
            raise ValueError("p_object + p_irregular + p_regular must equal 1")
        if not 0.0 <= self.ratio_min < self.ratio_max <= 1.0:
            raise ValueError(f"need 0 <= ratio_min < ratio_max <= 1, got {self.ratio_min}, {self.ratio_max}")
        lo, hi = self.dilation_px
        if not 0 <= lo <= hi:
            raise ValueError(f"bad dilation range {self.dilation_px}")

    def base_probs(self, have_objects: bool = True) -> dict[str, float]:
        if have_objects:
            return {"object": self.p_object, "irregular": self.p_irregular, "regular": self.p_regular}
        rest = self.p_irregular + self.p_regular
        return {"object": 0.0, "irregular": self.p_irregular / rest, "regular": self.p_regular / rest}


def as_mask(a) -> np.ndarray:
    """Validate and convert to a 0/1 ``uint8`` mask."""
    a = np.asarray(a)
    if a.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {a.shape}")
    if a.dtype == bool:
        return a.astype(np.uint8)
    if not np.isin(a, (0, 1)).all():
        raise ValueError("mask entries must be exactly 0 or 1")
    return a.astype(np.uint8)


def ratio(mask: np.ndarray) -> float:
    return float(np.asarray(mask).mean())


def _check_size(h: int, w: int):
    if h < MIN_SIDE or w < MIN_SIDE:
        raise InvalidSizeError(f"mask dimensions must be >= {MIN_SIDE}, got {h}x{w}")


def rectangle_mask(h: int, w: int, rows: tuple[int, int], cols: tuple[int, int]) -> np.ndarray:
    """Mask with ones on ``rows[0]:rows[1], cols[0]:cols[1]``."""
    m = np.zeros((h, w), np.uint8)
    m[rows[0]:rows[1], cols[0]:cols[1]] = 1
    return m


def complement(mask: np.ndarray) -> np.ndarray:
    return (1 - as_mask(mask)).astype(np.uint8)


# -- irregular masks ---------------------------------------------------------

def _brush_strokes(rng: np.random.Generator, h: int, w: int, out: np.ndarray, max_strokes: int = 5):
    # free-form polylines with round joints, widths and lengths scaled to the frame
    side = min(h, w)
    max_width = max(3, int(0.16 * side))
    max_len = 0.4 * side
    for _ in range(int(rng.integers(1, max_strokes + 1))):
        width = int(rng.integers(max(2, max_width // 4), max_width + 1))
        y, x = rng.uniform(0, h), rng.uniform(0, w)
        angle = rng.uniform(0, 2 * np.pi)
        for _ in range(int(rng.integers(2, 9))):
            angle += rng.uniform(-np.pi / 2.5, np.pi / 2.5)
            length = rng.uniform(0.1 * max_len, max_len)
            ny = float(np.clip(y + length * np.sin(angle), 0, h - 1))
            nx = float(np.clip(x + length * np.cos(angle), 0, w - 1))
            cv2.line(out, (int(x), int(y)), (int(nx), int(ny)), 1, width)
            cv2.circle(out, (int(nx), int(ny)), width // 2, 1, -1)
            y, x = ny, nx


def _random_boxes(rng: np.random.Generator, h: int, w: int, out: np.ndarray, max_boxes: int = 3):
    for _ in range(int(rng.integers(1, max_boxes + 1))):
        bh = int(rng.integers(h // 8, h // 2 + 1))
        bw = int(rng.integers(w // 8, w // 2 + 1))
        top = int(rng.integers(0, h - bh + 1))
        left = int(rng.integers(0, w - bw + 1))
        out[top:top + bh, left:left + bw] = 1


def gen_irregular_mask(rng: np.random.Generator, h: int, w: int, style: str = "brush") -> np.ndarray:
    """Free-form mask: thick polylines (``brush``) or polylines plus boxes (``comod``)."""
    _check_size(h, w)
    if style not in ("brush", "comod"):
        raise ValueError(f"unknown irregular style {style!r}")
    while True:
        m = np.zeros((h, w), np.uint8)
        _brush_strokes(rng, h, w, m)
        if style == "comod":
            _random_boxes(rng, h, w, m)
        r = m.mean()
        if 0.0 < r < 1.0:
            return m


def gen_regular_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Axis-aligned rectangle, or its complement with probability 0.5."""
    _check_size(h, w)
    rh = int(rng.integers(max(1, h // 10), h - h // 10 + 1))
    rw = int(rng.integers(max(1, w // 10), w - w // 10 + 1))
    top = int(rng.integers(0, h - rh + 1))
    left = int(rng.integers(0, w - rw + 1))
    m = rectangle_mask(h, w, (top, top + rh), (left, left + rw))
    if rng.random() < 0.5:
        m = complement(m)
    return m


def place_object(rng: np.random.Generator, h: int, w: int, shape: np.ndarray) -> np.ndarray:
    """Scale a binary object silhouette (nearest-neighbour) and paste it at a random offset."""
    shape = as_mask(shape)
    sh, sw = shape.shape
    scale = rng.uniform(0.3, 0.9) * min(h / sh, w / sw)
    th, tw = max(1, min(h, int(round(sh * scale)))), max(1, min(w, int(round(sw * scale))))
    obj = cv2.resize(shape, (tw, th), interpolation=cv2.INTER_NEAREST)
    top = int(rng.integers(0, h - th + 1))
    left = int(rng.integers(0, w - tw + 1))
    m = np.zeros((h, w), np.uint8)
    m[top:top + th, left:left + tw] = obj
    return m


def _target_rectangle(rng: np.random.Generator, h: int, w: int, target: float) -> np.ndarray:
    # centred-ish rectangle whose area is as close to target*h*w as the grid allows
    aspect = rng.uniform(0.5, 2.0)
    rh = int(np.clip(round(np.sqrt(target * h * w * aspect)), 1, h))
    rw = int(np.clip(round(target * h * w / rh), 1, w))
    top = int(rng.integers(0, h - rh + 1))
    left = int(rng.integers(0, w - rw + 1))
    return rectangle_mask(h, w, (top, top + rh), (left, left + rw))


@dataclass
class MaskSample:
    mask: np.ndarray
    tag: str
    object_mask: np.ndarray | None = None
    combined: bool = False
    rejections: int = 0
    fallback: bool = False


def _draw_base(rng, h, w, tag, object_pool, recipe) -> MaskSample:
    if tag == "regular":
        return MaskSample(gen_regular_mask(rng, h, w), tag)
    if tag == "irregular":
        style = "brush" if rng.random() < 0.5 else "comod"
        return MaskSample(gen_irregular_mask(rng, h, w, style), tag)
    obj = place_object(rng, h, w, object_pool[int(rng.integers(len(object_pool)))])
    if rng.random() < recipe.p_combine_object_with_irregular:
        style = "brush" if rng.random() < 0.5 else "comod"
        return MaskSample(obj | gen_irregular_mask(rng, h, w, style), tag, obj, True)
    return MaskSample(obj, tag, obj, False)


def sample_mask_detailed(rng: np.random.Generator, h: int, w: int, object_pool: Sequence[np.ndarray] = (),
                         recipe: MaskRecipe = MaskRecipe()) -> MaskSample:
    """Draw a base type from the recipe, then resample within that type until
    the ratio lands in ``[ratio_min, ratio_max]``; after ``max_rejections``
    misses fall back to a rectangle of a random in-range target ratio."""
    _check_size(h, w)
    probs = recipe.base_probs(len(object_pool) > 0)
    tag = BASE_TYPES[int(rng.choice(3, p=[probs[t] for t in BASE_TYPES]))]
    for attempt in range(recipe.max_rejections):
        s = _draw_base(rng, h, w, tag, object_pool, recipe)
        if recipe.ratio_min <= ratio(s.mask) <= recipe.ratio_max:
            s.rejections = attempt
            return s
    target = rng.uniform(recipe.ratio_min, recipe.ratio_max)
    return MaskSample(_target_rectangle(rng, h, w, target), tag, rejections=recipe.max_rejections, fallback=True)


def sample_mask(rng: np.random.Generator, h: int, w: int, object_pool: Sequence[np.ndarray] = (),
                recipe: MaskRecipe = MaskRecipe()) -> tuple[np.ndarray, str]:
    s = sample_mask_detailed(rng, h, w, object_pool, recipe)
    return s.mask, s.tag


# -- morphology --------------------------------------------------------------

def _square(radius: int) -> np.ndarray:
    return np.ones((2 * radius + 1, 2 * radius + 1), np.uint8)


def dilate(mask: np.ndarray, radius_px: int) -> np.ndarray:
    """Dilation by a square of side ``2*radius_px + 1``."""
    if radius_px < 0:
        raise ValueError(f"radius must be >= 0, got {radius_px}")
    mask = as_mask(mask)
    if radius_px == 0:
        return mask.copy()
    return cv2.dilate(mask, _square(radius_px))


def erode(mask: np.ndarray, radius_px: int) -> np.ndarray:
    """Erosion by the same square; pixels beyond the frame count as masked."""
    if radius_px < 0:
        raise ValueError(f"radius must be >= 0, got {radius_px}")
    mask = as_mask(mask)
    if radius_px == 0:
        return mask.copy()
    return cv2.erode(mask, _square(radius_px), borderType=cv2.BORDER_CONSTANT, borderValue=1)


def random_dilate(rng: np.random.Generator, mask: np.ndarray, recipe: MaskRecipe = MaskRecipe()) -> np.ndarray:
    lo, hi = recipe.dilation_px
    return dilate(mask, int(rng.integers(lo, hi + 1)))


def jagged_downsample(mask_hi: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour downsample: output[r, c] = mask_hi[r*factor, c*factor]."""
    mask_hi = as_mask(mask_hi)
    if factor < 2:
        raise ValueError(f"factor must be >= 2, got {factor}")
    h, w = mask_hi.shape
    if h % factor or w % factor:
        raise ValueError(f"mask {h}x{w} is not divisible by {factor}; pad it first")
    return np.ascontiguousarray(mask_hi[::factor, ::factor])


def sample_jagged_mask(rng: np.random.Generator, h: int, w: int, object_pool: Sequence[np.ndarray] = (),
                       recipe: MaskRecipe = MaskRecipe(), factor: int | None = None) -> tuple[np.ndarray, str]:
    """Sample at ``factor`` times the resolution and nearest-downsample."""
    factor = factor or int(rng.integers(2, 5))
    m, tag = sample_mask(rng, h * factor, w * factor, object_pool, recipe)
    return jagged_downsample(m, factor), tag


def patchify(mask: np.ndarray, patch: int) -> np.ndarray:
    """Boolean patch grid: a patch is set if any of its pixels is masked."""
    mask = as_mask(mask)
    h, w = mask.shape
    if h % patch or w % patch:
        raise ValueError(f"mask {h}x{w} is not divisible by patch {patch}")
    return mask.reshape(h // patch, patch, w // patch, patch).max(axis=(1, 3)).astype(bool)


def expand_to_patch_ratio(mask: np.ndarray, patch: int, target_ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Grow the patchified mask to exactly ``round(target_ratio * n_patches)``
    masked patches by adding uniformly chosen unmasked patches."""
    grid = patchify(mask, patch)
    n = grid.size
    want = int(round(target_ratio * n))
    have = int(grid.sum())
    if have > want:
        raise RatioExceededError(f"mask covers {have}/{n} patches, above target {want}")
    free = np.flatnonzero(~grid.ravel())
    add = rng.choice(free, size=want - have, replace=False)
    out = grid.ravel().copy()
    out[add] = True
    return out.reshape(grid.shape)


# -- serialization -----------------------------------------------------------

def save_mask_png(path: str | Path, mask: np.ndarray):
    Image.fromarray(as_mask(mask) * 255).save(path, format="PNG")


def load_mask_png(path: str | Path) -> np.ndarray:
    a = np.asarray(Image.open(path).convert("L"))
    if not np.isin(a, (0, 255)).all():
        raise ValueError(f"{path}: mask PNG must only hold 0 and 255")
    return (a // 255).astype(np.uint8)


def generate_masks(out_dir: str | Path, n: int, h: int, w: int, seed: int, recipe: MaskRecipe = MaskRecipe(),
                   object_pool: Sequence[np.ndarray] = (), jagged_fraction: float = 0.0) -> list[dict]:
    """Write ``n`` masks plus a ``manifest.json`` sidecar; item ``i`` uses stream ``(seed, 'mask', i)``."""
    from .seeding import stream

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n):
        rng = stream(seed, "mask", i)
        jagged = bool(rng.random() < jagged_fraction)
        if jagged:
            m, tag = sample_jagged_mask(rng, h, w, object_pool, recipe)
        else:
            m, tag = sample_mask(rng, h, w, object_pool, recipe)
        name = f"mask_{i:05d}.png"
        save_mask_png(out_dir / name, m)
        records.append({"file": name, "index": i, "seed": seed, "tag": tag, "jagged": jagged, "ratio": ratio(m)})
    manifest = {"seed": seed, "height": h, "width": w, "recipe": asdict(recipe), "masks": records}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return records
