"""Colour-consistency metric (G@e), judge composites and external scorer plugins."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .masks import as_mask, dilate, erode

EXTERNAL_METRICS = ("LPIPS", "FID", "U-IDS", "P-IDS")
UNAVAILABLE = "unavailable"
OVERLAY_GRAY = 0.5


class UndefinedMetricError(ValueError):
    pass


class PluginError(RuntimeError):
    pass


@dataclass(frozen=True)
class BoundaryBand:
    band: np.ndarray
    width_px: int = 2

    @classmethod
    def from_mask(cls, mask: np.ndarray, width_px: int = 2) -> "BoundaryBand":
        mask = as_mask(mask)
        band = dilate(mask, width_px) & (1 - erode(mask, width_px))
        return cls(band.astype(bool), width_px)


def deep_interior(mask: np.ndarray, width_px: int = 2) -> np.ndarray:
    """Pixels whose forward differences never touch the band: inside
    ``erode(mask, w+1)`` or outside ``dilate(mask, w+1)``."""
    mask = as_mask(mask)
    inner = erode(mask, width_px + 1).astype(bool)
    outer = ~dilate(mask, width_px + 1).astype(bool)
    return inner | outer


def _forward_grad(field: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # replicate padding: the last column/row has zero forward difference
    dx = np.zeros_like(field)
    dy = np.zeros_like(field)
    dx[:, :-1] = field[:, 1:] - field[:, :-1]
    dy[:-1] = field[1:] - field[:-1]
    return dx, dy


def gradient_at_edge(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray, width_px: int = 2) -> float:
    """Mean over band pixels and channels of ``|dx(pred) - dx(gt)| + |dy(pred) - dy(gt)|``
    with images on the [0, 255] scale."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[:2] != np.shape(mask):
        raise ValueError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, mask {np.shape(mask)}")
    band = BoundaryBand.from_mask(mask, width_px).band
    if not band.any():
        raise UndefinedMetricError("mask has no boundary (empty or full mask)")
    diff = 255.0 * (pred - gt)
    if diff.ndim == 2:
        diff = diff[..., None]
    dx, dy = _forward_grad(diff)
    per_pixel = np.abs(dx) + np.abs(dy)
    return float(per_pixel[band].mean())


def mean_gradient_at_edge(preds, gts, masks, width_px: int = 2) -> float:
    return float(np.mean([gradient_at_edge(p, g, m, width_px) for p, g, m in zip(preds, gts, masks)]))


# -- judge composites ------------------------------------------------------------------

def make_judge_composite(masked_input: np.ndarray, mask: np.ndarray, result: np.ndarray, alpha: float = 0.5,
                         gap_px: int = 16, overlay: float = OVERLAY_GRAY) -> np.ndarray:
    """Side-by-side panel: the input with a semi-transparent overlay on the
    hole, a white gap, then the result.  Width is ``2W + gap_px``."""
    masked_input = np.asarray(masked_input, dtype=np.float64)
    result = np.asarray(result, dtype=np.float64)
    if masked_input.shape != result.shape or masked_input.shape[:2] != np.shape(mask):
        raise ValueError(f"panel shapes differ: {masked_input.shape}, {result.shape}, mask {np.shape(mask)}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    m = as_mask(mask).astype(bool)[..., None]
    blended = (1.0 - alpha) * masked_input + alpha * overlay
    left = np.where(m, blended, masked_input)
    h, w, c = masked_input.shape
    gap = np.ones((h, gap_px, c))
    return np.concatenate([left, gap, result], axis=1)


# -- external scorer plugins -------------------------------------------------------------

Scorer = Callable[[Sequence[np.ndarray], Sequence[np.ndarray]], "float | Mapping[str, float]"]


class ScorerRegistry:
    def __init__(self):
        self._scorers: dict[str, Scorer] = {}

    def register(self, name: str, scorer: Scorer):
        self._scorers[name] = scorer

    def names(self) -> list[str]:
        return list(self._scorers)

    def __contains__(self, name):
        return name in self._scorers

    def __getitem__(self, name) -> Scorer:
        return self._scorers[name]


def score_with_plugin(registry: ScorerRegistry | None, pred_set, gt_set, masks) -> dict:
    """Named score map.  G@e is always computed; every known external metric
    without a registered scorer is marked ``"unavailable"``."""
    out: dict[str, object] = {"G@e": mean_gradient_at_edge(pred_set, gt_set, masks)}
    for name in EXTERNAL_METRICS:
        out[name] = UNAVAILABLE
    for name in (registry.names() if registry else []):
        try:
            value = registry[name](pred_set, gt_set)
        except Exception as e:
            raise PluginError(f"scorer {name!r} failed: {e}") from e
        if isinstance(value, Mapping):
            out.update({k: float(v) for k, v in value.items()})
        else:
            out[name] = float(value)
    return out
