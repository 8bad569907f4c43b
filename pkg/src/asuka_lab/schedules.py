"""Noise-schedule algebra, the one-step latent estimate and colour jitter."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .seeding import stream

FAMILIES = ("diffusion", "rectified-flow")


class SingularCoefficientError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """``z_t = a(t) z0 + b(t) eps``.

    ``diffusion`` uses the cosine cumulative-alpha schedule with
    ``a = sqrt(alpha_bar)``, ``b = sqrt(1 - alpha_bar)``; ``rectified-flow``
    uses ``a = 1 - t/T``, ``b = t/T``.
    """

    family: str = "diffusion"
    T: int = 1000
    cosine_offset: float = 0.008

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown schedule family {self.family!r}")
        if self.T < 2:
            raise ValueError("T must be >= 2")

    def _alpha_bar(self, t):
        f = lambda u: np.cos((u / self.T + self.cosine_offset) / (1 + self.cosine_offset) * np.pi / 2) ** 2
        return f(np.asarray(t, dtype=np.float64)) / f(0.0)

    def coeffs(self, t):
        """Vectorised ``(a, b)``; no range check."""
        t = np.asarray(t, dtype=np.float64)
        if self.family == "diffusion":
            ab = np.where(t == 0, 1.0, self._alpha_bar(t))
            return np.sqrt(ab), np.sqrt(1.0 - ab)
        b = t / self.T
        return 1.0 - b, b

    def aug_range(self) -> tuple[int, int]:
        """Large-step interval ``[T/2, T)``; equals [500, 1000) at T=1000."""
        return self.T // 2, self.T

    @property
    def prediction(self) -> str:
        return "eps" if self.family == "diffusion" else "velocity"


def ab_coeffs(schedule: NoiseSchedule, t: int) -> tuple[float, float]:
    if not 0 <= t < schedule.T:
        raise ValueError(f"timestep {t} outside [0, {schedule.T})")
    a, b = schedule.coeffs(t)
    return float(a), float(b)


def add_noise(z0, eps, t: int, schedule: NoiseSchedule):
    a, b = ab_coeffs(schedule, t)
    return a * z0 + b * eps


def training_target(z0, eps, schedule: NoiseSchedule):
    """What the denoiser is trained to predict: eps, or velocity ``eps - z0``."""
    return eps if schedule.prediction == "eps" else eps - z0


def prediction_to_eps(pred, z_t, t: int, schedule: NoiseSchedule):
    # velocity v = eps - z0 with a + b = 1 gives eps = z_t + a v
    if schedule.prediction == "eps":
        return pred
    a, _ = ab_coeffs(schedule, t)
    return z_t + a * pred


def one_step_estimate(z_t, t: int, denoiser: Callable, z0_cond, schedule: NoiseSchedule, zero_mask=None):
    """``z0_hat = (z_t - b * eps_theta([z_t; z0; O], t)) / a``.

    ``denoiser(z_t, z0_cond, mask, t)`` is called with an all-zero mask
    (``zero_mask`` if given).
    """
    a, b = ab_coeffs(schedule, t)
    if a < 1e-6:
        raise SingularCoefficientError(f"a({t}) = {a:.3g} is too small to invert")
    if b == 0.0:
        return z_t * 1.0
    if zero_mask is None:
        zero_mask = z0_cond[..., :1, :, :] * 0 if hasattr(z0_cond, "detach") else np.zeros_like(z0_cond[..., :1])
    pred = denoiser(z_t, z0_cond, zero_mask, t)
    eps = prediction_to_eps(pred, z_t, t, schedule)
    return (z_t - b * eps) / a


# -- colour jitter -------------------------------------------------------------

@dataclass(frozen=True)
class ColorJitterParams:
    brightness: float = 0.15
    contrast: float = 0.2
    saturation: float = 0.1
    hue: float = 0.03

    def __post_init__(self):
        if min(self.brightness, self.contrast, self.saturation, self.hue) < 0:
            raise ValueError("jitter magnitudes must be non-negative")
        if self.hue > 0.5:
            raise ValueError("hue magnitude must be <= 0.5")


JITTER_OPS = ("brightness", "contrast", "saturation", "hue")


def _gray(img: np.ndarray) -> np.ndarray:
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114


def _blend(img, other, f):
    return np.clip(f * img + (1.0 - f) * other, 0.0, 1.0)


def adjust(image: np.ndarray, op: str, factor: float) -> np.ndarray:
    """One jitter operation; multiplicative factors for brightness/contrast/saturation, hue shift in turns."""
    img = np.asarray(image, dtype=np.float64)
    if op == "brightness":
        return np.clip(img * factor, 0.0, 1.0)
    if op == "contrast":
        return _blend(img, _gray(img).mean(), factor)
    if op == "saturation":
        return _blend(img, _gray(img)[..., None], factor)
    if op == "hue":
        if factor == 0.0:
            return img.copy()
        hsv = rgb_to_hsv(np.clip(img, 0.0, 1.0))
        hsv[..., 0] = np.mod(hsv[..., 0] + factor, 1.0)
        return np.clip(hsv_to_rgb(hsv), 0.0, 1.0)
    raise ValueError(f"unknown jitter op {op!r}")


def apply_jitter(image: np.ndarray, factors: dict[str, float], order: Sequence[str] = JITTER_OPS) -> np.ndarray:
    out = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    for op in order:
        if op in factors:
            out = adjust(out, op, factors[op])
    return out


def sample_jitter(rng: np.random.Generator, params: ColorJitterParams = ColorJitterParams()):
    factors = {
        "brightness": rng.uniform(1 - params.brightness, 1 + params.brightness),
        "contrast": rng.uniform(1 - params.contrast, 1 + params.contrast),
        "saturation": rng.uniform(1 - params.saturation, 1 + params.saturation),
        "hue": rng.uniform(-params.hue, params.hue),
    }
    order = [JITTER_OPS[i] for i in rng.permutation(4)]
    return factors, order


def color_jitter(image: np.ndarray, rng: np.random.Generator, params: ColorJitterParams = ColorJitterParams()):
    """Random brightness/contrast/saturation/hue perturbation in a random order, clamped to [0, 1]."""
    factors, order = sample_jitter(rng, params)
    return apply_jitter(image, factors, order)


# -- offline latent augmentation ------------------------------------------------------

@dataclass
class AugmentedCorpus:
    images: list[np.ndarray]
    records: list[dict]
    recomputed: int = 0


def _augment_one(image, vae, denoiser, schedule, rng):
    import torch

    from .images import to_numpy, to_tensor

    lo, hi = schedule.aug_range()
    t = int(rng.integers(lo, hi))
    with torch.no_grad():
        x = to_tensor(image, vae.dtype)
        z0 = vae.encode(x)
        eps = torch.from_numpy(rng.standard_normal(tuple(z0.shape))).to(z0.dtype)
        z_t = add_noise(z0, eps, t, schedule)
        z_hat = one_step_estimate(z_t, t, denoiser, z0, schedule, torch.zeros_like(z0[:, :1]))
        ones = torch.ones_like(x[:, :1])
        out = vae.decode_cond(z_hat, torch.zeros_like(x), ones)
    return np.clip(to_numpy(out).astype(np.float64), 0.0, 1.0), t


def latent_augment_corpus(items: Sequence[tuple[str, np.ndarray]], vae, denoiser, schedule: NoiseSchedule,
                          seed: int, cache_dir: str | Path, apply_prob: float = 0.5,
                          workers: int = 1) -> AugmentedCorpus:
    """Offline one-step latent augmentation of a corpus.

    Item ``i`` draws from stream ``(seed, 'latent-aug', i)``: selection with
    probability ``apply_prob``, then ``t`` in the large-step interval and the
    noise.  Augmented images are cached as ``.npy`` files; the manifest is
    written once after all items finish.  Re-running against a matching
    manifest loads the cache instead of recomputing.
    """
    from .images import load_array, save_array

    cache_dir = Path(cache_dir)
    manifest_path = cache_dir / "manifest.json"
    sources = [sid for sid, _ in items]
    if manifest_path.exists():
        m = json.loads(manifest_path.read_text())
        if (m.get("seed") == seed and m.get("apply_prob") == apply_prob and m.get("schedule") == asdict(schedule)
                and [r["source_path"] for r in m["records"]] == sources):
            imgs = []
            for (sid, img), r in zip(items, m["records"]):
                imgs.append(load_array(cache_dir / r["output_path"]) if r["applied"] else img)
            return AugmentedCorpus(imgs, m["records"], 0)
    try:
        cache_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create cache directory {cache_dir}: {e}") from e

    def work(i):
        sid, img = items[i]
        rng = stream(seed, "latent-aug", i)
        if rng.random() >= apply_prob:
            return img, {"source_path": sid, "output_path": sid, "applied": False, "t": None, "seed": seed}
        out, t = _augment_one(img, vae, denoiser, schedule, rng)
        out = out.astype(np.float32).astype(np.float64)  # what the cache will hold
        name = f"aug_{i:06d}.npy"
        try:
            save_array(cache_dir / name, out)
        except OSError as e:
            raise OSError(f"cache write failed for {cache_dir / name}: {e}") from e
        return out, {"source_path": sid, "output_path": name, "applied": True, "t": t, "seed": seed}

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(work, range(len(items))))
    else:
        results = [work(i) for i in range(len(items))]
    records = [r for _, r in results]
    manifest = {"seed": seed, "apply_prob": apply_prob, "schedule": asdict(schedule), "records": records}
    try:
        manifest_path.write_text(json.dumps(manifest, indent=1))
    except OSError as e:
        raise OSError(f"cache write failed for {manifest_path}: {e}") from e
    return AugmentedCorpus([img for img, _ in results], records, sum(r["applied"] for r in records))
