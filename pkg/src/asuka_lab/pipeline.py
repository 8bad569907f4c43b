"""Subcommand implementations and run-directory plumbing.

Every subcommand receives a validated ``Config`` and a ``Run`` (its output
directory plus the manifest being assembled) and returns a metrics dict.
"""

from __future__ import annotations

import hashlib
import importlib
import json
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .alignment import AlignmentModule, PriorSchedule, align, train_alignment
from .backbones import Backbones, ConditionBundle, latent_mask, mae_predict
from .checkpoint import checkpoint_hash, config_hash, load_module, module_hash, save_module
from .config import Config, config_digest, to_dict
from .dataset import DOMAINS, SourceItem, build_benchmark, get_embedder
from .decoder import (color_shift_eval_set, composite, decode_items, load_eval_set, reconstruction_l2,
                      save_eval_set, train_decoder)
from .images import (load_image_dir, load_png, mask_tensor, save_array, save_png, to_numpy, to_tensor,
                     toy_corpus, toy_image, toy_object_pool)
from .injection import train_inject
from .judge import JudgeClient, JudgeTransportError
from .masks import generate_masks, load_mask_png, sample_mask, save_mask_png
from .metrics import ScorerRegistry, gradient_at_edge, make_judge_composite, score_with_plugin
from .schedules import latent_augment_corpus, prediction_to_eps
from .seeding import stream
from .training import prior_patch_mask, pretrain_denoiser, pretrain_mae, pretrain_vae, write_trace

SUBCOMMANDS = ("mask-gen", "augment-corpus", "train-mae", "train-align", "train-inject", "train-decoder", "eval",
               "judge", "build-dataset", "demo-inpaint", "report")


class UsageError(ValueError):
    """Inputs that are well-formed YAML but unusable for the requested subcommand."""


class ExternalServiceError(RuntimeError):
    pass


# -- run directories -------------------------------------------------------------

@dataclass
class Run:
    dir: Path
    subcommand: str
    cfg: Config
    resume: bool = False
    streams: list[str] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def path(self, *parts) -> Path:
        p = self.dir.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def use_stream(self, *keys) -> np.random.Generator:
        self.streams.append("/".join(str(k) for k in keys))
        return stream(self.cfg.seed, *keys)


def new_run_dir(root: str | Path, cfg: Config) -> Path:
    """``<root>/<YYYYmmdd-HHMMSS>-<config hash>``, suffixed on collision."""
    root = Path(root)
    base = f"{time.strftime('%Y%m%d-%H%M%S')}-{config_digest(cfg)}"
    path, n = root / base, 1
    while path.exists():
        path, n = root / f"{base}-{n}", n + 1
    path.mkdir(parents=True)
    return path


def write_snapshot(run: Run):
    (run.dir / "config.yaml").write_text(yaml.safe_dump(to_dict(run.cfg), sort_keys=True))


def write_manifest(run: Run, metrics: dict, status: str):
    artifacts = sorted(str(p.relative_to(run.dir)) for p in run.dir.rglob("*")
                       if p.is_file() and p.name not in ("manifest.json", "timing.json"))
    manifest = {"subcommand": run.subcommand, "version": __version__, "root_seed": run.cfg.seed,
                "config_hash": config_digest(run.cfg), "status": status, "streams": sorted(set(run.streams)),
                "notes": run.notes, "artifacts": artifacts}
    (run.dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    (run.dir / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


# -- shared inputs -----------------------------------------------------------------

def corpus(cfg: Config, split: str) -> list[np.ndarray]:
    size, c = cfg.toy.image_size, cfg.corpus
    if c.source_dir:
        images = load_image_dir(c.source_dir, size)
        if len(images) < c.n_train + (c.n_eval if split == "eval" else 0):
            raise UsageError(f"corpus.source_dir holds {len(images)} images; need n_train + n_eval")
        return images[: c.n_train] if split == "train" else images[c.n_train: c.n_train + c.n_eval]
    return toy_corpus(cfg.seed, c.n_train if split == "train" else c.n_eval, size, split)


def object_pool(cfg: Config, side: int | None = None) -> list[np.ndarray]:
    side = side or cfg.toy.image_size // 2
    return toy_object_pool(cfg.seed, cfg.masks.object_pool, side) if cfg.masks.object_pool else []


def _backbone_key(cfg: Config) -> str:
    return config_hash({"seed": cfg.seed, "toy": to_dict(cfg)["toy"], "schedule": to_dict(cfg)["schedule"],
                        "corpus": to_dict(cfg)["corpus"], "masks": to_dict(cfg)["masks"],
                        "pretrain": {k: v for k, v in to_dict(cfg)["pretrain"].items() if k != "backbones"}})[:16]


def backbones(cfg: Config, run: Run, only: tuple[str, ...] = ("vae", "mae", "denoiser")) -> Backbones:
    """Load pretrained backbones, pretraining (and caching) any that are missing.

    Sources in order: ``pretrain.backbones``, the shared cache under
    ``<run root>/.cache`` (the run directory's parent), then fresh pretraining with the configured steps.
    """
    b = Backbones.build(cfg.toy_config(), cfg.seed)
    cache = run.dir.parent / ".cache" / f"backbones-{_backbone_key(cfg)}"
    sources = [Path(cfg.pretrain.backbones)] if cfg.pretrain.backbones else []
    sources.append(cache)
    p = cfg.pretrain
    train_corpus = None
    origin = {}
    for name in ("vae", "mae", "denoiser"):
        if name not in only and not (name == "vae" and "denoiser" in only):
            continue
        module = getattr(b, name)
        for src in sources:
            if (src / name / "header.json").exists():
                load_module(src / name, module)
                origin[name] = str(src / name)
                break
        else:
            train_corpus = train_corpus if train_corpus is not None else corpus(cfg, "train")
            out = run.dir / "pretrain"
            out.mkdir(exist_ok=True)
            run.streams.append(f"pretrain_{name}/*")
            if name == "vae":
                pretrain_vae(b, train_corpus, p.vae_steps, cfg.seed, p.batch, out_dir=out)
            elif name == "mae":
                pretrain_mae(b, train_corpus, p.mae_steps, cfg.seed, p.batch, out_dir=out)
            else:
                pretrain_denoiser(b, train_corpus, cfg.noise_schedule(), p.denoiser_steps, cfg.seed, p.batch,
                                  recipe=cfg.recipe(), out_dir=out)
            save_module(cache / name, module, {"key": _backbone_key(cfg)})
            origin[name] = "pretrained"
    for name, module in b.modules().items():
        module.eval()
        if name in origin:
            run.notes.setdefault("backbones", {})[name] = {"origin": origin[name], "hash": module_hash(module)}
    return b


def load_alignment(cfg: Config, path: str | Path) -> AlignmentModule:
    m = AlignmentModule(cfg.toy.mae_dim, cfg.toy.cond_dim, heads=cfg.toy.heads)
    load_module(path, m)
    return m.eval()


def load_decoder(cfg: Config, path: str | Path):
    b = Backbones.build(cfg.toy_config(), cfg.seed)
    load_module(path, b.vae)
    return b.vae.eval()


# -- subcommands -------------------------------------------------------------------

def cmd_mask_gen(cfg: Config, run: Run, n: int = 100) -> dict:
    size = cfg.toy.image_size
    run.streams.append("mask/*")
    records = generate_masks(run.dir / "masks", n, size, size, cfg.seed, cfg.recipe(), object_pool(cfg),
                             cfg.masks.jagged_fraction)
    tags = [r["tag"] for r in records]
    return {"n": n, "tag_counts": {t: tags.count(t) for t in sorted(set(tags))},
            "mean_ratio": float(np.mean([r["ratio"] for r in records]))}


def cmd_augment_corpus(cfg: Config, run: Run) -> dict:
    b = backbones(cfg, run, ("vae", "denoiser"))
    images = corpus(cfg, "train")
    items = [(f"toy:train:{i:05d}", img) for i, img in enumerate(images)]
    run.streams.append("latent-aug/*")
    aug = latent_augment_corpus(items, b.vae, b.denoiser.as_estimator(), cfg.noise_schedule(), cfg.seed, run.dir / "latent_cache",
                                cfg.latent_aug.apply_prob, cfg.latent_aug.workers)
    applied = [r for r in aug.records if r["applied"]]
    return {"n": len(items), "applied": len(applied), "recomputed": aug.recomputed,
            "t_min": min((r["t"] for r in applied), default=None), "t_max": max((r["t"] for r in applied), default=None)}


def cmd_train_mae(cfg: Config, run: Run) -> dict:
    b = Backbones.build(cfg.toy_config(), cfg.seed)
    res = pretrain_mae(b, corpus(cfg, "train"), cfg.pretrain.mae_steps, cfg.seed, cfg.pretrain.batch,
                       out_dir=run.dir)
    run.streams.append("pretrain_mae/*")
    save_module(run.dir / "mae", b.mae, to_dict(cfg))
    return _trace_metrics(res.trace) | {"checkpoint": "mae", "checkpoint_hash": checkpoint_hash(run.dir / "mae")}


def _trace_metrics(trace: list[dict]) -> dict:
    if not trace:
        return {"steps": 0}
    loss = np.array([r["loss"] for r in trace])
    k = max(1, len(loss) // 10)
    return {"steps": len(loss), "loss_first": float(loss[0]), "loss_last": float(loss[-1]),
            "median_first_10pct": float(np.median(loss[:k])), "median_last_10pct": float(np.median(loss[-k:]))}


def _freeze_report(res) -> dict:
    return {"hashes_before": res.hashes_before, "hashes_after": res.hashes_after,
            "frozen_unchanged": res.hashes_before == res.hashes_after}


def cmd_train_align(cfg: Config, run: Run) -> dict:
    b = backbones(cfg, run)
    a = cfg.align
    run.streams.append("align/*")
    lr = a.lr_align * a.batch / a.ref_batch
    module, res = train_alignment(b, corpus(cfg, "train"), cfg.noise_schedule(), a.steps, cfg.seed, batch=a.batch,
                                  lr=lr, prior_sched=PriorSchedule(a.p0, a.p_final, a.decay_steps),
                                  recipe=cfg.recipe(), object_pool=object_pool(cfg), out_dir=run.dir,
                                  resume=run.resume, checkpoint_every=a.checkpoint_every)
    save_module(run.dir / "alignment", module, to_dict(cfg))
    return _trace_metrics(res.trace) | _freeze_report(res) | {"checkpoint": "alignment"}


def cmd_train_inject(cfg: Config, run: Run) -> dict:
    b = backbones(cfg, run)
    i, a = cfg.inject, cfg.align
    alignment = load_alignment(cfg, cfg.demo.alignment) if cfg.demo.alignment else None
    run.streams.append("inject/*")
    injected, res = train_inject(b, corpus(cfg, "train"), cfg.noise_schedule(), i.steps, cfg.seed,
                                 alignment=alignment, batch=i.batch, lr=i.lr, rank=i.rank, scale=i.scale,
                                 gate_bias=i.gate_bias,
                                 prior_sched=PriorSchedule(a.p0, a.p_final, a.decay_steps), recipe=cfg.recipe(),
                                 object_pool=object_pool(cfg), out_dir=run.dir, resume=run.resume,
                                 checkpoint_every=i.checkpoint_every)
    save_module(run.dir / "inject", injected.trainable_modules(), to_dict(cfg))
    return _trace_metrics(res.trace) | _freeze_report(res) | {"checkpoint": "inject"}


def _eval_items(cfg: Config, run: Run):
    run.streams.append("eval-item/*")
    return color_shift_eval_set(cfg.seed, corpus(cfg, "eval"), cfg.recipe(), cfg.jitter_params(), object_pool(cfg))


def cmd_train_decoder(cfg: Config, run: Run) -> dict:
    b = backbones(cfg, run, ("vae", "denoiser") if cfg.decoder.latent_prob > 0 else ("vae",))
    d = cfg.decoder
    images = corpus(cfg, "train")
    cache = None
    if d.latent_prob > 0:
        run.streams.append("latent-aug/*")
        items = [(f"toy:train:{k:05d}", img) for k, img in enumerate(images)]
        aug = latent_augment_corpus(items, b.vae, b.denoiser.as_estimator(), cfg.noise_schedule(), cfg.seed,
                                    run.dir / "latent_cache", 1.0, cfg.latent_aug.workers)
        cache = aug.images
    baseline = load_decoder(cfg, run.dir / "baseline_vae") if (run.dir / "baseline_vae").exists() else None
    if baseline is None:
        save_module(run.dir / "baseline_vae", b.vae)
        baseline = load_decoder(cfg, run.dir / "baseline_vae")
    run.streams.append("decoder/*")
    res = train_decoder(b.vae, images, d.steps, cfg.seed, d.batch, d.lr, cache, d.latent_prob, d.jagged_fraction,
                        d.boundary_weight, cfg.recipe(), object_pool(cfg), cfg.jitter_params(), out_dir=run.dir,
                        resume=run.resume, checkpoint_every=d.checkpoint_every)
    save_module(run.dir / "decoder", b.vae, to_dict(cfg))
    items = _eval_items(cfg, run)
    trained = _gae_per_item(b.vae, items, True, cfg.eval.band_px)
    base = _gae_per_item(baseline, items, False, cfg.eval.band_px)
    _write_gae(run.path("gae_trained.csv"), items, trained)
    _write_gae(run.path("gae_baseline.csv"), items, base)
    return _trace_metrics(res.trace) | _freeze_report(res) | {
        "checkpoint": "decoder", "n_eval": len(items), "gae_mean_trained": float(trained.mean()),
        "gae_mean_baseline": float(base.mean()), "gae_paired_wins": int((trained < base).sum()),
        "recon_l2_baseline": reconstruction_l2(baseline, images[:16]),
        "recon_l2_trained_conditional": reconstruction_l2(b.vae, images[:16], conditional=True)}


def _gae_per_item(vae, items, conditional: bool, band_px: int) -> np.ndarray:
    comps = decode_items(vae, items, conditional)
    return np.array([gradient_at_edge(c, it.target, it.mask, band_px) for c, it in zip(comps, items)])


def _write_gae(path: Path, items, values):
    write_trace(path, [{"id": it.id, "gae": float(v)} for it, v in zip(items, values)])


def load_scorers(specs: list[str]) -> ScorerRegistry:
    """``NAME=package.module:function`` entries become registered scorers."""
    reg = ScorerRegistry()
    for spec in specs:
        name, _, target = spec.partition("=")
        mod, _, fn = target.partition(":")
        if not (name and mod and fn):
            raise UsageError(f"eval.scorers entry {spec!r} must look like NAME=module:function")
        try:
            reg.register(name, getattr(importlib.import_module(mod), fn))
        except (ImportError, AttributeError) as e:
            raise UsageError(f"eval.scorers entry {spec!r}: {e}") from e
    return reg


def cmd_eval(cfg: Config, run: Run) -> dict:
    if cfg.eval.decoder:
        vae, conditional = load_decoder(cfg, cfg.eval.decoder), True
    else:
        vae, conditional = backbones(cfg, run, ("vae",)).vae, False
    items = _eval_items(cfg, run)
    comps = decode_items(vae, items, conditional)
    save_eval_set(run.dir / "eval_set", items, {"decoder": cfg.eval.decoder, "conditional": conditional})
    for it, c in zip(items, comps):
        save_png(run.path("eval_set", "result", f"{it.id}.png"), c)
    per_item = np.array([gradient_at_edge(c, it.target, it.mask, cfg.eval.band_px) for c, it in zip(comps, items)])
    _write_gae(run.path("gae.csv"), items, per_item)
    scores = score_with_plugin(load_scorers(cfg.eval.scorers), comps, [it.target for it in items],
                               [it.mask for it in items])
    scores["G@e"] = float(per_item.mean())
    return {"n_items": len(items), "conditional": conditional, "scores": scores}


def cmd_judge(cfg: Config, run: Run) -> dict:
    j = cfg.judge
    if not j.eval_dir:
        raise UsageError("judge.eval_dir must point at an eval set with result/ images (see the eval subcommand)")
    src = Path(j.eval_dir)
    if not (src / "manifest.json").exists():
        raise UsageError(f"judge.eval_dir {src} has no manifest.json")
    items = load_eval_set(src)
    composites = []
    for it in items:
        res_path = src / "result" / f"{it.id}.png"
        result = load_png(res_path) if res_path.exists() else it.image
        comp = make_judge_composite(it.target, it.mask, result, j.alpha, j.gap_px)
        composites.append((it.id, comp))
    client = JudgeClient(cfg.judge_config())
    records = client.judge_many(composites)
    with open(run.path("results.jsonl"), "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    transport = sum(1 for r in records if r["error"] and r["error"].startswith(("transport", "timeout")))
    if records and transport == len(records):
        raise ExternalServiceError(f"judge service unreachable for all {transport} items at {j.base_url}")
    verdicts = [r["verdict"] for r in records if r["verdict"] is not None]
    return {"n_items": len(records), "n_verdicts": len(verdicts), "n_errors": len(records) - len(verdicts),
            "n_transport_errors": transport, "hallucination_rate": float(np.mean(verdicts)) if verdicts else None}


def _source_items(cfg: Config, run: Run) -> list[SourceItem]:
    d = cfg.dataset
    if d.source_dir:
        # <source_dir>/<domain>/<source_dataset>/<image>.png, optional <image>.seg.png
        items = []
        for f in sorted(Path(d.source_dir).rglob("*")):
            if f.suffix.lower() not in (".png", ".jpg", ".jpeg") or f.stem.endswith(".seg"):
                continue
            rel = f.relative_to(d.source_dir).parts
            if len(rel) < 3:
                raise UsageError(f"{f}: expected <domain>/<source_dataset>/<image>")
            seg = f.with_name(f.stem + ".seg.png")
            items.append(SourceItem(f"{rel[1]}-{f.stem}", load_png(f), rel[1], rel[0],
                                    load_mask_png(seg) if seg.exists() else None))
        return items
    run.streams.append("source-image/*")
    return [SourceItem(f"toy-{i:05d}", _wide(toy_image(stream(cfg.seed, "source-image", i), 96)), "toy",
                       DOMAINS[i % len(DOMAINS)]) for i in range(d.n_synthetic)]


def _wide(img: np.ndarray) -> np.ndarray:
    """Non-square source so the centre crop is exercised."""
    return np.concatenate([img, img[:, :32]], axis=1)


def cmd_build_dataset(cfg: Config, run: Run) -> dict:
    d = cfg.dataset
    items = _source_items(cfg, run)
    if d.k > len(items):
        raise UsageError(f"dataset.k={d.k} exceeds the {len(items)} available source images")
    run.streams += ["cluster", "bench-mask/*"]
    records = build_benchmark(items, d.k, cfg.seed, run.dir / "benchmark", d.side, get_embedder(d.embedder),
                              cfg.recipe(), object_pool(cfg, d.side // 2))
    domains = [r["domain_tag"] for r in records]
    return {"k": len(records), "n_sources": len(items), "domain_counts": {t: domains.count(t) for t in DOMAINS}}


def inpaint(cfg: Config, b: Backbones, image: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
            alignment: AlignmentModule | None = None, decoder=None) -> dict[str, np.ndarray]:
    """Deterministic DDIM-style sampling from a seeded start latent, decoded and composited."""
    sched = cfg.noise_schedule()
    dtype = next(b.denoiser.parameters()).dtype
    with torch.no_grad():
        x = to_tensor(image, dtype)
        m = mask_tensor(mask, dtype)
        z_masked = b.vae.encode(x * (1 - m))
        lm = latent_mask(m, cfg.toy.latent_down)
        if alignment is not None:
            pm = torch.from_numpy(prior_patch_mask(mask, cfg.toy.patch, rng))[None]
            cond = ConditionBundle(align(alignment, mae_predict(b.mae, x, pm)))
        else:
            cond = b.denoiser.null_condition()
        z = torch.from_numpy(rng.standard_normal(tuple(z_masked.shape))).to(dtype)
        ts = np.linspace(sched.T - 1, 0, cfg.demo.sample_steps + 1).round().astype(int)
        for t, t_next in zip(ts[:-1], ts[1:]):
            a, s = sched.coeffs(int(t))
            pred = b.denoiser(z, z_masked, lm, cond, torch.full((1,), int(t)))
            eps = prediction_to_eps(pred, z, int(t), sched)
            z0 = (z - s * eps) / a
            a2, s2 = sched.coeffs(int(t_next))
            z = a2 * z0 + s2 * eps
        if decoder is not None:
            out = decoder.decode_cond(z, x * (1 - m), m)
        else:
            out = b.vae.decode(z)
    decoded = to_numpy(out).astype(np.float64)
    return {"decoded": decoded, "composite": composite(decoded, image, mask)}


def cmd_demo_inpaint(cfg: Config, run: Run) -> dict:
    b = backbones(cfg, run)
    images = corpus(cfg, "eval")
    if cfg.demo.image_index >= len(images):
        raise UsageError(f"demo.image_index={cfg.demo.image_index} but the eval corpus has {len(images)} images")
    image = images[cfg.demo.image_index]
    mask, tag = sample_mask(run.use_stream("demo-mask"), image.shape[0], image.shape[1], object_pool(cfg),
                            cfg.recipe())
    alignment = load_alignment(cfg, cfg.demo.alignment) if cfg.demo.alignment else None
    decoder = load_decoder(cfg, cfg.demo.decoder) if cfg.demo.decoder else None
    out = inpaint(cfg, b, image, mask, run.use_stream("demo-sample"), alignment, decoder)
    save_png(run.path("demo", "input.png"), image)
    save_mask_png(run.path("demo", "mask.png"), mask)
    save_png(run.path("demo", "composite.png"), out["composite"])
    save_array(run.path("demo", "composite.npy"), out["composite"])
    digest = hashlib.sha256(np.ascontiguousarray(out["composite"]).tobytes()).hexdigest()
    return {"mask_type": tag, "composite_sha256": digest,
            "gae": gradient_at_edge(out["composite"], image, mask, cfg.eval.band_px)}


# -- report ------------------------------------------------------------------------

SUMMARY_KEYS = ("run", "subcommand", "root_seed", "config_hash", "status", "metrics", "traces", "masks", "gae")


def _summarise_values(v: np.ndarray) -> dict:
    return {"n": int(v.size), "mean": float(v.mean()), "median": float(np.median(v)), "min": float(v.min()),
            "max": float(v.max())}


def build_summary(target: Path) -> tuple[dict, dict]:
    """Machine-readable summary of a finished run plus the series to plot."""
    from .training import read_trace

    manifest = json.loads((target / "manifest.json").read_text())
    metrics = json.loads((target / "metrics.json").read_text()) if (target / "metrics.json").exists() else {}
    traces, series = {}, {"traces": {}, "gae": {}, "ratios": None}
    for p in sorted(target.rglob("*_trace.csv")):
        rows = read_trace(p)
        if rows:
            name = str(p.relative_to(target).with_suffix(""))
            traces[name] = _trace_metrics(rows)
            series["traces"][name] = np.array([r["loss"] for r in rows])
    gae = {}
    for p in sorted(target.rglob("gae*.csv")):
        rows = read_trace(p)
        if rows:
            v = np.array([r["gae"] for r in rows])
            gae[p.stem] = _summarise_values(v)
            series["gae"][p.stem] = v
    masks = None
    mpath = target / "masks" / "manifest.json"
    if mpath.exists():
        recs = json.loads(mpath.read_text())["masks"]
        ratios = np.array([r["ratio"] for r in recs])
        tags = [r["tag"] for r in recs]
        masks = {"count": len(recs), "tag_counts": {t: tags.count(t) for t in sorted(set(tags))},
                 "ratio": _summarise_values(ratios)}
        series["ratios"] = ratios
    summary = {"run": target.name, "subcommand": manifest["subcommand"], "root_seed": manifest["root_seed"],
               "config_hash": manifest["config_hash"], "status": manifest["status"], "metrics": metrics,
               "traces": traces, "masks": masks, "gae": gae}
    return summary, series


def emit_plots(series: dict, out: Path) -> list[str]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    meta = {"Software": None}
    for name, loss in series["traces"].items():
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(loss, lw=0.6, alpha=0.5, label="loss")
        if loss.size >= 20:
            w = max(1, loss.size // 20)
            ax.plot(np.arange(w - 1, loss.size), np.convolve(loss, np.ones(w) / w, "valid"), label=f"mean/{w}")
        ax.set_xlabel("step")
        ax.set_title(name)
        ax.legend()
        f = f"loss_{name.replace('/', '_')}.png"
        fig.savefig(out / f, dpi=80, metadata=meta)
        plt.close(fig)
        written.append(f)
    if series["gae"]:
        fig, ax = plt.subplots(figsize=(5, 3))
        for name, v in series["gae"].items():
            ax.hist(v, bins=30, alpha=0.5, label=name)
        ax.set_xlabel("G@e")
        ax.legend()
        fig.savefig(out / "gae_hist.png", dpi=80, metadata=meta)
        plt.close(fig)
        written.append("gae_hist.png")
    if series["ratios"] is not None:
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.hist(series["ratios"], bins=20, range=(0, 1))
        ax.set_xlabel("mask ratio")
        fig.savefig(out / "mask_ratio_hist.png", dpi=80, metadata=meta)
        plt.close(fig)
        written.append("mask_ratio_hist.png")
    return written


def cmd_report(cfg: Config, run: Run, target: str | Path | None = None) -> dict:
    if target is None:
        raise UsageError("report needs --run PATH pointing at a finished run directory")
    target = Path(target)
    if not (target / "manifest.json").exists():
        raise UsageError(f"{target} is not a run directory (no manifest.json)")
    summary, series = build_summary(target)
    out = target / "report"
    if out.exists():
        shutil.rmtree(out)
    out.mkdir()
    summary["plots"] = emit_plots(series, out)
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    shutil.copy(out / "summary.json", run.dir / "summary.json")
    return {"report_dir": str(out), "plots": summary["plots"]}


def load_summary(path: str | Path) -> dict:
    """Parse ``summary.json`` and check its top-level shape."""
    data = json.loads(Path(path).read_text())
    missing = [k for k in SUMMARY_KEYS if k not in data]
    if missing:
        raise ValueError(f"{path}: summary lacks {', '.join(missing)}")
    return data


COMMANDS = {"mask-gen": cmd_mask_gen, "augment-corpus": cmd_augment_corpus, "train-mae": cmd_train_mae,
            "train-align": cmd_train_align, "train-inject": cmd_train_inject, "train-decoder": cmd_train_decoder,
            "eval": cmd_eval, "judge": cmd_judge, "build-dataset": cmd_build_dataset,
            "demo-inpaint": cmd_demo_inpaint, "report": cmd_report}
