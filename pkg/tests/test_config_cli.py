import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from asuka_lab.cli import main
from asuka_lab.config import ConfigError, apply_overrides, config_digest, load_config, to_dict, validate_config
from asuka_lab.decoder import color_shift_eval_set, save_eval_set
from asuka_lab.images import save_png, toy_corpus
from asuka_lab.pipeline import load_summary
from asuka_lab.stub_judge import StubJudgeServer, mixed_reply

# small enough that every subcommand finishes in seconds
FAST = ["--set", "toy.image_size=32", "--set", "pretrain.vae_steps=20", "--set", "pretrain.mae_steps=20",
        "--set", "pretrain.denoiser_steps=20", "--set", "corpus.n_train=8", "--set", "corpus.n_eval=6",
        "--set", "masks.object_pool=2"]


def run_cli(tmp_path, *args):
    code = main(list(args) + ["--run-root", str(tmp_path / "runs")])
    dirs = sorted(p for p in (tmp_path / "runs").iterdir() if not p.name.startswith(".")) \
        if (tmp_path / "runs").exists() else []
    return code, dirs


# -- configuration ---------------------------------------------------------------------

def test_defaults():
    cfg = validate_config({})
    assert (cfg.masks.p_object, cfg.masks.p_irregular, cfg.masks.p_regular) == (0.5, 0.4, 0.1)
    assert cfg.align.lr_align == 5e-2 and cfg.align.decay_steps == 2000
    assert cfg.judge.max_in_flight == 4 and cfg.judge.alpha == 0.5 and cfg.judge.gap_px == 16
    assert cfg.decoder.latent_prob == 0.5 and cfg.decoder.jagged_fraction == 0.25
    assert cfg.schedule.T == 1000


def test_every_violation_is_listed():
    with pytest.raises(ConfigError) as e:
        validate_config({"masks": {"bogus": 1, "p_object": 0.9}, "align": {"lr_align": -1}, "extra": 3})
    text = "\n".join(e.value.violations)
    for needle in ("masks.bogus", "align.lr_align", "extra", "must equal 1"):
        assert needle in text


def test_overrides_and_digest(tmp_path):
    raw = apply_overrides({}, ["align.steps=7", "schedule.family=rectified-flow", "eval.scorers=[]"])
    assert raw == {"align": {"steps": 7}, "schedule": {"family": "rectified-flow"}, "eval": {"scorers": []}}
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"seed": 3, "align": {"steps": 5}}))
    cfg = load_config(p, ["align.steps=9"], seed=11)
    assert cfg.seed == 11 and cfg.align.steps == 9
    assert config_digest(cfg) == config_digest(validate_config(to_dict(cfg)))
    assert config_digest(cfg) != config_digest(validate_config({}))
    with pytest.raises(ConfigError):
        apply_overrides({}, ["no-equals-sign"])


# -- exit codes -----------------------------------------------------------------------

def test_validation_exit_code(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("masks:\n  p_object: 0.7\n")
    assert main(["mask-gen", "--config", str(bad), "--seed", "0", "--run-root", str(tmp_path)]) == 2
    assert main(["mask-gen", "--config", str(tmp_path / "missing.yaml"), "--run-root", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as e:
        main(["not-a-command"])
    assert e.value.code == 2


def test_usage_error_exit_code(tmp_path):
    code, _ = run_cli(tmp_path, "judge", "--seed", "0")  # no eval_dir configured
    assert code == 2
    code, _ = run_cli(tmp_path, "build-dataset", "--seed", "0", "--set", "dataset.k=50",
                      "--set", "dataset.n_synthetic=10")
    assert code == 2


def test_runtime_exit_code(tmp_path):
    # a decoder checkpoint path that does not exist fails at load time
    code, dirs = run_cli(tmp_path, "eval", "--seed", "0", *FAST, "--set", f"eval.decoder={tmp_path / 'nope'}")
    assert code == 3
    assert json.loads((dirs[-1] / "manifest.json").read_text())["status"] == "failed"


def test_external_service_exit_code(tmp_path):
    ev = tmp_path / "ev"
    save_eval_set(ev, color_shift_eval_set(0, toy_corpus(0, 3, 32)))
    code, _ = run_cli(tmp_path, "judge", "--seed", "0", "--set", f"judge.eval_dir={ev}",
                      "--set", "judge.base_url=http://127.0.0.1:9/v1", "--set", "judge.max_retries=0",
                      "--set", "judge.timeout_s=1")
    assert code == 4


# -- run directories and determinism --------------------------------------------------------

def test_mask_gen_run_dir_and_determinism(tmp_path):
    code_a, _ = run_cli(tmp_path / "a", "mask-gen", "--seed", "7", "--n", "20")
    code_b, _ = run_cli(tmp_path / "b", "mask-gen", "--seed", "7", "--n", "20")
    assert code_a == code_b == 0
    (a,), (b,) = [sorted((tmp_path / x / "runs").iterdir()) for x in "ab"]
    digest = config_digest(load_config(None, seed=7))
    assert a.name.endswith(digest) and len(a.name.split("-")[0]) == 8
    for f in ("config.yaml", "manifest.json", "metrics.json", "masks/manifest.json", "masks/mask_00000.png"):
        assert (a / f).read_bytes() == (b / f).read_bytes(), f
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["root_seed"] == 7 and manifest["status"] == "ok" and "mask/*" in manifest["streams"]
    snap = yaml.safe_load((a / "config.yaml").read_text())
    assert snap["seed"] == 7


def test_report_roundtrip(tmp_path):
    _, (run,) = run_cli(tmp_path, "mask-gen", "--seed", "1", "--n", "30")
    code = main(["report", "--run", str(run), "--run-root", str(tmp_path / "reports")])
    assert code == 0
    summary = load_summary(run / "report" / "summary.json")
    assert summary["masks"]["count"] == 30 and summary["root_seed"] == 1
    assert "mask_ratio_hist.png" in summary["plots"]
    assert (run / "report" / "mask_ratio_hist.png").stat().st_size > 0
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    with pytest.raises(ValueError):
        load_summary(bad)


def test_eval_marks_external_metrics_unavailable(tmp_path):
    code, (run,) = run_cli(tmp_path, "eval", "--seed", "0", *FAST)
    assert code == 0
    scores = json.loads((run / "metrics.json").read_text())["scores"]
    assert scores["LPIPS"] == scores["FID"] == "unavailable" and scores["G@e"] >= 0
    assert len(list((run / "eval_set" / "result").glob("*.png"))) == 6


def test_eval_then_judge_against_stub(tmp_path):
    _, (ev,) = run_cli(tmp_path / "e", "eval", "--seed", "0", *FAST)
    with StubJudgeServer(mixed_reply) as s:
        code, (run,) = run_cli(tmp_path / "j", "judge", "--seed", "0", "--set", f"judge.eval_dir={ev / 'eval_set'}",
                               "--set", f"judge.base_url={s.base_url}")
    assert code == 0
    recs = [json.loads(l) for l in (run / "results.jsonl").read_text().splitlines()]
    assert len(recs) == 6
    for r in recs:
        assert set(r) >= {"id", "verdict", "raw_response", "latency_ms"}
        assert (r["verdict"] is None) == (mixed_reply(r["id"]) == "garbage")


def test_build_dataset_from_source_dir(tmp_path):
    src = tmp_path / "src"
    for i, img in enumerate(toy_corpus(0, 6, 40)):
        d = src / ("indoor", "landscape")[i % 2] / "toyset"
        d.mkdir(parents=True, exist_ok=True)
        save_png(d / f"im{i}.png", img)
    code, (run,) = run_cli(tmp_path, "build-dataset", "--seed", "0", "--set", f"dataset.source_dir={src}",
                           "--set", "dataset.k=3", "--set", "dataset.side=32")
    assert code == 0
    manifest = json.loads((run / "benchmark" / "manifest.json").read_text())
    assert len(manifest["items"]) == 3
    assert {r["domain_tag"] for r in manifest["items"]} <= {"indoor", "landscape"}


def test_train_decoder_and_resume(tmp_path):
    args = ["train-decoder", "--seed", "0", *FAST, "--set", "decoder.steps=6", "--set", "decoder.checkpoint_every=3"]
    code, (run,) = run_cli(tmp_path, *args)
    assert code == 0
    m = json.loads((run / "metrics.json").read_text())
    assert m["frozen_unchanged"] and m["n_eval"] == 6
    assert (run / "gae_trained.csv").exists() and (run / "gae_baseline.csv").exists()
    before = (run / "decoder" / "tensors.bin").read_bytes()
    assert main(args + ["--run-root", str(tmp_path / "runs"), "--resume", str(run)]) == 0
    assert (run / "decoder" / "tensors.bin").read_bytes() == before


def test_demo_inpaint_bit_identical(tmp_path):
    hashes = []
    arrays = []
    for sub in ("a", "b"):
        code, (run,) = run_cli(tmp_path / sub, "demo-inpaint", "--seed", "5", *FAST)
        assert code == 0
        hashes.append(json.loads((run / "metrics.json").read_text())["composite_sha256"])
        arrays.append(np.load(run / "demo" / "composite.npy"))
    assert hashes[0] == hashes[1]
    assert np.array_equal(arrays[0], arrays[1])


@pytest.mark.parametrize("sub,extra,artifact", [
    ("augment-corpus", ["--set", "latent_aug.apply_prob=1.0"], "latent_cache"),
    ("train-mae", [], "mae/header.json"),
    ("train-align", ["--set", "align.steps=3"], "alignment/header.json"),
    ("train-inject", ["--set", "inject.steps=3"], "inject/header.json"),
])
def test_training_subcommands(tmp_path, sub, extra, artifact):
    code, (run,) = run_cli(tmp_path, sub, "--seed", "2", *FAST, *extra)
    assert code == 0
    assert (run / artifact).exists()
    m = json.loads((run / "metrics.json").read_text())
    if sub.startswith("train-") and sub != "train-mae":
        assert m["frozen_unchanged"] and m["steps"] == 3
    if sub == "augment-corpus":
        assert m["applied"] == 8 and 500 <= m["t_min"] <= m["t_max"] < 1000
