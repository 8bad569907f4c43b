"""Run configuration: one YAML file, strict schema, documented defaults.

Unknown keys and out-of-range values are rejected; every violation is
reported with its dotted field path.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import ConfigDict, Field, TypeAdapter, ValidationError, model_validator
from pydantic.dataclasses import dataclass

from .backbones import ToyConfig
from .judge import JudgeConfig
from .masks import MaskRecipe
from .schedules import ColorJitterParams, NoiseSchedule

_STRICT = ConfigDict(extra="forbid")


class ConfigError(ValueError):
    def __init__(self, violations: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(violations))
        self.violations = violations


@dataclass(config=_STRICT)
class ToySection:
    image_size: int = Field(64, ge=32)
    patch: int = Field(16, ge=4)
    latent_down: int = Field(8, ge=2)
    latent_ch: int = Field(4, ge=1)
    mae_dim: int = Field(64, ge=8)
    cond_dim: int = Field(128, ge=8)
    layers: int = Field(4, ge=1)
    heads: int = Field(4, ge=1)
    vae_width: int = Field(32, ge=4)
    cond_mode: Literal["token", "cross"] = "token"

    @model_validator(mode="after")
    def _shapes(self):
        if self.image_size % self.patch or self.image_size % self.latent_down:
            raise ValueError("image_size must be divisible by patch and latent_down")
        if self.cond_dim % (4 * self.heads) or self.mae_dim % self.heads:
            raise ValueError("cond_dim must be divisible by 4*heads and mae_dim by heads")
        return self


@dataclass(config=_STRICT)
class MaskSection:
    p_object: float = Field(0.5, ge=0.0, le=1.0)
    p_irregular: float = Field(0.4, ge=0.0, le=1.0)
    p_regular: float = Field(0.1, ge=0.0, le=1.0)
    p_combine_object_with_irregular: float = Field(0.5, ge=0.0, le=1.0)
    ratio_min: float = Field(0.1, ge=0.0, le=1.0)
    ratio_max: float = Field(0.75, ge=0.0, le=1.0)
    dilation_min: int = Field(5, ge=0)
    dilation_max: int = Field(20, ge=0)
    jagged_fraction: float = Field(0.0, ge=0.0, le=1.0)
    object_pool: int = Field(8, ge=0)

    @model_validator(mode="after")
    def _simplex(self):
        total = self.p_object + self.p_irregular + self.p_regular
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"p_object + p_irregular + p_regular must equal 1 (got {total:g})")
        if self.ratio_min >= self.ratio_max:
            raise ValueError("ratio_min must be below ratio_max")
        if self.dilation_min > self.dilation_max:
            raise ValueError("dilation_min must not exceed dilation_max")
        return self


@dataclass(config=_STRICT)
class ScheduleSection:
    family: Literal["diffusion", "rectified-flow"] = "diffusion"
    T: int = Field(1000, ge=2)


@dataclass(config=_STRICT)
class JitterSection:
    brightness: float = Field(0.15, ge=0.0)
    contrast: float = Field(0.2, ge=0.0)
    saturation: float = Field(0.1, ge=0.0)
    hue: float = Field(0.03, ge=0.0, le=0.5)


@dataclass(config=_STRICT)
class CorpusSection:
    n_train: int = Field(64, ge=1)
    n_eval: int = Field(200, ge=1)
    source_dir: str | None = None


@dataclass(config=_STRICT)
class PretrainSection:
    vae_steps: int = Field(600, ge=0)
    mae_steps: int = Field(400, ge=0)
    denoiser_steps: int = Field(600, ge=0)
    batch: int = Field(8, ge=1)
    backbones: str | None = None


@dataclass(config=_STRICT)
class AlignSection:
    lr_align: float = Field(5e-2, gt=0.0)
    steps: int = Field(2000, ge=0)
    batch: int = Field(4, ge=1)
    ref_batch: int = Field(1024, ge=1)  # lr_align is quoted at this batch; scaled linearly to `batch`
    p0: float = Field(1.0, ge=0.0, le=1.0)
    p_final: float = Field(0.1, ge=0.0, le=1.0)
    decay_steps: int = Field(2000, ge=0)
    checkpoint_every: int = Field(500, ge=1)


@dataclass(config=_STRICT)
class InjectSection:
    lr: float = Field(1e-3, gt=0.0)
    steps: int = Field(2000, ge=0)
    batch: int = Field(4, ge=1)
    rank: int = Field(8, ge=1)
    scale: float = 1.0
    gate_bias: float = -4.0
    checkpoint_every: int = Field(500, ge=1)


@dataclass(config=_STRICT)
class DecoderSection:
    lr: float = Field(2e-3, gt=0.0)
    steps: int = Field(2000, ge=0)
    batch: int = Field(8, ge=1)
    latent_prob: float = Field(0.5, ge=0.0, le=1.0)
    jagged_fraction: float = Field(0.25, ge=0.0, le=1.0)
    boundary_weight: float = Field(0.5, ge=0.0)
    checkpoint_every: int = Field(500, ge=1)


@dataclass(config=_STRICT)
class LatentAugSection:
    apply_prob: float = Field(0.5, ge=0.0, le=1.0)
    workers: int = Field(1, ge=1)


@dataclass(config=_STRICT)
class EvalSection:
    band_px: int = Field(2, ge=1)
    decoder: str | None = None
    scorers: list[str] = dataclasses.field(default_factory=list)


@dataclass(config=_STRICT)
class JudgeSection:
    base_url: str = "http://127.0.0.1:8011/v1"
    model_id: str = "Qwen3-VL-235B-A22B-Thinking"
    token_env: str = "ASUKA_JUDGE_TOKEN"
    max_retries: int = Field(3, ge=0)
    timeout_s: float = Field(60.0, gt=0.0)
    max_in_flight: int = Field(4, ge=1)
    alpha: float = Field(0.5, ge=0.0, le=1.0)
    gap_px: int = Field(16, ge=0)
    eval_dir: str | None = None
    prompt_file: str | None = None


@dataclass(config=_STRICT)
class DatasetSection:
    k: int = Field(500, ge=1)
    side: int = Field(512, ge=16)
    embedder: str = "toy"
    source_dir: str | None = None
    n_synthetic: int = Field(1000, ge=1)


@dataclass(config=_STRICT)
class DemoSection:
    sample_steps: int = Field(10, ge=1)
    image_index: int = Field(0, ge=0)
    alignment: str | None = None
    decoder: str | None = None


@dataclass(config=_STRICT)
class Config:
    seed: int = Field(0, ge=0)
    run_root: str = "runs"
    toy: ToySection = dataclasses.field(default_factory=ToySection)
    masks: MaskSection = dataclasses.field(default_factory=MaskSection)
    schedule: ScheduleSection = dataclasses.field(default_factory=ScheduleSection)
    jitter: JitterSection = dataclasses.field(default_factory=JitterSection)
    corpus: CorpusSection = dataclasses.field(default_factory=CorpusSection)
    pretrain: PretrainSection = dataclasses.field(default_factory=PretrainSection)
    align: AlignSection = dataclasses.field(default_factory=AlignSection)
    inject: InjectSection = dataclasses.field(default_factory=InjectSection)
    decoder: DecoderSection = dataclasses.field(default_factory=DecoderSection)
    latent_aug: LatentAugSection = dataclasses.field(default_factory=LatentAugSection)
    eval: EvalSection = dataclasses.field(default_factory=EvalSection)
    judge: JudgeSection = dataclasses.field(default_factory=JudgeSection)
    dataset: DatasetSection = dataclasses.field(default_factory=DatasetSection)
    demo: DemoSection = dataclasses.field(default_factory=DemoSection)

    # -- views onto the module-level parameter objects --
    def toy_config(self) -> ToyConfig:
        return ToyConfig(**{f.name: getattr(self.toy, f.name) for f in dataclasses.fields(ToySection)})

    def recipe(self) -> MaskRecipe:
        m = self.masks
        return MaskRecipe(m.p_object, m.p_irregular, m.p_regular, m.p_combine_object_with_irregular,
                          m.ratio_min, m.ratio_max, (m.dilation_min, m.dilation_max))

    def noise_schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.schedule.family, self.schedule.T)

    def jitter_params(self) -> ColorJitterParams:
        j = self.jitter
        return ColorJitterParams(j.brightness, j.contrast, j.saturation, j.hue)

    def judge_config(self) -> JudgeConfig:
        j = self.judge
        kw = dict(base_url=j.base_url, model_id=j.model_id, token_env=j.token_env, max_retries=j.max_retries,
                  timeout_s=j.timeout_s, max_in_flight=j.max_in_flight)
        if j.prompt_file:
            kw["prompt_template"] = Path(j.prompt_file).read_text()
        return JudgeConfig(**kw)


_ADAPTER = TypeAdapter(Config)


def _format(err: ValidationError) -> list[str]:
    out = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        out.append(f"{loc}: {e['msg']}")
    return out


def _drop(raw: dict, loc: tuple) -> bool:
    node = raw
    for p in loc[:-1]:
        if not isinstance(node, dict) or p not in node:
            return False
        node = node[p]
    if isinstance(node, dict) and loc and loc[-1] in node:
        del node[loc[-1]]
        return True
    return False


def validate_config(raw: dict | None) -> Config:
    """Fill defaults and check the schema; raises ``ConfigError`` listing every violation.

    Cross-field checks of a section only run once its fields are valid, so
    offending fields are dropped and the rest re-validated until nothing new appears.
    """
    try:
        return _ADAPTER.validate_python(raw or {})
    except ValidationError as e:
        violations, errors = _format(e), e.errors()
    work = json.loads(json.dumps(raw))
    while any([_drop(work, tuple(err["loc"])) for err in errors]):
        try:
            _ADAPTER.validate_python(work)
            break
        except ValidationError as e:
            errors = e.errors()
            new = [v for v in _format(e) if v not in violations]
            if not new:
                break
            violations += new
    raise ConfigError(violations)


def to_dict(cfg: Config) -> dict:
    return _ADAPTER.dump_python(cfg, mode="json")


def config_digest(cfg: Config) -> str:
    return hashlib.sha256(json.dumps(to_dict(cfg), sort_keys=True).encode()).hexdigest()[:8]


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """``key.sub=value`` pairs; values are parsed as YAML scalars."""
    raw = json.loads(json.dumps(raw or {}))
    for item in overrides:
        if "=" not in item:
            raise ConfigError([f"override {item!r} is not key=value"])
        key, value = item.split("=", 1)
        node = raw
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError([f"override {key!r}: {p} is not a section"])
        node[parts[-1]] = yaml.safe_load(value)
    return raw


def load_config(path: str | Path | None, overrides: list[str] = (), seed: int | None = None) -> Config:
    raw: dict[str, Any] = {}
    if path:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError([f"{path}: not valid YAML ({e})"]) from None
        if not isinstance(raw, dict):
            raise ConfigError([f"{path}: top level must be a mapping"])
    raw = apply_overrides(raw, list(overrides))
    if seed is not None:
        raw["seed"] = seed
    return validate_config(raw)
