"""Typed configuration for every stage of the pipeline.

All sections are plain dataclasses. ``RunConfig.from_dict`` walks the nested
JSON document, rejects unknown keys and validates each section, collecting
every problem before raising so a bad config file is reported in one go.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional


class ConfigError(ValueError):
    """Invalid or unknown configuration keys. ``problems`` lists every offence."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid config: " + "; ".join(self.problems))


@dataclass
class SplitSpec:
    n_labeled: int = 100
    n_unlabeled: int = 1000
    seed: int = 0
    per_class_balanced: bool = True

    def validate(self) -> list[str]:
        errs = []
        if self.n_labeled < 0:
            errs.append("split.n_labeled must be >= 0")
        if self.n_unlabeled < 0:
            errs.append("split.n_unlabeled must be >= 0")
        return errs


@dataclass
class AugmentPolicy:
    # fraction of the image area kept by the random crop
    crop_scale_range: tuple[float, float] = (0.7, 1.0)
    flip_prob: float = 0.5
    brightness_delta: float = 0.1
    contrast_range: tuple[float, float] = (0.8, 1.2)

    def validate(self) -> list[str]:
        errs = []
        lo, hi = self.crop_scale_range
        if not (0 < lo <= hi <= 1):
            errs.append("augment.crop_scale_range must satisfy 0 < lo <= hi <= 1")
        if not (0 <= self.flip_prob <= 1):
            errs.append("augment.flip_prob must be in [0, 1]")
        if self.brightness_delta < 0:
            errs.append("augment.brightness_delta must be >= 0")
        clo, chi = self.contrast_range
        if not (0 < clo <= chi):
            errs.append("augment.contrast_range must satisfy 0 < lo <= hi")
        return errs

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(crop_scale_range=(1.0, 1.0), flip_prob=0.0, brightness_delta=0.0, contrast_range=(1.0, 1.0))


@dataclass
class NetConfig:
    image_size: int = 64
    n_classes: int = 4
    encoder_widths: tuple[int, ...] = (16, 32, 64, 64)
    d_z: int = 32
    noise_dim: int = 64
    gen_width: int = 64
    dec_width: int = 64
    disc_width: int = 16
    sn_power_iterations: int = 5

    @property
    def d_h(self) -> int:
        return self.encoder_widths[-1]

    def validate(self) -> list[str]:
        errs = []
        if self.image_size <= 0 or self.image_size % 16:
            errs.append("nets.image_size must be a positive multiple of 16")
        if self.n_classes < 1:
            errs.append("nets.n_classes must be >= 1")
        if not self.encoder_widths or any(w <= 0 for w in self.encoder_widths):
            errs.append("nets.encoder_widths must be a non-empty list of positive ints")
        elif self.d_z > self.d_h:
            errs.append("nets.d_z must not exceed the encoder output width")
        for name in ("d_z", "noise_dim", "gen_width", "dec_width", "disc_width", "sn_power_iterations"):
            if getattr(self, name) <= 0:
                errs.append(f"nets.{name} must be > 0")
        return errs


@dataclass
class ContrastiveConfig:
    temperature: float = 0.5

    def validate(self) -> list[str]:
        return [] if self.temperature > 0 else ["contrastive.temperature must be > 0"]


@dataclass
class GanTargets:
    a: float = 0.0  # fake target for D
    b: float = 1.0  # real target for D
    c: float = 1.0  # fake target for G

    def validate(self) -> list[str]:
        return [] if self.a != self.b else ["gan.a and gan.b must differ"]


@dataclass
class MixMatchConfig:
    lambda_u: float = 75.0
    sharpen_T: float = 0.5
    mixup_alpha: float = 0.75
    k_augment: int = 2
    labeled_fraction: float = 1.0 / 3.0
    rampup_fraction: float = 0.1

    def validate(self) -> list[str]:
        errs = []
        if self.lambda_u < 0:
            errs.append("mixmatch.lambda_u must be >= 0")
        if self.sharpen_T <= 0:
            errs.append("mixmatch.sharpen_T must be > 0")
        if self.mixup_alpha <= 0:
            errs.append("mixmatch.mixup_alpha must be > 0")
        if self.k_augment < 1:
            errs.append("mixmatch.k_augment must be >= 1")
        if not (0 < self.labeled_fraction <= 1):
            errs.append("mixmatch.labeled_fraction must be in (0, 1]")
        if not (0 <= self.rampup_fraction <= 1):
            errs.append("mixmatch.rampup_fraction must be in [0, 1]")
        return errs


@dataclass
class StageConfig:
    stage1_epochs: int = 300
    stage2_epochs: int = 3000
    stage3_epochs: int = 200
    stage4_epochs: int = 1000
    learning_rate: float = 1e-4
    betas: tuple[float, float] = (0.5, 0.999)
    # per-stage overrides of learning_rate, keyed "1".."4"
    stage_lr: dict[str, float] = field(default_factory=dict)
    batch_size: int = 32
    fid_eval_interval: int = 10
    fid_sample_size: int = 256
    eval_interval: int = 1
    seed: int = 0
    use_decoder: bool = True
    # "labeled" or "all": which real images the stage-2 GAN imitates
    gan_data: str = "all"
    # pseudo-label real unlabeled images in stage 4 (in addition to fakes)
    pseudo_label_unlabeled: bool = True
    # fakes drawn per batch in stages 3-4; None means batch_size
    fakes_per_batch: Optional[int] = None
    # "fresh" or "stage2": the discriminator stage 3 starts from
    stage3_init: str = "fresh"

    def lr(self, stage: int) -> float:
        return float(self.stage_lr.get(str(stage), self.learning_rate))

    @property
    def n_fakes(self) -> int:
        return self.batch_size if self.fakes_per_batch is None else self.fakes_per_batch

    def validate(self) -> list[str]:
        errs = []
        for name in ("stage1_epochs", "stage2_epochs", "stage3_epochs", "stage4_epochs",
                     "batch_size", "fid_eval_interval", "fid_sample_size", "eval_interval"):
            if getattr(self, name) <= 0:
                errs.append(f"stages.{name} must be > 0")
        if self.learning_rate <= 0:
            errs.append("stages.learning_rate must be > 0")
        for k, v in self.stage_lr.items():
            if k not in {"1", "2", "3", "4"} or v <= 0:
                errs.append(f"stages.stage_lr[{k!r}] must be a stage 1-4 with positive rate")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            errs.append("stages.betas must lie in [0, 1)")
        if self.fid_sample_size < 2:
            errs.append("stages.fid_sample_size must be >= 2")
        if self.gan_data not in ("labeled", "all"):
            errs.append("stages.gan_data must be 'labeled' or 'all'")
        if self.stage3_init not in ("fresh", "stage2"):
            errs.append("stages.stage3_init must be 'fresh' or 'stage2'")
        if self.fakes_per_batch is not None and self.fakes_per_batch < 0:
            errs.append("stages.fakes_per_batch must be >= 0")
        return errs


_SECTIONS = {
    "split": SplitSpec,
    "augment": AugmentPolicy,
    "nets": NetConfig,
    "contrastive": ContrastiveConfig,
    "gan": GanTargets,
    "mixmatch": MixMatchConfig,
    "stages": StageConfig,
}


@dataclass
class RunConfig:
    run_id: str = "run"
    output_dir: str = "runs"
    manifest: str = ""
    split: SplitSpec = field(default_factory=SplitSpec)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    nets: NetConfig = field(default_factory=NetConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    gan: GanTargets = field(default_factory=GanTargets)
    mixmatch: MixMatchConfig = field(default_factory=MixMatchConfig)
    stages: StageConfig = field(default_factory=StageConfig)

    def validate(self) -> list[str]:
        errs = []
        if not self.run_id:
            errs.append("run_id must be non-empty")
        for name in _SECTIONS:
            errs.extend(getattr(self, name).validate())
        return errs

    def to_dict(self) -> dict[str, Any]:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "RunConfig":
        problems: list[str] = []
        top = {f.name for f in dataclasses.fields(cls)}
        for key in doc:
            if key not in top:
                problems.append(f"unknown key {key!r}")
        kwargs: dict[str, Any] = {}
        for key in ("run_id", "output_dir", "manifest"):
            if key in doc:
                kwargs[key] = str(doc[key])
        for name, section_cls in _SECTIONS.items():
            if name in doc:
                section, errs = _build_section(section_cls, doc[name], name)
                problems.extend(errs)
                if section is not None:
                    kwargs[name] = section
        if problems:
            raise ConfigError(problems)
        cfg = cls(**kwargs)
        errs = cfg.validate()
        if errs:
            raise ConfigError(errs)
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError([f"{path}: not valid JSON ({exc})"]) from exc
        if not isinstance(doc, dict):
            raise ConfigError([f"{path}: top level must be an object"])
        return cls.from_dict(doc)


def _type_ok(default, value) -> bool:
    if default is None:
        return value is None or (isinstance(value, int) and not isinstance(value, bool))
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, tuple):
        return isinstance(value, tuple) and all(isinstance(x, (int, float)) for x in value)
    return isinstance(value, type(default))


def _build_section(section_cls, values, prefix):
    if not isinstance(values, dict):
        return None, [f"{prefix} must be an object"]
    known = {f.name: f for f in dataclasses.fields(section_cls)}
    errs = [f"unknown key {prefix}.{k}" for k in values if k not in known]
    if errs:
        return None, errs
    kwargs = {}
    defaults = section_cls()
    for k, v in values.items():
        default = getattr(defaults, k)
        if isinstance(default, tuple) and isinstance(v, list):
            v = tuple(v)
        if not _type_ok(default, v):
            errs.append(f"{prefix}.{k} has wrong type {type(v).__name__}")
            continue
        kwargs[k] = v
    if errs:
        return None, errs
    try:
        return section_cls(**kwargs), []
    except TypeError as exc:
        return None, [f"{prefix}: {exc}"]
