"""Run configuration: every knob of the pipeline in one YAML document.

A ``RunConfig`` gathers the model dimensions, loss weights, optimizer
settings, and dataset parameters so that a training run, an evaluation,
and the inference service all read from the same file. Parsing is strict:
unknown keys are rejected with their full path so typos never silently
fall back to defaults. The dictionary form round-trips losslessly and is
echoed verbatim into checkpoints and evaluation reports.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Dict, Tuple

import yaml

from .layouts import CATEGORY_SETS
from .networks import DiscriminatorConfig, GeneratorConfig
from .objectives import LossConfig


class ConfigError(ValueError):
    """A configuration document is malformed or inconsistent."""


@dataclass(frozen=True)
class ModelSection:
    """Network dimensions shared by the generator and discriminator."""

    resolution: int = 32
    mask_size: int = 32
    categories: str = "shapes"
    d_img: int = 64
    d_e: int = 32
    d_obj: int = 32
    gen_base_channels: int = 48
    gen_stage_channels: Tuple[int, ...] = (32, 24, 16)
    disc_trunk_channels: Tuple[int, ...] = (32, 48)
    disc_head_channels: int = 64
    disc_obj_channels: int = 32
    roi_size: int = 4

    def __post_init__(self):
        if self.categories not in CATEGORY_SETS:
            raise ConfigError(f"unknown category set '{self.categories}'")


@dataclass(frozen=True)
class LossSection:
    """Adversarial trade-off and reconstruction weights."""

    lam: float = 0.1
    recon_weight: float = 1.0
    percep_weight: float = 1.0
    tau: float = 0.5


@dataclass(frozen=True)
class TrainSection:
    """Optimizer settings and loop bookkeeping."""

    batch_size: int = 8
    steps: int = 1000
    lr: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")


@dataclass(frozen=True)
class DataSection:
    """Synthetic dataset parameters and detection-noise model."""

    n_samples: int = 64
    m_min: int = 1
    m_max: int = 4
    allow_overlap: bool = True
    seed: int = 0
    jitter_sigma: float = 0.0
    drop_prob: float = 0.0
    supervised_fraction: float = 0.5

    def __post_init__(self):
        if not 1 <= self.m_min <= self.m_max:
            raise ConfigError(
                f"need 1 <= m_min <= m_max, got [{self.m_min}, {self.m_max}]")
        if not 0.0 <= self.supervised_fraction <= 1.0:
            raise ConfigError(
                f"supervised_fraction {self.supervised_fraction} "
                f"outside [0, 1]")


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)


_SECTIONS = {
    "model": ModelSection,
    "loss": LossSection,
    "train": TrainSection,
    "data": DataSection,
}

_TUPLE_FIELDS = {"gen_stage_channels", "disc_trunk_channels"}


def default_config() -> RunConfig:
    return RunConfig()


def config_to_dict(cfg: RunConfig) -> Dict[str, Any]:
    """Nested plain-type dictionary (tuples become lists) for YAML/JSON."""
    out: Dict[str, Any] = {}
    for name in _SECTIONS:
        sec = dataclasses.asdict(getattr(cfg, name))
        out[name] = {k: list(v) if isinstance(v, tuple) else v
                     for k, v in sec.items()}
    return out


def config_from_dict(doc: Any) -> RunConfig:
    """Build a RunConfig, rejecting unknown keys with their full path."""
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a mapping")
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s): {sorted(unknown)}")
    sections = {}
    for name, cls in _SECTIONS.items():
        body = doc.get(name, {})
        if body is None:
            body = {}
        if not isinstance(body, dict):
            raise ConfigError(f"{name}: expected a mapping")
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(body) - set(fields)
        if unknown:
            raise ConfigError(
                f"{name}: unknown key(s): {sorted(unknown)}")
        kwargs = {}
        for key, value in body.items():
            if key in _TUPLE_FIELDS:
                if not isinstance(value, (list, tuple)):
                    raise ConfigError(f"{name}.{key}: expected a list")
                kwargs[key] = tuple(int(v) for v in value)
            else:
                kwargs[key] = value
        try:
            sections[name] = cls(**kwargs)
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"{name}: {e}") from None
    return RunConfig(**sections)


def dump_config(cfg: RunConfig) -> str:
    """YAML text with sections and keys in declaration order."""
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config file: {e}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML in {path}: {e}") from None
    return config_from_dict(doc)


# --------------------------------------------------------------------------
# adapters to the per-module configs
# --------------------------------------------------------------------------

def generator_config(cfg: RunConfig) -> GeneratorConfig:
    m = cfg.model
    try:
        return GeneratorConfig(
            categories=CATEGORY_SETS[m.categories],
            resolution=m.resolution,
            base_channels=m.gen_base_channels,
            stage_channels=m.gen_stage_channels,
            d_img=m.d_img,
            d_e=m.d_e,
            d_obj=m.d_obj,
            mask_size=m.mask_size,
        )
    except ValueError as e:
        raise ConfigError(f"model: {e}") from None


def discriminator_config(cfg: RunConfig) -> DiscriminatorConfig:
    m = cfg.model
    try:
        return DiscriminatorConfig(
            categories=CATEGORY_SETS[m.categories],
            resolution=m.resolution,
            trunk_channels=m.disc_trunk_channels,
            head_channels=m.disc_head_channels,
            obj_channels=m.disc_obj_channels,
            roi_size=m.roi_size,
        )
    except ValueError as e:
        raise ConfigError(f"model: {e}") from None


def loss_config(cfg: RunConfig) -> LossConfig:
    l = cfg.loss
    return LossConfig(lam=l.lam, recon_weight=l.recon_weight,
                      percep_weight=l.percep_weight, tau=l.tau)
