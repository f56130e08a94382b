"""Run configuration: YAML in, validated dataclasses out.

Defaults reproduce the reference training recipe (threshold 0.5, prior
variance 0.025, init rate 0.01, learning rate 1e-4, ten finetune epochs
with the rate halved every three).  Validation collects every problem
before raising, and the fully-resolved configuration can be dumped back to
canonical YAML, whose hash ties checkpoints to the settings that produced
them.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .model import ARCHITECTURES, Architecture, build_architecture
from .pruner import PruneSchedule, layerwise_schedule

_AUGMENTATIONS = ("none", "pad_crop_flip", "resize_crop_flip")


class ConfigError(ValueError):
    """One or more configuration problems; message lists all of them."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n" +
                         "\n".join(f"  - {e}" for e in self.errors))


@dataclass
class DatasetConfig:
    name: str = "mnist"
    root: str = "data/mnist"
    batch_size: int = 64
    seed: int = 0
    augmentation: str = "none"
    synthesize: bool = False  # write the synthetic digit corpus if files are absent
    synth_train: int = 8000
    synth_test: int = 2000
    synth_seed: int = 0  # corpus seed, independent of the run seed
    limit_train: int = 0  # optional cap on training examples (0 = all)


@dataclass
class ModelConfig:
    architecture: str = "mnist_cnn"
    options: dict = field(default_factory=dict)


@dataclass
class RbpConfig:
    mode: str = "rbp"  # rbp (layer-wise) | rrbp (block-parallel, residual nets)
    scope: object = None  # null = all sites; int = producer prefix; list = consumers
    trigger_epochs: int | None = None  # default 3 for rbp, 7 for rrbp
    threshold: float = 0.5
    prior_variance: float = 0.025
    init_rate: float = 0.01
    lr: float = 1e-4


@dataclass
class PretrainConfig:
    epochs: int = 5
    lr: float = 1e-3
    optimizer: str = "adam"  # adam | sgd
    momentum: float = 0.9


@dataclass
class FinetuneConfig:
    epochs: int = 10
    lr: float = 1e-4
    decay: float = 0.5
    decay_every: int = 3
    momentum: float = 0.9


@dataclass
class MetricsConfig:
    flops_convention: str = "flop"


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    rbp: RbpConfig = field(default_factory=RbpConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def trigger_epochs(self) -> int:
        if self.rbp.trigger_epochs is not None:
            return self.rbp.trigger_epochs
        return 7 if self.rbp.mode == "rrbp" else 3


_SECTIONS = {"dataset": DatasetConfig, "model": ModelConfig, "rbp": RbpConfig,
             "pretrain": PretrainConfig, "finetune": FinetuneConfig,
             "metrics": MetricsConfig}


def config_from_dict(raw: dict) -> RunConfig:
    errors: list[str] = []
    sections = {}
    raw = dict(raw or {})
    for key in raw:
        if key not in _SECTIONS:
            errors.append(f"unknown section {key!r}")
    for name, cls in _SECTIONS.items():
        body = raw.get(name, {}) or {}
        if not isinstance(body, dict):
            errors.append(f"section {name!r} must be a mapping")
            body = {}
        known = {f for f in cls.__dataclass_fields__}
        for key in body:
            if key not in known:
                errors.append(f"{name}.{key}: unknown option")
        sections[name] = cls(**{k: v for k, v in body.items() if k in known})
    if errors:
        raise ConfigError(errors)
    cfg = RunConfig(**sections)
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    """Check every constraint; reports all violations, not just the first."""
    errors: list[str] = []
    d, m, r, p, f, mt = cfg.dataset, cfg.model, cfg.rbp, cfg.pretrain, cfg.finetune, \
        cfg.metrics
    if d.name not in ("mnist", "cifar10"):
        errors.append(f"dataset.name: unknown dataset {d.name!r}")
    if d.batch_size < 1:
        errors.append(f"dataset.batch_size: must be >= 1, got {d.batch_size}")
    if d.augmentation not in _AUGMENTATIONS:
        errors.append(f"dataset.augmentation: {d.augmentation!r} not in "
                      f"{_AUGMENTATIONS}")
    if d.limit_train < 0:
        errors.append(f"dataset.limit_train: must be >= 0, got {d.limit_train}")
    if m.architecture not in ARCHITECTURES:
        errors.append(f"model.architecture: unknown {m.architecture!r}; choices "
                      f"{sorted(ARCHITECTURES)}")
    if r.mode not in ("rbp", "rrbp"):
        errors.append(f"rbp.mode: must be rbp or rrbp, got {r.mode!r}")
    if not 0.1 <= r.threshold <= 0.9:
        errors.append(f"rbp.threshold: must lie in [0.1, 0.9], got {r.threshold}")
    if not 0 < r.prior_variance < 0.25:
        errors.append(f"rbp.prior_variance: must lie in (0, 0.25), got "
                      f"{r.prior_variance}")
    if not 0 < r.init_rate < 1:
        errors.append(f"rbp.init_rate: must lie in (0, 1), got {r.init_rate}")
    if r.trigger_epochs is not None and r.trigger_epochs < 1:
        errors.append(f"rbp.trigger_epochs: must be >= 1, got {r.trigger_epochs}")
    if r.lr <= 0:
        errors.append(f"rbp.lr: must be positive, got {r.lr}")
    if p.epochs < 0:
        errors.append(f"pretrain.epochs: must be >= 0, got {p.epochs}")
    if p.optimizer not in ("adam", "sgd"):
        errors.append(f"pretrain.optimizer: must be adam or sgd, got {p.optimizer!r}")
    if f.epochs < 0:
        errors.append(f"finetune.epochs: must be >= 0, got {f.epochs}")
    if f.decay_every < 1:
        errors.append(f"finetune.decay_every: must be >= 1, got {f.decay_every}")
    if not 0 < f.decay <= 1:
        errors.append(f"finetune.decay: must lie in (0, 1], got {f.decay}")
    if mt.flops_convention not in ("flop", "mac"):
        errors.append(f"metrics.flops_convention: must be flop or mac, got "
                      f"{mt.flops_convention!r}")
    if errors:
        raise ConfigError(errors)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"config file {path} does not exist"])
    raw = yaml.safe_load(path.read_text())
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError([f"config file {path} must contain a mapping"])
    return config_from_dict(raw)


def resolved_dict(cfg: RunConfig) -> dict:
    out = asdict(cfg)
    out["rbp"]["trigger_epochs"] = cfg.trigger_epochs()
    return out


def resolved_yaml(cfg: RunConfig) -> str:
    return yaml.safe_dump(resolved_dict(cfg), sort_keys=True,
                          default_flow_style=False)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(resolved_yaml(cfg).encode("utf-8")).hexdigest()


def architecture_from(cfg: RunConfig) -> Architecture:
    return build_architecture(cfg.model.architecture, cfg.model.options)


def schedule_from(cfg: RunConfig, arch: Architecture) -> PruneSchedule:
    common = dict(threshold=cfg.rbp.threshold, init_rate=cfg.rbp.init_rate,
                  prior_variance=cfg.rbp.prior_variance, lr=cfg.rbp.lr,
                  batch_size=cfg.dataset.batch_size,
                  augmentation=cfg.dataset.augmentation,
                  finetune_epochs=cfg.finetune.epochs, finetune_lr=cfg.finetune.lr,
                  finetune_decay=cfg.finetune.decay,
                  finetune_decay_every=cfg.finetune.decay_every,
                  finetune_momentum=cfg.finetune.momentum)
    if cfg.rbp.mode == "rrbp":
        from .resnet import rrbp_schedule
        return rrbp_schedule(arch, trigger_epochs=cfg.trigger_epochs(), **common)
    scope = cfg.rbp.scope
    if isinstance(scope, list):
        scope = [str(s) for s in scope]
    return layerwise_schedule(arch, scope, trigger_epochs=cfg.trigger_epochs(),
                              **common)
