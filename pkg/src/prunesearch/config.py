"""Experiment configuration: JSON file in, fully-resolved defaults out.

Unknown keys and out-of-range values are rejected by name. The resolved
config is echoed into the run directory so an output directory fully
describes its run. The config hash excludes ``seed`` and ``output_dir``:
runs differing only in those are the same experiment (a re-seeded repeat,
or the same experiment relocated), so artifacts like a pretrained teacher
stay reusable across seeds.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

from .supernet import LayerSpec, SuperNetSpec, candidate_widths

DEFAULT_RATIOS = [0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
OUTPUT_ROOT_ENV = "PRUNESEARCH_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    # synthetic
    classes: int = 4
    samples: int = 2000
    image_size: int = 16
    channels: int = 3
    noise: float = 0.25
    test_samples: int = 400
    # cifar10
    dir: str = ""
    subset_size: int = 5000
    test_subset_size: int = 0  # 0 = full test set


@dataclass
class StageConfig:
    widths: list[int] = field(default_factory=lambda: [16])
    stride: int = 1  # first layer of the stage


@dataclass
class ModelConfig:
    stages: list[StageConfig] = field(
        default_factory=lambda: [StageConfig(widths=[16, 16, 16])])
    kernel: int = 3


@dataclass
class SearchConfig:
    candidate_ratios: list[float] = field(default_factory=lambda: list(DEFAULT_RATIOS))
    samples_per_layer: int = 2
    lambda_cost: float = 2.0
    flop_target_ratio: float = 0.5
    flop_target: float = 0.0  # absolute FLOPs; overrides the ratio when > 0
    toleration: float = 0.05
    tau_start: float = 10.0
    tau_end: float = 0.1
    epochs: int = 50
    batch_size: int = 64
    val_fraction: float = 0.5
    weight_lr: float = 0.1
    weight_lr_min: float = 0.0
    weight_momentum: float = 0.9
    weight_decay: float = 0.0005
    arch_lr: float = 0.001
    arch_weight_decay: float = 0.001
    arch_beta1: float = 0.9
    arch_beta2: float = 0.999
    axes: str = "both"  # width | depth | both


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.1
    lr_min: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 0.0005


@dataclass
class KDConfig:
    temperature: float = 4.0
    mix: float = 0.9


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    kd: KDConfig = field(default_factory=KDConfig)
    seed: int = 0
    output_dir: str = "run"


def _fill(cls, raw: dict, path: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError(f"unknown key '{path}{key}'")
        if key == "stages":
            if not isinstance(value, list) or not value:
                raise ConfigError(f"'{path}{key}' must be a non-empty list")
            if not all(isinstance(s, dict) for s in value):
                raise ConfigError(f"'{path}{key}' entries must be objects")
            kwargs[key] = [_fill(StageConfig, s, f"{path}stages[{i}].")
                           for i, s in enumerate(value)]
        elif dataclasses.is_dataclass(_DATACLASS_BY_KEY.get(key)) and isinstance(value, dict):
            kwargs[key] = _fill(_DATACLASS_BY_KEY[key], value, f"{path}{key}.")
        elif isinstance(value, dict):
            raise ConfigError(f"'{path}{key}' does not take a table")
        else:
            kwargs[key] = value
    return cls(**kwargs)


_DATACLASS_BY_KEY = {
    "dataset": DatasetConfig,
    "model": ModelConfig,
    "search": SearchConfig,
    "train": TrainConfig,
    "kd": KDConfig,
}


def _check(cond: bool, key: str, message: str) -> None:
    if not cond:
        raise ConfigError(f"'{key}': {message}")


def validate(cfg: ExperimentConfig) -> None:
    ds, se, tr, kd = cfg.dataset, cfg.search, cfg.train, cfg.kd
    _check(ds.kind in ("synthetic", "cifar10"), "dataset.kind",
           f"must be 'synthetic' or 'cifar10', got {ds.kind!r}")
    if ds.kind == "synthetic":
        _check(ds.classes >= 2, "dataset.classes", "need at least 2 classes")
        _check(ds.samples >= 2 * ds.classes, "dataset.samples", "too few samples")
        _check(ds.image_size >= 4, "dataset.image_size", "too small")
        _check(ds.noise >= 0, "dataset.noise", "must be non-negative")
    else:
        _check(bool(ds.dir), "dataset.dir", "required for cifar10")
        _check(ds.subset_size >= 20, "dataset.subset_size", "too small")
    for i, stage in enumerate(cfg.model.stages):
        _check(bool(stage.widths), f"model.stages[{i}].widths", "must be non-empty")
        _check(all(w >= 2 for w in stage.widths), f"model.stages[{i}].widths",
               "widths must be at least 2")
        _check(stage.stride >= 1, f"model.stages[{i}].stride", "must be >= 1")
    _check(cfg.model.kernel >= 1 and cfg.model.kernel % 2 == 1, "model.kernel",
           "must be odd and positive")
    _check(bool(se.candidate_ratios), "search.candidate_ratios", "must be non-empty")
    _check(all(0 < r <= 1 for r in se.candidate_ratios), "search.candidate_ratios",
           "ratios must lie in (0, 1]")
    _check(se.samples_per_layer >= 1, "search.samples_per_layer", "must be >= 1")
    _check(se.lambda_cost >= 0, "search.lambda_cost", "must be non-negative")
    _check(0 <= se.toleration <= 1, "search.toleration", "must lie in [0, 1]")
    _check(se.flop_target > 0 or 0 < se.flop_target_ratio <= 1,
           "search.flop_target_ratio", "must lie in (0, 1] unless flop_target is set")
    _check(se.tau_start > 0 and se.tau_end > 0, "search.tau_start", "temperatures must be > 0")
    _check(se.epochs >= 1, "search.epochs", "must be >= 1")
    _check(se.batch_size >= 2, "search.batch_size", "must be >= 2")
    _check(0 < se.val_fraction < 1, "search.val_fraction", "must lie in (0, 1)")
    _check(se.weight_lr > 0 and se.arch_lr > 0, "search.weight_lr", "learning rates must be > 0")
    _check(se.axes in ("width", "depth", "both"), "search.axes",
           "must be 'width', 'depth' or 'both'")
    _check(tr.epochs >= 1, "train.epochs", "must be >= 1")
    _check(tr.batch_size >= 2, "train.batch_size", "must be >= 2")
    _check(tr.lr > 0, "train.lr", "must be > 0")
    _check(kd.temperature > 0, "kd.temperature", "must be > 0")
    _check(0 <= kd.mix <= 1, "kd.mix", "must lie in [0, 1]")


def load_config(path: str) -> ExperimentConfig:
    """Parse, default-fill and validate a JSON config file."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})")
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    cfg = _fill(ExperimentConfig, raw, "")
    validate(cfg)
    return cfg


def to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(cfg: ExperimentConfig) -> str:
    resolved = to_dict(cfg)
    resolved.pop("seed")
    resolved.pop("output_dir")
    canon = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def resolve_output_dir(cfg: ExperimentConfig) -> str:
    root = os.environ.get(OUTPUT_ROOT_ENV, "")
    out = cfg.output_dir
    if root and not os.path.isabs(out):
        out = os.path.join(root, out)
    return out


def echo_config(cfg: ExperimentConfig, directory: str) -> str:
    """Write the fully-resolved config (every default made explicit)."""
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, "config.resolved.json")
    with open(path, "w") as fh:
        json.dump(to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def build_supernet_spec(cfg: ExperimentConfig, in_channels: int, image_size: int,
                        num_classes: int) -> SuperNetSpec:
    """Instantiate the supernet layout with candidate widths per layer."""
    stages = []
    for stage in cfg.model.stages:
        layers = []
        for i, w in enumerate(stage.widths):
            cands = candidate_widths(w, cfg.search.candidate_ratios)
            if len(cands) < 2:
                raise ConfigError(
                    f"layer width {w} gives a single candidate {cands}; widen the layer "
                    f"or the ratio set")
            layers.append(LayerSpec(c_out=w, kernel=cfg.model.kernel,
                                    stride=stage.stride if i == 0 else 1,
                                    candidates=cands))
        stages.append(layers)
    return SuperNetSpec(in_channels=in_channels, image_size=image_size,
                        num_classes=num_classes, stages=stages)
