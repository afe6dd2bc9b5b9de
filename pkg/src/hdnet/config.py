"""Experiment configuration: nested TOML sections mapped onto dataclasses.

Unknown keys are rejected with their dotted path so a typo in a sweep file
fails loudly instead of silently falling back to a default.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import tomli

from .geometry import BinConfig
from .losses import LossWeights
from .model import VARIANTS, ModelConfig
from .skeleton import load_skeleton
from .synth import GenConfig, config_hash


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field path."""


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-4
    batch_size: int = 16
    steps: int = 5000
    decay_factor: float = 0.8
    decay_interval: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    val_interval: int = 250
    log_interval: int = 100

    def __post_init__(self):
        if self.steps <= 0 or self.batch_size <= 0:
            raise ValueError("steps and batch_size must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.lr <= 0 or self.decay_interval <= 0 or self.val_interval <= 0:
            raise ValueError("lr, decay_interval and val_interval must be positive")


@dataclass(frozen=True)
class DataConfig:
    train_count: int = 2000
    val_count: int = 200
    test_count: int = 200
    train_seed: int = 101
    val_seed: int = 202
    test_seed: int = 303
    sigma: float = 0.75
    val_max_persons: int = 256

    def __post_init__(self):
        if min(self.train_count, self.val_count, self.test_count) < 0:
            raise ValueError("split counts must be nonnegative")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")


@dataclass(frozen=True)
class AblateConfig:
    variants: tuple[str, ...] = VARIANTS
    seeds: tuple[int, ...] = (0, 1, 2)
    steps: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "variants", tuple(self.variants))
        object.__setattr__(self, "seeds", tuple(self.seeds))
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise ValueError(f"unknown variants {bad}; choose from {VARIANTS}")
        if len(self.seeds) < 1:
            raise ValueError("need at least one seed")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    out_dir: str = "runs/experiment"
    model: ModelConfig = field(default_factory=ModelConfig)
    gen: GenConfig = field(default_factory=GenConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def to_dict(self) -> dict:
        return {
            "name": self.name, "seed": self.seed, "out_dir": self.out_dir,
            "model": self.model.to_dict(), "gen": self.gen.to_dict(),
            "loss": asdict(self.loss), "optim": asdict(self.optim), "data": asdict(self.data),
            "ablate": {"variants": list(self.ablate.variants), "seeds": list(self.ablate.seeds),
                       "steps": self.ablate.steps},
        }

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)


def _check_keys(d: dict, allowed, path: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{path or 'config'}: expected a table, got {type(d).__name__}")
    for key in d:
        if key not in allowed:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key '{where}'")


def _build(cls, d: dict, path: str, convert=None):
    names = {f.name for f in fields(cls)}
    _check_keys(d, names, path)
    d = dict(d)
    try:
        if convert:
            d = convert(d)
        return cls(**d)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from None


def _model_from(d: dict) -> ModelConfig:
    d = dict(d)
    if "bin_config" in d:
        d["bin_config"] = _build(BinConfig, d["bin_config"], "model.bin_config")
    if "pyramid_strides" in d:
        d["pyramid_strides"] = tuple(d["pyramid_strides"])
    return _build(ModelConfig, d, "model")


def _gen_from(d: dict, base: Path | None) -> GenConfig:
    d = dict(d)
    _check_keys(d, {f.name for f in fields(GenConfig)}, "gen")
    if "skeleton" in d:
        sk = d["skeleton"]
        if not isinstance(sk, str):
            raise ConfigError("gen.skeleton: expected a path to a skeleton TOML file")
        p = Path(sk)
        if base is not None and not p.is_absolute():
            p = base / p
        try:
            d["skeleton"] = load_skeleton(p)
        except (OSError, ValueError) as e:
            raise ConfigError(f"gen.skeleton: {e}") from None
    for key in ("num_persons", "depth_range", "focal_range"):
        if key in d:
            d[key] = tuple(d[key])
    if "bones" in d:
        d["bones"] = {k: tuple(v) for k, v in d["bones"].items()}
    return _build(GenConfig, d, "gen")


def config_from_dict(d: dict, base: Path | None = None) -> ExperimentConfig:
    names = {f.name for f in fields(ExperimentConfig)}
    _check_keys(d, names, "")
    kw = {k: d[k] for k in ("name", "seed", "out_dir") if k in d}
    if "model" in d:
        kw["model"] = _model_from(d["model"])
    if "gen" in d:
        kw["gen"] = _gen_from(d["gen"], base)
    for key, cls in (("loss", LossWeights), ("optim", OptimConfig), ("data", DataConfig),
                     ("ablate", AblateConfig)):
        if key in d:
            kw[key] = _build(cls, d[key], key)
    try:
        cfg = ExperimentConfig(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    if cfg.gen.skeleton.num_joints != cfg.model.num_joints:
        raise ConfigError(f"model.num_joints: {cfg.model.num_joints} but gen.skeleton has "
                          f"{cfg.gen.skeleton.num_joints} joints")
    try:
        cfg.gen.check_bins(cfg.model.bin_config)
    except ValueError as e:
        raise ConfigError(f"gen.depth_range: {e}") from None
    return cfg


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _parse(text: str, where: str) -> dict:
    try:
        return tomli.loads(text)
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"{where}: {e}") from None


def _desk_raw() -> dict:
    return _parse(resources.files("hdnet.configs").joinpath("desk.toml").read_text(), "desk.toml")


def load_config(path: str | Path | None = None) -> ExperimentConfig:
    """Read a TOML experiment file layered over the packaged desk-scale config.

    A file only needs the keys it changes; None loads the desk config itself.
    """
    raw = _desk_raw()
    base = None
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {p}: {e}") from None
        base = p.parent
        raw = _merge(raw, _parse(text, str(p)))
    return config_from_dict(raw, base)


def default_config() -> ExperimentConfig:
    return load_config(None)


__all__ = ["ConfigError", "OptimConfig", "DataConfig", "AblateConfig", "ExperimentConfig",
           "config_from_dict", "load_config", "default_config"]
