"""Run configuration: one YAML tree whose sections mirror the module configs.

Every key maps onto a dataclass field and every default is that dataclass's
default. Unknown keys are collected and rejected together. Seeds are not set
per section: the top-level ``seed`` drives scene generation, training and
diffusion.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .anomaly import DetectorConfig
from .encoder import EncoderConfig
from .errors import ConfigurationError
from .generator import DiffusionConfig
from .scenegen import SceneConfig
from .training import REGIMES, TrainConfig

CONDITIONING = ("relational", "independent")
PATH_ENV = {
    "dataset_dir": "LANEREP_DATASET_DIR",
    "checkpoint_dir": "LANEREP_CHECKPOINT_DIR",
    "eval_dir": "LANEREP_EVAL_DIR",
    "report_dir": "LANEREP_REPORT_DIR",
}


@dataclass(frozen=True)
class PathsConfig:
    # relative paths resolve against the run root
    dataset_dir: str = "dataset"
    checkpoint_dir: str = "checkpoints"
    eval_dir: str = "eval"
    report_dir: str = "report"


@dataclass(frozen=True)
class EvalConfig:
    query_windows: tuple[int, ...] = (10, 11)
    reference_windows: tuple[int, ...] = tuple(range(8))
    window_sweep: tuple[int, ...] = (60, 300, 600, 900)
    generation_conditioning: str = "relational"
    regimes: tuple[str, ...] = ("joint", "contrastive_only", "two_stage_frozen", "geometry_only", "trajectory_only")

    def validate(self):
        if self.generation_conditioning not in CONDITIONING:
            raise ConfigurationError(f"generation_conditioning must be one of {CONDITIONING}")
        bad = [r for r in self.regimes if r not in REGIMES or r == "traj_stats_baseline"]
        if bad:
            raise ConfigurationError(f"unknown trainable regimes {bad}")
        if "joint" not in self.regimes:
            raise ConfigurationError("regimes must include joint")
        if not self.window_sweep or min(self.window_sweep) < 1:
            raise ConfigurationError("window_sweep needs positive frame counts")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self):
        self.scene.validate()
        self.encoder.validate()
        self.train.validate()
        self.detector.validate()
        self.diffusion.validate()
        self.eval.validate()
        if self.train.epochs < 4:
            raise ConfigurationError("train.epochs must be >= 4 so every loss phase runs")


# sections whose seed comes from the top level
_SEEDED = (SceneConfig, EncoderConfig, TrainConfig, DiffusionConfig)


def _build(cls, data, where: str, errors: list[str]):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        errors.append(f"{where}: expected a mapping")
        return cls()
    kwargs = {}
    names = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        f = names.get(key)
        if f is None or (key == "seed" and cls in _SEEDED):
            errors.append(f"{where}.{key}: unknown key")
            continue
        default = getattr(cls(), key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, f"{where}.{key}", errors)
        elif isinstance(default, tuple):
            kwargs[key] = tuple(value) if isinstance(value, (list, tuple)) else value
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        errors.append(f"{where}: {e}")
        return cls()


def from_dict(data: dict | None) -> RunConfig:
    errors: list[str] = []
    cfg = _build(RunConfig, data or {}, "config", errors)
    if errors:
        raise ConfigurationError("; ".join(errors))
    seed = int(cfg.seed)
    cfg = dataclasses.replace(
        cfg,
        scene=dataclasses.replace(cfg.scene, seed=seed),
        encoder=dataclasses.replace(cfg.encoder, seed=seed),
        train=dataclasses.replace(cfg.train, seed=seed),
        diffusion=dataclasses.replace(cfg.diffusion, seed=seed),
    )
    try:
        cfg.validate()
    except (TypeError, ValueError) as e:
        raise ConfigurationError(str(e)) from e
    return cfg


def load(path=None, overrides: dict | None = None) -> RunConfig:
    """Parse a YAML run config; ``None`` gives the defaults."""
    data = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigurationError(f"config file not found: {p}")
        try:
            data = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as e:
            raise ConfigurationError(f"cannot parse {p}: {e}") from e
    for dotted, value in (overrides or {}).items():
        node = data
        *head, last = dotted.split(".")
        for k in head:
            node = node.setdefault(k, {})
        node[last] = value
    return from_dict(data)


def resolve_paths(cfg: RunConfig, root=None) -> dict[str, Path]:
    """Section paths with environment overrides, relative to ``root``."""
    base = Path(root) if root is not None else Path.cwd()
    out = {}
    for name in PATH_ENV:
        raw = os.environ.get(PATH_ENV[name]) or getattr(cfg.paths, name)
        p = Path(raw)
        out[name] = p if p.is_absolute() else base / p
    return out


def _plain(x):
    if dataclasses.is_dataclass(x):
        skip = {"seed"} if type(x) in _SEEDED else set()
        return {f.name: _plain(getattr(x, f.name)) for f in dataclasses.fields(x) if f.name not in skip}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def to_dict(cfg: RunConfig) -> dict:
    return _plain(cfg)


def dump(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)

