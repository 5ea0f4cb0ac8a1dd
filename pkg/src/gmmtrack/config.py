"""Run configuration: nested dataclasses loaded from JSON or YAML with strict keys."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError


@dataclass
class PathsConfig:
    manifest: str | None = None
    model: str | None = None  # hand model document; package default when unset
    forests: str | None = None  # directory with layer1.forest and layer2_<viewpoint>.forest
    annotations: str | None = None
    predictions: str | None = None
    output: str = "out"


@dataclass
class WeightsConfig:
    w_p: float = 0.1
    w_t: float = 0.1
    w_s: float = 3e-7
    w_c: float = 5e-7
    w_o: float = 1.0
    lam: float = 1.003
    r_max: float = 300.0


@dataclass
class SwitchesConfig:
    e_a: bool = True
    e_s: bool = True
    e_p: bool = True
    e_t: bool = True
    e_c: bool = True
    e_o: bool = True


@dataclass
class OptimizerConfig:
    iterations: int = 10
    initial_step: float = 1.0
    release_factor: float = 1.5
    eps_cluster: float = 30.0
    threads: int = 1
    init_pose: list | None = None


@dataclass
class HsvConfig:
    hue: tuple = (90.0, 150.0)
    saturation: tuple = (0.4, 1.0)
    value: tuple = (0.2, 1.0)


@dataclass
class ObjectConfig:
    box_size: tuple = (60.0, 40.0, 30.0)
    mesh: str | None = None  # OBJ file; takes precedence over box_size
    gaussians: int = 12
    seed: int = 0


@dataclass
class SynthSettings:
    trajectory: str = "grasp"  # constant | grasp | occlusion
    length: int = 100
    noise: bool = False
    include_arm: bool = False
    width: int = 320
    height: int = 240
    fx: float = 285.0
    fy: float = 285.0


@dataclass
class ForestTrainingConfig:
    layer1_images: int = 2000
    layer2_images: int = 1000
    held_out_images: int = 100
    pixels_per_image: int = 500  # desk scale; the per-forest routine defaults to 2000
    candidate_offsets: int = 100
    thresholds: int = 40
    layer1_max_depth: int = 21
    layer2_max_depth: int = 19
    min_gain: float = 1e-4
    offset_range: float = 60.0


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    weights: WeightsConfig = field(default_factory=WeightsConfig)
    switches: SwitchesConfig = field(default_factory=SwitchesConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    hsv: HsvConfig = field(default_factory=HsvConfig)
    object: ObjectConfig = field(default_factory=ObjectConfig)
    synth: SynthSettings = field(default_factory=SynthSettings)
    forest: ForestTrainingConfig = field(default_factory=ForestTrainingConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{where}.{name}")
        elif isinstance(current, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data, "config")
    validate(cfg)
    return cfg


def validate(cfg: RunConfig):
    w = cfg.weights
    if min(w.w_p, w.w_t, w.w_s, w.w_c, w.w_o, w.r_max) < 0 or w.lam < 1:
        raise ConfigError("weights must be non-negative and lam >= 1")
    if cfg.optimizer.iterations < 1 or cfg.optimizer.threads < 1:
        raise ConfigError("iterations and threads must be positive")
    if cfg.optimizer.release_factor <= 1:
        raise ConfigError("release factor must exceed 1 for hysteresis")
    if cfg.optimizer.init_pose is not None:
        p = np.asarray(cfg.optimizer.init_pose, float)
        if p.shape != (32,) or not np.all(np.isfinite(p)):
            raise ConfigError("init_pose must hold 32 finite values")
    if cfg.synth.trajectory not in ("constant", "grasp", "occlusion"):
        raise ConfigError(f"unknown trajectory {cfg.synth.trajectory!r}")
    if cfg.synth.length < 2:
        raise ConfigError("synthetic sequences need at least two frames")


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    text = path.read_text()
    try:
        if path.suffix in (".yaml", ".yml"):
            import yaml

            data = yaml.safe_load(text) or {}
        else:
            data = json.loads(text) if text.strip() else {}
    except Exception as exc:  # parser-specific exception types
        raise ConfigError(f"{path}: cannot parse ({exc})") from None
    return config_from_dict(data)


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` overrides; values are parsed as JSON when possible."""
    data = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config section in {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return config_from_dict(data)
