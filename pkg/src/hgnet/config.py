"""Run configuration: nested dataclasses loaded from flat TOML key/value text.

Both ``[train]\\nlr = 1e-4`` tables and dotted ``train.lr = 1e-4`` lines are
accepted. ``HGNET_SEED`` in the environment overrides ``train.seed``.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli

from .model import ModelConfig
from .scenegen import SceneConfig

SEED_ENV = "HGNET_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class GridSection:
    size: int = 64          # H = W
    resolution: float = 0.5


@dataclass
class HorizonSection:
    history: int = 5        # T_h
    horizon: int = 4        # T


@dataclass
class ModelSection:
    dim: int = 64
    heads: int = 0          # 0 -> dim // 32
    sigma_off: float = 1.0
    window: int = 4
    gru_layers: int = 2
    cov_dim: int = 32
    map_points: int = 8


@dataclass
class TrainSection:
    batch: int = 4
    epochs: int = 16
    lr: float = 1e-4
    lr_decay_every: int = 2
    lr_decay_factor: float = 0.5
    dropout: float = 0.1
    seed: int = 0
    grad_clip: float = 1.0
    val_fraction: float = 0.1


@dataclass
class AblationSection:
    fgat_enabled: bool = True
    memory_enabled: bool = True


@dataclass
class SceneSection:
    num_agents: int = 12
    min_agents: int = 6
    dt: float = 0.5
    map_segments: int = 16
    seed: int = 0           # first scene seed for `generate`


@dataclass
class PathSection:
    dataset: str = "data"
    checkpoints: str = "runs"
    reports: str = "reports"


@dataclass
class RunConfig:
    grid: GridSection = field(default_factory=GridSection)
    horizons: HorizonSection = field(default_factory=HorizonSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    ablations: AblationSection = field(default_factory=AblationSection)
    scene: SceneSection = field(default_factory=SceneSection)
    paths: PathSection = field(default_factory=PathSection)

    def validate(self):
        if self.grid.size <= 0 or self.grid.size % 16:
            raise ConfigError(f"grid.size must be a positive multiple of 16, got {self.grid.size}")
        if self.horizons.horizon < 1:
            raise ConfigError("horizons.horizon must be >= 1")
        if self.horizons.history < 2:
            raise ConfigError("horizons.history must be >= 2")
        if self.model.dim <= 0 or self.model.dim % 4:
            raise ConfigError("model.dim must be a positive multiple of 4")
        if self.model.heads < 0 or (self.model.heads and self.model.dim % self.model.heads):
            raise ConfigError("model.heads must divide model.dim")
        if self.train.batch < 1 or self.train.epochs < 1:
            raise ConfigError("train.batch and train.epochs must be >= 1")
        if not 0 <= self.train.val_fraction < 1:
            raise ConfigError("train.val_fraction must be in [0, 1)")
        return self

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(
            grid=self.grid.size, history=self.horizons.history, horizon=self.horizons.horizon,
            map_points=m.map_points, dim=m.dim, heads=m.heads, sigma_off=m.sigma_off, window=m.window,
            gru_layers=m.gru_layers, cov_dim=m.cov_dim, dropout=self.train.dropout,
            fgat_enabled=self.ablations.fgat_enabled, memory_enabled=self.ablations.memory_enabled,
        )

    def scene_config(self) -> SceneConfig:
        s = self.scene
        return SceneConfig(
            num_agents=s.num_agents, min_agents=s.min_agents, grid_size=self.grid.size,
            resolution=self.grid.resolution, history=self.horizons.history, horizon=self.horizons.horizon,
            dt=s.dt, map_segments=s.map_segments, segment_points=self.model.map_points,
        )

    def to_dict(self):
        return asdict(self)

    def to_text(self) -> str:
        """Flat ``section.key = value`` text that load_config reads back."""
        lines = []
        for section, values in self.to_dict().items():
            for key, val in values.items():
                lines.append(f"{section}.{key} = {json.dumps(val)}")
        return "\n".join(lines) + "\n"


def config_from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    for section, values in data.items():
        if not hasattr(cfg, section):
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"{section!r} must be a table of keys")
        target = getattr(cfg, section)
        known = {f.name: f for f in fields(target)}
        for key, val in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {section}.{key}")
            default = getattr(target, key)
            if isinstance(default, bool):
                if not isinstance(val, bool):
                    raise ConfigError(f"{section}.{key} must be true/false")
            elif isinstance(default, int):
                if isinstance(val, bool) or not isinstance(val, int):
                    raise ConfigError(f"{section}.{key} must be an integer")
            elif isinstance(default, float):
                if isinstance(val, bool) or not isinstance(val, (int, float)):
                    raise ConfigError(f"{section}.{key} must be a number")
                val = float(val)
            elif isinstance(default, str) and not isinstance(val, str):
                raise ConfigError(f"{section}.{key} must be a string")
            setattr(target, key, val)
    return cfg


def apply_env(cfg: RunConfig, environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    if environ.get(SEED_ENV):
        try:
            cfg.train.seed = int(environ[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    return cfg


def parse_config(text: str, environ=None) -> RunConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"bad config syntax: {exc}") from exc
    return apply_env(config_from_dict(data), environ).validate()


def load_config(path=None, environ=None) -> RunConfig:
    """Read a config file (or defaults when path is None)."""
    if path is None:
        return apply_env(RunConfig(), environ).validate()
    return parse_config(Path(path).read_text(), environ)
