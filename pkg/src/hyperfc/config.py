"""Run configuration files (YAML).

Layout::

    seed: 0
    out_dir: runs/example
    airframe: null            # path to an airframe file; null = bundled
    architecture: FiLM        # MLP | FiLM | FiLM+HC | LoRA(n) | LoRA(n)+HC
    ppo: {...}                # PPOConfig fields except seed
    scenario: {...}           # EnvConfig fields
    train: {checkpoint_every, eval_every, eval_episodes}
    eval: {episodes, seed, batch, deterministic}

Unknown keys anywhere are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .airframe import ConfigError, load_airframe
from .env import EnvConfig
from .nets import Architecture
from .ppo import PPOConfig, TrainSetup


@dataclass
class TrainOptions:
    checkpoint_every: int = 10
    eval_every: int = 0
    eval_episodes: int = 4


@dataclass
class EvalOptions:
    episodes: int = 1000
    seed: int = 0
    batch: int = 64
    deterministic: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    airframe: str | None = None
    architecture: str = "MLP"
    ppo: PPOConfig = field(default_factory=PPOConfig)
    scenario: EnvConfig = field(default_factory=EnvConfig)
    train: TrainOptions = field(default_factory=TrainOptions)
    eval: EvalOptions = field(default_factory=EvalOptions)

    def to_dict(self) -> dict:
        ppo = {f.name: getattr(self.ppo, f.name) for f in fields(PPOConfig) if f.name != "seed"}
        ppo["adam_betas"] = list(ppo["adam_betas"])
        return {
            "seed": self.seed, "out_dir": str(self.out_dir), "airframe": self.airframe,
            "architecture": self.architecture, "ppo": ppo, "scenario": self.scenario.to_dict(),
            "train": vars(self.train).copy(), "eval": vars(self.eval).copy(),
        }


_SECTIONS = {"ppo": PPOConfig, "scenario": EnvConfig, "train": TrainOptions,
             "eval": EvalOptions}


def _build(cls, data, section):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected a mapping")
    allowed = {f.name for f in fields(cls)} - ({"seed"} if cls is PPOConfig else set())
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"{section}: unknown keys {sorted(unknown)}")
    try:
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    top = {f.name for f in fields(RunConfig)}
    data = dict(data)
    unknown = set(data) - top
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    kw = {k: v for k, v in data.items() if k not in _SECTIONS}
    for name, cls in _SECTIONS.items():
        kw[name] = _build(cls, data.get(name), name)
    cfg = RunConfig(**kw)
    if not isinstance(cfg.seed, int):
        raise ConfigError("seed must be an integer")
    try:
        Architecture.from_tag(cfg.architecture)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    cfg.ppo.seed = cfg.seed
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    cfg = config_from_dict(data)
    if cfg.airframe is not None and not Path(cfg.airframe).is_absolute():
        cfg.airframe = str((path.parent / cfg.airframe).resolve())
    return cfg


def dump_config(cfg: RunConfig, path):
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def train_setup(cfg: RunConfig) -> TrainSetup:
    return TrainSetup(arch=Architecture.from_tag(cfg.architecture), ppo=cfg.ppo,
                      env=cfg.scenario, airframe=load_airframe(cfg.airframe),
                      out_dir=Path(cfg.out_dir), checkpoint_every=cfg.train.checkpoint_every,
                      eval_every=cfg.train.eval_every, eval_episodes=cfg.train.eval_episodes,
                      resolved_config=portable_dict(cfg))


def portable_dict(cfg: RunConfig) -> dict:
    """Config without the output location, so that checkpoints of identical
    runs written to different directories are byte-identical."""
    d = cfg.to_dict()
    del d["out_dir"]
    return d
