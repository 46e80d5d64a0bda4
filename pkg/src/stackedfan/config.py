"""Run configuration: one JSON document holding model, training and augmentation settings."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .augment import AugmentConfig
from .heatmap import GaussianSpec
from .nn import ConfigError, DepthNetConfig, FanConfig
from .training import TrainConfig, depth_train_defaults

SECTIONS = ("seed", "model", "train", "augment", "gaussian", "depth_model", "depth_train")


@dataclass
class RunConfig:
    model: FanConfig = field(default_factory=FanConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    gaussian: GaussianSpec = field(default_factory=GaussianSpec)
    depth_model: DepthNetConfig = field(default_factory=DepthNetConfig)
    depth_train: TrainConfig = field(default_factory=depth_train_defaults)
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = sorted(set(d) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
        try:
            model = FanConfig.from_dict(d.get("model", {}))
            depth = d.get("depth_model", {"n_landmarks": model.m_landmarks})
            depth_train = depth_train_defaults().to_dict()
            depth_train.update(d.get("depth_train", {}))
            return cls(
                model=model,
                train=TrainConfig.from_dict(d.get("train", {})),
                augment=AugmentConfig.from_dict(d.get("augment", {})),
                gaussian=GaussianSpec(**d.get("gaussian", {})),
                depth_model=DepthNetConfig.from_dict(depth),
                depth_train=TrainConfig.from_dict(depth_train),
                seed=int(d.get("seed", 0)),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "augment": self.augment.to_dict(),
            "gaussian": {
                "sigma": self.gaussian.sigma,
                "truncation_radius": self.gaussian.truncation_radius,
                "peak": self.gaussian.peak,
            },
            "depth_model": self.depth_model.to_dict(),
            "depth_train": self.depth_train.to_dict(),
        }


def builtin_configs() -> list[str]:
    root = resources.files("stackedfan") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_run_config(ref: str | os.PathLike) -> RunConfig:
    """Load a built-in config by name (``full``, ``overfit``) or a JSON file by path."""
    name = str(ref)
    if name in builtin_configs():
        text = (resources.files("stackedfan") / "configs" / f"{name}.json").read_text()
    else:
        path = Path(ref)
        if not path.is_file():
            raise ConfigError(f"config {name!r} is neither a built-in ({', '.join(builtin_configs())}) nor a file")
        text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {name}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {name}: top level must be an object")
    return RunConfig.from_dict(data)
