"""Experiment configuration: one JSON document, strictly parsed.

Unknown keys anywhere in the document are rejected. Command-line flags
override file values; every run writes its fully-resolved configuration next
to its outputs so results are reproducible from the artifact alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .model import NetSpec
from .training import TrainConfig


class ConfigError(ValueError):
    """Configuration file or overrides are invalid."""


@dataclass
class ExperimentConfig:
    seed: int
    out_dir: str
    dataset: dict
    net: NetSpec
    train: TrainConfig

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "dataset": self.dataset,
            "net": self.net.to_dict(),
            "train": self.train.to_dict(),
        }

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        extra = set(d) - {"seed", "out_dir", "dataset", "net", "train"}
        if extra:
            raise ConfigError(f"unknown top-level config keys: {sorted(extra)}")
        for key in ("dataset", "net", "train"):
            if key not in d:
                raise ConfigError(f"config is missing the {key!r} section")
        try:
            net = NetSpec.from_dict(d["net"])
            train = TrainConfig.from_dict(d["train"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return ExperimentConfig(
            seed=int(d.get("seed", 0)),
            out_dir=str(d.get("out_dir", "runs/out")),
            dataset=dict(d["dataset"]),
            net=net,
            train=train,
        )


def default_config_dict() -> dict:
    """The dataset-free desk-scale default: a small CNN on synthetic digits.

    Noise level, learning rates, and epoch counts come from a recorded sweep:
    they are chosen so W4A8 post-training quantization measurably degrades
    accuracy and one selective fine-tuning epoch recovers most of it, stably
    across seeds.
    """
    return {
        "seed": 0,
        "out_dir": "runs/default",
        "dataset": {
            "kind": "synthetic",
            "classes": 10,
            "shape": [1, 12, 12],
            "noise": 1.6,
            "train_size": 4096,
            "eval_size": 4096,
            "seed": 0,
        },
        "net": {
            "input_shape": [1, 12, 12],
            "bits_w": 4,
            "bits_a": 8,
            "layers": [
                {"kind": "conv", "out_channels": 8, "kernel": 3, "stride": 1,
                 "padding": 1, "quantize": True},
                {"kind": "normalize"},
                {"kind": "relu"},
                {"kind": "pool", "kernel": 2, "stride": 2},
                {"kind": "conv", "out_channels": 16, "kernel": 3, "stride": 1,
                 "padding": 1, "quantize": True},
                {"kind": "normalize"},
                {"kind": "relu"},
                {"kind": "pool", "kernel": 2, "stride": 2},
                {"kind": "flatten"},
                {"kind": "linear", "out_features": 64, "quantize": True},
                {"kind": "relu"},
                {"kind": "linear", "out_features": 10, "quantize": True},
            ],
        },
        "train": {
            **TrainConfig().to_dict(),
            "lr": 0.003,
            "qparam_lr": 1e-3,
            "fp_epochs": 16,
        },
    }


def load_config(path: str | Path | None, overrides: dict | None = None) -> ExperimentConfig:
    """Load a config file (or the built-in default) and apply flag overrides."""
    if path is None:
        raw = default_config_dict()
    else:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key in ("seed", "out_dir"):
            raw[key] = value
        elif key in ("bits_w", "bits_a"):
            raw.setdefault("net", {})[key] = value
        else:
            raw.setdefault("train", {})[key] = value
    cfg = ExperimentConfig.from_dict(raw)
    if "seed" not in cfg.dataset:
        cfg.dataset["seed"] = 0
    return cfg


def write_resolved(cfg: ExperimentConfig, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    target = out / "config.resolved.json"
    target.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return target
