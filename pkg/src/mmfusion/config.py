"""Experiment configuration: JSON documents over a defaults layer.

Unknown keys are rejected at every level so that a misspelt
hyperparameter fails loudly instead of silently using its default.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any, Optional

import torch

from .backbone import BackboneConfig, ConfigError
from .data.synthetic import SyntheticConfig
from .evaluation import ExperimentSpec, PairingScheme, TrainConfig, TrainScheme
from .fusion import ExchangeConfig, FusionStrategy

# Values from the published training setup; the rest are local choices.
DEFAULTS: dict[str, Any] = {
    "tasks": [2],
    "strategies": [s.value for s in FusionStrategy],
    "train_schemes": [s.value for s in TrainScheme],
    "test_schemes": [s.value for s in PairingScheme],
    "data": {"manifest": None, "synthetic": None},
    "hyperparameters": {
        "lr": 0.005,
        "epochs": 120,
        "batch_size": 16,
        "weight_decay": 0.0001,
        "bn_momentum": 0.05,
        "l1_lambda": 0.005,
        "bn_threshold": 0.02,
        "dropout": 0.2,
        "block_channels": [16, 32, 64, 128],
        "head_hidden": 64,
        "plateau_factor": 0.1,
        "plateau_patience": 10,
        "min_lr": 1e-6,
        "augment": True,
        "derangement": True,
        "test_repeats": 5,
        "folds": 5,
    },
    "attribution": {"task": 2, "strategy": "late", "train_scheme": "correct", "fold": 0,
                    "steps": 64, "signal_class": None, "precision": "float64"},
    "seed": 0,
    "output_dir": None,
}


PRECISIONS = {"float32": torch.float32, "float64": torch.float64}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key != "data":
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        elif key == "data":
            if not isinstance(value, dict) or set(value) - {"manifest", "synthetic"}:
                raise ConfigError("'data' accepts only 'manifest' or 'synthetic'")
            out[key] = {"manifest": None, "synthetic": None, **value}
        else:
            out[key] = value
    return out


class ExperimentConfig:
    def __init__(self, doc: dict, base_dir: Optional[Path] = None):
        self.doc = _merge(DEFAULTS, doc)
        self.base_dir = Path(base_dir) if base_dir else Path.cwd()
        self.validate()

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError("experiment config must be a JSON object")
        return cls(doc, path.parent)

    def __getitem__(self, key):
        return self.doc[key]

    @property
    def hp(self) -> dict:
        return self.doc["hyperparameters"]

    @property
    def seed(self) -> int:
        return int(self.doc["seed"])

    def with_seed(self, seed: Optional[int]) -> "ExperimentConfig":
        if seed is None:
            return self
        doc = copy.deepcopy(self.doc)
        doc["seed"] = int(seed)
        return ExperimentConfig(doc, self.base_dir)

    def validate(self) -> None:
        d = self.doc
        for t in d["tasks"]:
            if t not in (2, 3):
                raise ConfigError(f"tasks must be 2 and/or 3, got {t}")
        try:
            [FusionStrategy(s) for s in d["strategies"]]
            [TrainScheme(s) for s in d["train_schemes"]]
            [PairingScheme(s) for s in d["test_schemes"]]
            FusionStrategy(d["attribution"]["strategy"])
            TrainScheme(d["attribution"]["train_scheme"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if d["attribution"]["precision"] not in PRECISIONS:
            raise ConfigError(f"attribution.precision must be one of {sorted(PRECISIONS)}")
        data = d["data"]
        if (data["manifest"] is None) == (data["synthetic"] is None):
            raise ConfigError("data needs exactly one of 'manifest' or 'synthetic'")
        if data["manifest"] is not None and not self.manifest_path.is_file():
            raise ConfigError(f"manifest not found: {self.manifest_path}")
        if data["synthetic"] is not None:
            self.synthetic_config()
        hp = self.hp
        if hp["folds"] < 1 or hp["epochs"] < 1 or hp["batch_size"] < 1 or hp["test_repeats"] < 1:
            raise ConfigError("folds, epochs, batch_size and test_repeats must be positive")
        spec = self.spec()
        BackboneConfig(**spec.backbone)
        ExchangeConfig(**spec.exchange)

    @property
    def manifest_path(self) -> Path:
        return (self.base_dir / self.doc["data"]["manifest"]).resolve()

    def synthetic_config(self) -> SyntheticConfig:
        return SyntheticConfig.from_dict(self.doc["data"]["synthetic"])

    def train_config(self) -> TrainConfig:
        hp = self.hp
        return TrainConfig(
            lr=hp["lr"], epochs=hp["epochs"], batch_size=hp["batch_size"], weight_decay=hp["weight_decay"],
            plateau_factor=hp["plateau_factor"], plateau_patience=hp["plateau_patience"],
            min_lr=hp["min_lr"], augment=hp["augment"], derangement=hp["derangement"],
        )

    def spec(self) -> ExperimentSpec:
        hp = self.hp
        return ExperimentSpec(
            tasks=list(self.doc["tasks"]),
            strategies=list(self.doc["strategies"]),
            train_schemes=list(self.doc["train_schemes"]),
            test_schemes=list(self.doc["test_schemes"]),
            backbone={"block_channels": hp["block_channels"], "dropout": hp["dropout"],
                      "head_hidden": hp["head_hidden"], "bn_momentum": hp["bn_momentum"]},
            exchange={"l1_lambda": hp["l1_lambda"], "bn_threshold": hp["bn_threshold"]},
            train=self.train_config(),
            test_repeats=hp["test_repeats"],
            seed=self.seed,
        )

    @property
    def attribution_dtype(self) -> torch.dtype:
        return PRECISIONS[self.doc["attribution"]["precision"]]

    def dumps(self) -> str:
        return json.dumps(self.doc, indent=1, sort_keys=True) + "\n"
