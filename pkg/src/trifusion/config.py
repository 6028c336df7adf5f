"""Experiment configuration: JSON schema, presets, strict parsing.

Config files are JSON with three sections plus a seed and an output
directory::

    {
      "seed": 0,
      "output_dir": "runs/exp",
      "model": {"preset": "tiny", "num_classes": 2, ...},
      "train": {"batch_size": 32, "learning_rate": 1e-4, ...},
      "data":  {"kind": "synth", "n_per_class": 32, ...}
    }

Unknown keys are rejected anywhere in the tree. The fully resolved
configuration (every default made explicit, branch configs expanded) is
dumped next to the outputs of each run, and its model section is what the
checkpoint fingerprint hashes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import LabeledDataset, ingest_directory, synth_dataset
from .densenet import DenseConfig, dense_paper, dense_tiny
from .ensemble import EnsembleModel, HeadConfig, build_ensemble
from .errors import ConfigError
from .mobile import MobileConfig, mobile_paper, mobile_tiny
from .train import TrainConfig
from .vit import VitConfig, vit_paper, vit_tiny

PRESETS = {
    "tiny": (mobile_tiny, dense_tiny, vit_tiny, 32),
    "paper": (mobile_paper, dense_paper, vit_paper, 256),
}


def _reject_unknown(d: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {where}")


@dataclass
class ModelSection:
    preset: str = "tiny"
    num_classes: int = 2
    vit_pool: str = "class_token"
    use_local_mlp: bool = False
    head_hidden: Optional[int] = None
    head_dropout: float = 0.5
    freeze_branches: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSection":
        _reject_unknown(d, {"preset", "num_classes", "vit_pool",
                            "use_local_mlp", "head_hidden", "head_dropout",
                            "freeze_branches"}, "model")
        section = cls(**d)
        if section.preset not in PRESETS:
            raise ConfigError(f"unknown preset {section.preset!r}; "
                              f"choose from {sorted(PRESETS)}")
        return section

    def branch_configs(self) -> tuple[MobileConfig, DenseConfig, VitConfig,
                                      HeadConfig]:
        make_mobile, make_dense, make_vit, default_hidden = PRESETS[self.preset]
        mobile, dense, vit = make_mobile(), make_dense(), make_vit()
        vit.pool = self.vit_pool
        vit.use_local_mlp = self.use_local_mlp
        head = HeadConfig(hidden=self.head_hidden or default_hidden,
                          dropout=self.head_dropout,
                          num_classes=self.num_classes)
        return mobile, dense, vit, head

    def resolved(self) -> dict:
        mobile, dense, vit, head = self.branch_configs()
        return {
            "preset": self.preset,
            "num_classes": self.num_classes,
            "vit_pool": self.vit_pool,
            "use_local_mlp": self.use_local_mlp,
            "freeze_branches": self.freeze_branches,
            "head": head.to_dict(),
            "mobile": mobile.to_dict(),
            "dense": dense.to_dict(),
            "vit": vit.to_dict(),
        }


def build_model(model: ModelSection, seed: int) -> EnsembleModel:
    mobile, dense, vit, head = model.branch_configs()
    return build_ensemble(mobile, dense, vit, head, seed=seed,
                          freeze_branches=model.freeze_branches)


def build_model_from_resolved(resolved: dict, seed: int = 0) -> EnsembleModel:
    """Reconstruct a model from a resolved model dict (e.g. a checkpoint)."""
    mobile = MobileConfig(
        input_size=resolved["mobile"]["input_size"],
        stem_channels=resolved["mobile"]["stem_channels"],
        stem_stride=resolved["mobile"]["stem_stride"],
        block_specs=[tuple(b) for b in resolved["mobile"]["block_specs"]],
        final_pointwise=resolved["mobile"]["final_pointwise"],
        act=resolved["mobile"]["act"])
    dense = DenseConfig(**resolved["dense"])
    vit = VitConfig(**resolved["vit"])
    head = HeadConfig(**resolved["head"])
    return build_ensemble(mobile, dense, vit, head, seed=seed,
                          freeze_branches=resolved["freeze_branches"])


@dataclass
class DataSection:
    kind: str = "synth"
    root: Optional[str] = None
    n_per_class: int = 32
    n_val_per_class: int = 4
    n_test_per_class: int = 8
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "DataSection":
        _reject_unknown(d, {"kind", "root", "n_per_class", "n_val_per_class",
                            "n_test_per_class", "seed"}, "data")
        section = cls(**d)
        if section.kind not in ("directory", "synth"):
            raise ConfigError(f"data.kind must be 'directory' or 'synth', "
                              f"got {section.kind!r}")
        if section.kind == "directory" and not section.root:
            raise ConfigError("data.kind 'directory' requires data.root")
        return section

    def to_dict(self) -> dict:
        return {"kind": self.kind, "root": self.root,
                "n_per_class": self.n_per_class,
                "n_val_per_class": self.n_val_per_class,
                "n_test_per_class": self.n_test_per_class,
                "seed": self.seed}


def load_data(data: DataSection, image_size: int
              ) -> dict[str, LabeledDataset]:
    if data.kind == "directory":
        result = ingest_directory(data.root, image_size)
        return result.splits
    seeds = np.random.SeedSequence(data.seed).spawn(3)
    return {
        "train": synth_dataset(data.n_per_class, image_size,
                               int(seeds[0].generate_state(1)[0]), "train"),
        "val": synth_dataset(data.n_val_per_class, image_size,
                             int(seeds[1].generate_state(1)[0]), "val"),
        "test": synth_dataset(data.n_test_per_class, image_size,
                              int(seeds[2].generate_state(1)[0]), "test"),
    }


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/out"
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataSection = field(default_factory=DataSection)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        _reject_unknown(d, {"seed", "output_dir", "model", "train", "data"},
                        "config")
        train_d = dict(d.get("train", {}))
        data_d = dict(d.get("data", {}))
        _reject_unknown(train_d, set(TrainConfig().to_dict()), "train")
        cfg = cls(
            seed=d.get("seed", 0),
            output_dir=d.get("output_dir", "runs/out"),
            model=ModelSection.from_dict(dict(d.get("model", {}))),
            train=TrainConfig(**train_d),
            data=DataSection.from_dict(data_d),
        )
        # one experiment seed governs everything unless overridden per section
        if "seed" not in train_d:
            cfg.train.seed = cfg.seed
        if "seed" not in data_d:
            cfg.data.seed = cfg.seed
        cfg.train.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        return cls.from_dict(raw)

    def resolved(self) -> dict:
        # train.seed mirrors the experiment seed unless set explicitly
        train = self.train.to_dict()
        return {"seed": self.seed, "output_dir": self.output_dir,
                "model": self.model.resolved(), "train": train,
                "data": self.data.to_dict()}

    @property
    def input_size(self) -> int:
        return self.model.branch_configs()[0].input_size
