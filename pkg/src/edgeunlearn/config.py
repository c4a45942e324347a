"""Experiment configuration: a JSON file with the sections below. Relative
paths are resolved against the directory holding the config file.

    {
      "dataset":  {"kind": "blobs", "classes": 5, "dims": 16, "per_class": 200,
                   "distance": 5.0, "noise": 1.0, "layout": "simplex", "seed": 0},
                  or {"kind": "image_blobs", "classes": 5, "shape": [1, 8, 8], ...}
                  or {"kind": "npz", "path": "data.npz", "seed": 0}
      "model":    {"kind": "mlp", "hidden": [128, 128, 64, 64], "seed": 0}
                  or {"kind": "tinycnn", "channels": [4, 8], "hidden": 32, "seed": 0}
      "train":    {"epochs": 50, "lr": 0.05, "batch_size": 32, "seed": 0}
      "unlearn":  {"forget_class": 0, "N": 64, "alpha": 10, "lambda": 1, "tau": 0.2,
                   "checkpoints": "all" | "default" | [1, 3, ...],
                   "fisher_group": null, "b_r": 2.0, "c_m": null}
      "pipeline": null or path to a JSON PipelineConfig
      "output_dir": "out"
    }

Every section and key is optional; missing keys take the defaults shown.
``EDGEUNLEARN_OUTPUT_DIR`` overrides ``output_dir`` and nothing else.
"""
from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

OUTPUT_ENV = "EDGEUNLEARN_OUTPUT_DIR"

DEFAULTS = {
    "dataset": {"kind": "blobs", "classes": 5, "dims": 16, "per_class": 200, "distance": 5.0,
                "noise": 1.0, "layout": "simplex", "seed": 0, "test_fraction": 0.2},
    "model": {"kind": "mlp", "hidden": [128, 128, 64, 64], "seed": 0},
    "train": {"epochs": 50, "lr": 0.05, "batch_size": 32, "seed": 0},
    "unlearn": {"forget_class": 0, "N": 64, "alpha": 10.0, "lambda": 1.0, "tau": 0.2,
                "checkpoints": "all", "fisher_group": None, "b_r": 2.0, "c_m": None},
    "pipeline": None,
    "output_dir": "out",
}

_SECTION_KEYS = {
    "dataset": {"kind", "classes", "dims", "per_class", "distance", "noise", "layout", "seed",
                "test_fraction", "shape", "separation", "path"},
    "model": {"kind", "hidden", "channels", "seed"},
    "train": {"epochs", "lr", "batch_size", "seed"},
    "unlearn": {"forget_class", "N", "alpha", "lambda", "tau", "checkpoints", "fisher_group", "b_r", "c_m"},
}


class ConfigFileError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    dataset: dict
    model: dict
    train: dict
    unlearn: dict
    pipeline: Path | None = None
    output_dir: Path = Path("out")
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path | str = ".") -> "ExperimentConfig":
        base = Path(base_dir).resolve()
        unknown = set(raw) - set(DEFAULTS)
        if unknown:
            raise ConfigFileError(f"unknown config sections {sorted(unknown)}")
        merged = copy.deepcopy(DEFAULTS)
        for sec, keys in _SECTION_KEYS.items():
            given = raw.get(sec) or {}
            if not isinstance(given, dict):
                raise ConfigFileError(f"section {sec!r} must be an object")
            bad = set(given) - keys
            if bad:
                raise ConfigFileError(f"unknown keys in {sec!r}: {sorted(bad)}")
            merged[sec].update(given)
        pipe = raw.get("pipeline")
        out = os.environ.get(OUTPUT_ENV) or raw.get("output_dir", DEFAULTS["output_dir"])
        if merged["dataset"]["kind"] == "npz":
            if "path" not in merged["dataset"]:
                raise ConfigFileError("npz dataset needs a path")
            merged["dataset"]["path"] = str(base / merged["dataset"]["path"])
        cfg = cls(merged["dataset"], merged["model"], merged["train"], merged["unlearn"],
                  None if pipe is None else (base / pipe).resolve(), (base / out).resolve(), base)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigFileError(f"{path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigFileError(f"{path}: top level must be an object")
        return cls.from_dict(raw, path.parent)

    def validate(self) -> None:
        for sec in ("dataset", "model", "train"):
            if not isinstance(getattr(self, sec).get("seed"), int):
                raise ConfigFileError(f"{sec}.seed must be an integer")
        if self.dataset["kind"] not in ("blobs", "image_blobs", "npz"):
            raise ConfigFileError(f"unknown dataset kind {self.dataset['kind']!r}")
        if self.model["kind"] not in ("mlp", "tinycnn"):
            raise ConfigFileError(f"unknown model kind {self.model['kind']!r}")
        fc = self.unlearn["forget_class"]
        if not isinstance(fc, int) or fc < 0:
            raise ConfigFileError("unlearn.forget_class must be a non-negative integer")
        if self.dataset["kind"] != "npz" and fc >= self.dataset["classes"]:
            raise ConfigFileError(f"forget_class {fc} >= class count {self.dataset['classes']}")
        cps = self.unlearn["checkpoints"]
        if not (cps in ("all", "default") or isinstance(cps, list)):
            raise ConfigFileError("unlearn.checkpoints must be 'all', 'default' or a list of layer indices")
        if int(self.train["epochs"]) < 0:
            raise ConfigFileError("train.epochs must be >= 0")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Copy with every seed set to ``seed`` and the forget class rotated by it."""
        out = copy.deepcopy(self)
        for sec in (out.dataset, out.model, out.train):
            sec["seed"] = seed
        classes = out.dataset.get("classes")
        if classes:
            out.unlearn["forget_class"] = (self.unlearn["forget_class"] + seed) % classes
        return out

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "model": self.model,
            "train": self.train,
            "unlearn": self.unlearn,
            "pipeline": None if self.pipeline is None else str(self.pipeline),
            "output_dir": str(self.output_dir),
        }
