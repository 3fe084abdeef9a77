"""Run configuration: JSON overrides layered on a named preset, with unknown keys rejected."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass
from pathlib import Path

from ddslab.translator import FULL_SCALE_I2I

RUNS_ENV = "DDSLAB_RUNS_DIR"

T_GRID = [0.05, 0.2, 0.35, 0.5, 0.65, 0.8, 0.95]

TO_BLUE = {"name": "to-blue", "init_caption_attrs": {"shape_color": "blue"},
           "target_caption_attrs": {"shape_color": "blue"}}

DESK = {
    "preset": "desk",
    "seed": 0,
    "paths": {"artifacts_dir": "artifacts/desk", "runs_dir": "runs"},
    "data": {"canvas": [16, 16, 3], "n_train": 5000, "n_val": 256, "n_heldout": 1000},
    "denoiser": {"steps": 6000, "batch": 64, "lr": 2e-3, "warmup": 200, "p_uncond": 0.1, "t_min": 0.02,
                 "t_max": 0.98, "grad_clip": 1.0, "log_every": 250, "width": 32, "mult": [1, 2, 2]},
    "classifier": {"width": 32, "steps": 4000, "batch": 64, "lr": 2e-3, "noise_aug": 0.1, "gate": 0.98},
    "edit": {"omega": 7.5, "iters": 200, "optimizer": "sgd", "lr": None, "lr_decay": 0.9,
             "lr_decay_interval": 20, "t_range": [0.05, 0.95], "lambda_id": 0.0},
    "i2i": {"batch": 8, "total_iters": 20000, "lr": 1e-4, "lr_warmup_iters": 1000, "omega_max": 25.0,
            "omega_warmup_iters": 4000, "lambda_start": 3.0, "lambda_end": 0.1, "lambda_cool_iters": 4000,
            "tasks": [TO_BLUE], "source_caption": None, "t_range": [0.05, 0.98], "grad_clip": 1.0,
            "log_every": 50, "heldout_exclude_target": True},
    "experiments": {
        "t_grid": T_GRID,
        "sds-norm-curve": {"pairs": 100, "draws": 200, "omega": 7.5},
        "grad-cosine": {"quads": 1000, "draws": 4, "omega": 7.5, "sigma": 3.0},
        "edit-compare": {"tasks": 32, "omega": 7.5, "iters": 200, "fidelity_margin": 0.05, "min_share": 0.9,
                         "omegas": [2.0, 5.0, 7.5, 10.0, 20.0]},
        "cfg-sweep": {"tasks": 16, "omegas": [2.0, 5.0, 10.0, 20.0], "iters": 200, "level": 0.5},
        "sds-reg-sweep": {"tasks": 16, "lambdas": [0.0, 0.1, 1.0, 10.0], "omega": 7.5, "iters": 200},
        "optimizer-ablation": {"tasks": 16, "omega": 7.5, "iters": 200, "min_share": 0.75},
        "step-sweep": {"tasks": 8, "counts": [50, 100, 200, 400], "omega": 7.5, "level": 0.5},
        "i2i-ablation": {"images": 64, "task": "to-blue", "ratio": 2.0},
        "i2i-compare": {"images": 64, "task": "to-blue", "fidelity_margin": 0.05},
    },
}


def _patch(base: dict, patch: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in patch.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _patch(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


PRESETS = {
    "desk": DESK,
    # full-size settings; not tractable on one CPU core
    "paper": _patch(DESK, {
        "preset": "paper",
        "paths": {"artifacts_dir": "artifacts/paper"},
        "data": {"canvas": [32, 32, 3]},
        "denoiser": {"width": 64, "steps": 40000},
        "i2i": dict(FULL_SCALE_I2I),
        "experiments": {"grad-cosine": {"quads": 10000}},
    }),
    # tiny end-to-end settings for tests and determinism checks
    "smoke": _patch(DESK, {
        "preset": "smoke",
        "paths": {"artifacts_dir": "artifacts/smoke"},
        "data": {"canvas": [8, 8, 3], "n_train": 64, "n_val": 16, "n_heldout": 64},
        "denoiser": {"steps": 20, "batch": 8, "warmup": 5, "log_every": 5, "width": 8},
        "classifier": {"width": 8, "steps": 20, "batch": 16, "gate": 0.0},
        "edit": {"iters": 10},
        "i2i": {"batch": 2, "total_iters": 6, "lr_warmup_iters": 2, "omega_warmup_iters": 4,
                "lambda_cool_iters": 4, "log_every": 1},
        "experiments": {
            "t_grid": [0.1, 0.5, 0.9],
            "sds-norm-curve": {"pairs": 4, "draws": 3},
            "grad-cosine": {"quads": 4, "draws": 2},
            "edit-compare": {"tasks": 3, "iters": 6, "omegas": [2.0, 7.5]},
            "cfg-sweep": {"tasks": 3, "omegas": [2.0, 5.0], "iters": 6},
            "sds-reg-sweep": {"tasks": 3, "lambdas": [0.0, 1.0], "iters": 6},
            "optimizer-ablation": {"tasks": 3, "iters": 6},
            "step-sweep": {"tasks": 2, "counts": [2, 4]},
            "i2i-ablation": {"images": 8},
            "i2i-compare": {"images": 8},
        },
    }),
}


class ConfigError(ValueError):
    pass


def merge_strict(base: dict, patch: dict, path: str = "") -> dict:
    """Overlay ``patch`` on ``base``; a key absent from ``base`` is an error naming its full path."""
    out = copy.deepcopy(base)
    for k, v in patch.items():
        where = f"{path}.{k}" if path else k
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict) and base[k] and isinstance(v, dict):
            out[k] = merge_strict(base[k], v, where)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    data: dict

    @property
    def preset(self) -> str:
        return self.data["preset"]

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    def section(self, name: str) -> dict:
        return self.data[name]

    def experiment(self, name: str) -> dict:
        return self.data["experiments"][name]

    @property
    def artifacts_dir(self) -> Path:
        return Path(self.data["paths"]["artifacts_dir"])

    @property
    def runs_dir(self) -> Path:
        return Path(os.environ.get(RUNS_ENV) or self.data["paths"]["runs_dir"])

    @property
    def canvas(self) -> tuple[int, int, int]:
        return tuple(int(c) for c in self.data["data"]["canvas"])

    def to_json(self) -> dict:
        return copy.deepcopy(self.data)

    def dumps(self) -> str:
        return json.dumps(self.data, indent=1, sort_keys=True)


def build_config(overrides: dict | None = None, preset: str | None = None, seed: int | None = None) -> RunConfig:
    overrides = dict(overrides or {})
    name = preset or overrides.get("preset") or "desk"
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    merged = merge_strict(PRESETS[name], overrides)
    merged["preset"] = name
    if seed is not None:
        merged["seed"] = int(seed)
    return RunConfig(merged)


def load_config(path: str | Path | None = None, preset: str | None = None, seed: int | None = None) -> RunConfig:
    overrides = {}
    if path is not None:
        try:
            overrides = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(overrides, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
    return build_config(overrides, preset, seed)
