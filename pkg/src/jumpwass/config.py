"""Experiment configuration: presets, dotted overrides, validation, manifests.

A configuration is a plain JSON-compatible dict so that it can be hashed,
written next to every run and fed back in unchanged.
"""
from __future__ import annotations

import copy
import hashlib
import itertools
import json
import platform
from dataclasses import fields
from pathlib import Path
from typing import Any

import numpy as np
import scipy

from .losses import LOSS_KINDS
from .process import ZOO, InitialLaw, make_model
from .reconstruction import Experiment, TrainConfig

TOP_LEVEL_KEYS = {"model", "model_params", "initial", "train", "data_seed", "output", "format",
                  "repeats", "sweep", "diagnose"}
FORMATS = ("binary", "csv")


class ConfigError(ValueError):
    pass


def _nets(names, layers, width):
    return {n: {"hidden_layers": layers, "width": width} for n in names}


ALL_NETS = ("drift", "diffusion", "jump")

PRESETS: dict[str, dict[str, Any]] = {
    "example1": {
        "model": "example1",
        "model_params": {"b": 4.0, "a": -1.0, "sigma0": 0.4, "y0": 1.0},
        "initial": {"mean": [2.0], "std": 0.0},
        "train": {"lr": 0.002, "weight_decay": 0.005, "epochs": 1000, "n_traj": 100,
                  "dt": 0.2, "N": 101, "nets": _nets(ALL_NETS, 2, 150),
                  "init": "fan_uniform", "prior": "none"},
        "repeats": 10,
    },
    "example2": {
        "model": "example2",
        "model_params": {"form_sigma": "langevin", "form_beta": "langevin",
                         "sigma0": 0.1, "beta0": 0.1, "r0": 0.05},
        "initial": {"mean": [1.0], "std": 0.0},
        "train": {"lr": 0.003, "weight_decay": 0.02, "epochs": 500, "n_traj": 400,
                  "dt": 0.1, "N": 51, "nets": _nets(ALL_NETS, 2, 150),
                  "init": "fan_uniform", "prior": "none"},
        "repeats": 5,
    },
    "example3": {
        "model": "example3",
        "model_params": {"c1": -0.5, "c2": -0.5, "sigma0": 0.1, "beta0": 0.1},
        "initial": {"mean": [1.7, 1.1], "std": 0.0},
        "train": {"lr": 0.002, "weight_decay": 0.005, "epochs": 400, "n_traj": 300,
                  "dt": 0.2, "N": 51, "nets": _nets(("diffusion", "jump"), 3, 400),
                  "init": "gaussian", "init_var": 1e-4, "prior": "drift_given"},
        "repeats": 5,
    },
}

DESK_EPOCH_FACTOR = 10
DESK_TRAJ_FACTOR = 5


def _desk(name: str) -> dict:
    cfg = copy.deepcopy(PRESETS[name])
    cfg["train"]["epochs"] //= DESK_EPOCH_FACTOR
    cfg["train"]["n_traj"] //= DESK_TRAJ_FACTOR
    return cfg


for _name in list(PRESETS):
    PRESETS[f"{_name}-desk"] = _desk(_name)


def preset(name: str) -> dict:
    try:
        return copy.deepcopy(PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; known: {sorted(PRESETS)}") from None


# -- dotted paths ---------------------------------------------------------------

def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_path(cfg: dict, path: str, value: Any) -> None:
    keys = path.split(".")
    node = cfg
    for k in keys[:-1]:
        nxt = node.setdefault(k, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"cannot set {path!r}: {k!r} is not a section")
        node = nxt
    node[keys[-1]] = value


def get_path(cfg: dict, path: str) -> Any:
    node = cfg
    for k in path.split("."):
        node = node[k]
    return node


def apply_overrides(cfg: dict, overrides: list[tuple[str, Any]]) -> dict:
    out = copy.deepcopy(cfg)
    for path, value in overrides:
        set_path(out, path, value)
    return out


def parse_override_args(tokens: list[str]) -> list[tuple[str, Any]]:
    """``['--train.lr', '0.01', '--train.epochs=3']`` -> ``[(path, value), ...]``."""
    out, i = [], 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) <= 2:
            raise ConfigError(f"unexpected argument {tok!r}")
        body = tok[2:]
        if "=" in body:
            path, raw = body.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"flag {tok!r} needs a value")
            path, raw = body, tokens[i + 1]
            i += 2
        out.append((path, parse_value(raw)))
    return out


# -- validation -------------------------------------------------------------------

def _train_config(train: dict) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(train) - known
    if unknown:
        raise ConfigError(f"unknown train fields {sorted(unknown)}")
    try:
        return TrainConfig(**train)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid train section: {exc}") from exc


def build_experiment(cfg: dict) -> Experiment:
    """Validate ``cfg`` against the model zoo and loss registry; no compute."""
    unknown = set(cfg) - TOP_LEVEL_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    if cfg.get("model") not in ZOO:
        raise ConfigError(f"unknown model {cfg.get('model')!r}; known: {sorted(ZOO)}")
    try:
        truth = make_model(cfg["model"], **cfg.get("model_params", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model parameters: {exc}") from exc
    train = _train_config(dict(cfg.get("train", {})))
    if train.loss not in LOSS_KINDS:
        raise ConfigError(f"unknown loss {train.loss!r}")
    init = cfg.get("initial", {})
    try:
        law = InitialLaw(tuple(init.get("mean", [0.0] * truth.d)), float(init.get("std", 0.0)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid initial law: {exc}") from exc
    if law.d != truth.d:
        raise ConfigError(f"initial mean has dimension {law.d}, model has d={truth.d}")
    if cfg.get("format", "binary") not in FORMATS:
        raise ConfigError(f"format must be one of {FORMATS}")
    return Experiment(cfg["model"], dict(cfg.get("model_params", {})), law, train,
                      int(cfg.get("data_seed", 0)))


def sweep_cells(cfg: dict) -> tuple[list[tuple[dict, Experiment]], int]:
    """Cartesian product of the ``sweep.grid`` axes applied to the base config."""
    spec = cfg.get("sweep") or {}
    grid = spec.get("grid") or {}
    if not isinstance(grid, dict):
        raise ConfigError("sweep.grid must map dotted paths to value lists")
    base = {k: v for k, v in cfg.items() if k != "sweep"}
    axes = sorted(grid)
    for a in axes:
        if not isinstance(grid[a], list) or not grid[a]:
            raise ConfigError(f"sweep axis {a!r} needs a non-empty list")
    cells = []
    for combo in itertools.product(*(grid[a] for a in axes)):
        label = dict(zip(axes, combo))
        cells.append((label, build_experiment(apply_overrides(base, list(label.items())))))
    repeats = int(spec.get("repeats", cfg.get("repeats", 1)))
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    return cells, repeats


# -- manifests ----------------------------------------------------------------------

def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def versions() -> dict:
    from importlib.metadata import PackageNotFoundError, version

    try:
        pkg = version("artifact")
    except PackageNotFoundError:
        pkg = "unknown"
    return {"python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "artifact": pkg}


def write_manifest(outdir: Path, command: str, cfg: dict, seeds: dict, files: list[Path],
                   wall_clock: float) -> Path:
    outdir = Path(outdir)
    manifest = {
        "command": command,
        "config_hash": config_hash(cfg),
        "config": cfg,
        "seeds": seeds,
        "files": [{"name": str(Path(f).relative_to(outdir)), "sha256": _sha256(Path(f)),
                   "bytes": Path(f).stat().st_size} for f in files],
        "versions": versions(),
        "wall_clock_s": wall_clock,
    }
    path = outdir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
