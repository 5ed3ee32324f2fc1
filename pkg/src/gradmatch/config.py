"""Experiment configuration: a JSON file with nested sections.

Every field has a default; unknown keys and invalid values are collected and
reported together. ``resolve`` returns the fully materialized config, which is
written next to every run's outputs.

Sections::

    dataset  name ("blobs" | "mnist" | "idx"), root, file paths, limits, blob parameters
    model    arch, hidden, width, depth
    condense CondenseConfig fields (theta_policy as "fixed:N" | "schedule" | "overfit:CAP")
    eval     TrainConfig fields plus runs, num_sets, base_seed, test_limit_per_class
    output   dir, trace
    ablate   axis ("mode" | "distance" | "theta_policy"), values
    xarch    sources, targets
"""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path

from .condenser import MODES, CondenseConfig, ThetaPolicy
from .matching import DistanceSpec
from .models import ARCHS

DEFAULTS: dict = {
    "dataset": {
        "name": "blobs",
        "root": None,
        "train_images": None,
        "train_labels": None,
        "test_images": None,
        "test_labels": None,
        "limit_per_class": None,
        "num_classes": 10,
        "blobs": {
            "num_classes": 2,
            "per_class": 500,
            "dim": 2,
            "separation": 4.0,
            "seed": 0,
            "test_per_class": 5000,
            "test_seed": 1000,
        },
    },
    "model": {"arch": "logistic", "hidden": 128, "width": 32, "depth": 3},
    "condense": {
        "ipc": 1,
        "outer_iters": 100,
        "inner_iters": 1,
        "syn_steps": 1,
        "theta_policy": "fixed:1",
        "lr_syn": 0.1,
        "lr_theta": 0.01,
        "momentum_syn": 0.0,
        "momentum_theta": 0.0,
        "lam": None,
        "mode": "multi_level",
        "distance": "d1+d2",
        "real_batch_per_class": 64,
        "val_batch_size": 256,
        "init": "noise",
        "seed": 0,
    },
    "eval": {
        "epochs": 300,
        "batch_size": 256,
        "lr": 0.01,
        "decay_epochs": [150],
        "decay": 0.1,
        "momentum": 0.9,
        "weight_decay": 5e-4,
        "runs": 10,
        "num_sets": 2,
        "base_seed": 0,
        "test_limit_per_class": None,
    },
    "output": {"dir": "runs/default", "trace": False},
    "ablate": {"axis": "mode", "values": list(MODES)},
    "xarch": {"sources": ["mlp", "convnet_lite"], "targets": ["mlp", "convnet_lite", "lenet_lite"]},
}


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(errors))
        self.errors = errors


def _merge(defaults: dict, given: dict, prefix: str, errors: list[str]) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        path = f"{prefix}{key}"
        if key not in defaults:
            errors.append(f"unknown key '{path}'")
        elif isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                errors.append(f"'{path}' must be a section")
            else:
                out[key] = _merge(defaults[key], value, path + ".", errors)
        else:
            out[key] = value
    return out


def resolve(raw: dict | None = None, check_paths: bool = True) -> dict:
    """Merge ``raw`` over the defaults and validate; raises ConfigError."""
    errors: list[str] = []
    cfg = _merge(DEFAULTS, raw or {}, "", errors)
    ds, cond, ev = cfg["dataset"], cfg["condense"], cfg["eval"]

    if ds["name"] not in ("blobs", "mnist", "idx"):
        errors.append("dataset.name must be 'blobs', 'mnist' or 'idx'")
    if ds["name"] == "mnist" and ds["root"] is None:
        env = os.environ.get("GRADMATCH_DATA_DIR")
        if env:
            ds["root"] = env
        else:
            errors.append("dataset.root is unset and GRADMATCH_DATA_DIR is not defined")
    if check_paths:
        if ds["name"] == "mnist" and ds["root"] is not None and not Path(ds["root"]).is_dir():
            errors.append(f"dataset.root '{ds['root']}' does not exist")
        if ds["name"] == "idx":
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                if ds[key] is None or not Path(ds[key]).exists():
                    errors.append(f"dataset.{key} '{ds[key]}' does not exist")
    for sect, keys in (("model", ("arch",)), ("xarch", ("sources", "targets"))):
        for key in keys:
            vals = cfg[sect][key] if isinstance(cfg[sect][key], list) else [cfg[sect][key]]
            for v in vals:
                if v not in ARCHS:
                    errors.append(f"{sect}.{key}: unknown arch {v!r}")
    try:
        CondenseConfig(**cond)
    except (TypeError, ValueError) as exc:
        errors.append(f"condense: {exc}")
    if ev["runs"] < 1 or ev["num_sets"] < 1:
        errors.append("eval.runs and eval.num_sets must be >= 1")
    if ev["epochs"] < 1 or ev["batch_size"] < 1:
        errors.append("eval.epochs and eval.batch_size must be >= 1")

    ab = cfg["ablate"]
    if ab["axis"] not in ("mode", "distance", "theta_policy"):
        errors.append("ablate.axis must be 'mode', 'distance' or 'theta_policy'")
    elif not ab["values"]:
        errors.append("ablate.values is empty")
    else:
        for v in ab["values"]:
            try:
                if ab["axis"] == "mode" and v not in MODES:
                    raise ValueError(f"unknown mode {v!r}")
                if ab["axis"] == "distance":
                    DistanceSpec.parse(v)
                if ab["axis"] == "theta_policy":
                    ThetaPolicy.parse(v)
            except ValueError as exc:
                errors.append(f"ablate.values: {exc}")
    if errors:
        raise ConfigError(errors)
    return cfg


def load(path, overrides: dict | None = None, check_paths: bool = True) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: {exc}"]) from exc
    if not isinstance(raw, dict):
        raise ConfigError([f"{path}: top level must be an object"])
    for dotted, value in (overrides or {}).items():
        node = raw
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return resolve(raw, check_paths)


def dump(cfg: dict, path) -> None:
    Path(path).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
