"""Experiment recipes: condense, evaluate, ablate, cross-architecture."""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path


from . import checkpoint
from . import config as config_mod
from .condenser import CondenseConfig, condense, count_theta_updates
from .coreset import herding_coreset, random_coreset
from .data import Dataset, find_idx_pair, gaussian_blobs, load_idx
from .evaluation import EvalReport, TrainConfig, append_csv_row, evaluate_sets
from .models import ModelSpec

log = logging.getLogger(__name__)

ABLATION_FIELDS = ("axis", "value", "set", "run", "accuracy", "theta_updates", "final_loss")
XARCH_FIELDS = ("source", "target", "runs", "mean", "std")


def build_data(cfg: dict) -> tuple[Dataset, Dataset]:
    ds = cfg["dataset"]
    ev = cfg["eval"]
    if ds["name"] == "blobs":
        b = ds["blobs"]
        train = gaussian_blobs(b["num_classes"], b["per_class"], b["dim"], b["separation"], b["seed"])
        test = gaussian_blobs(b["num_classes"], b["test_per_class"], b["dim"], b["separation"],
                              b["test_seed"])
        return train, test
    if ds["name"] == "mnist":
        tr_img, tr_lab = find_idx_pair(ds["root"], "train")
        te_img, te_lab = find_idx_pair(ds["root"], "test")
    else:
        tr_img, tr_lab = ds["train_images"], ds["train_labels"]
        te_img, te_lab = ds["test_images"], ds["test_labels"]
    train = load_idx(tr_img, tr_lab, ds["limit_per_class"], num_classes=ds["num_classes"],
                     name=ds["name"])
    test = load_idx(te_img, te_lab, ev["test_limit_per_class"], stats=(train.mean, train.std),
                    num_classes=ds["num_classes"], name=ds["name"])
    return train, test


def model_spec(cfg: dict, train: Dataset, arch: str | None = None) -> ModelSpec:
    m = cfg["model"]
    return ModelSpec(arch or m["arch"], train.sample_shape, train.num_classes,
                     hidden=m["hidden"], width=m["width"], depth=m["depth"])


def condense_config(cfg: dict, **overrides) -> CondenseConfig:
    return CondenseConfig(**{**cfg["condense"], **overrides})


def train_config(cfg: dict) -> TrainConfig:
    ev = cfg["eval"]
    return TrainConfig(epochs=ev["epochs"], batch_size=ev["batch_size"], lr=ev["lr"],
                       decay_epochs=tuple(ev["decay_epochs"]), decay=ev["decay"],
                       momentum=ev["momentum"], weight_decay=ev["weight_decay"],
                       seed=ev["base_seed"])


def _condense_job(args):
    cfg, index, set_dir, arch, trace, overrides = args
    train, _ = build_data(cfg)
    spec = model_spec(cfg, train, arch)
    ccfg = condense_config(cfg, **overrides)
    ccfg = replace(ccfg, seed=ccfg.seed + index)
    set_dir = Path(set_dir)
    set_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    syn, tr = condense(train, ccfg, spec, trace_path=set_dir / "trace.jsonl" if trace else None)
    checkpoint.save(syn, set_dir / "synthetic.dcset")
    if syn.images.ndim == 4:
        checkpoint.write_pgm_grid(train.denormalize(syn.images), syn.num_classes, syn.ipc,
                                  set_dir / "images.pgm")
    return {
        "set": index,
        "seed": ccfg.seed,
        "checkpoint": str(set_dir / "synthetic.dcset"),
        "final_loss": tr.records[-1].loss,
        "theta_updates": tr.total_theta_steps(),
        "wall_time_s": time.perf_counter() - start,
    }


def _map(fn, jobs_args, jobs: int):
    if jobs <= 1 or len(jobs_args) <= 1:
        return [fn(a) for a in jobs_args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, jobs_args))


def run_condense(cfg: dict, out_dir, jobs: int = 1, trace: bool | None = None,
                 arch: str | None = None, overrides: dict | None = None) -> dict:
    """Condense ``eval.num_sets`` synthetic sets with consecutive seeds."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config_mod.dump(cfg, out / "resolved_config.json")
    trace = cfg["output"]["trace"] if trace is None else trace
    args = [(cfg, i, str(out / f"set_{i}"), arch, trace, overrides or {})
            for i in range(cfg["eval"]["num_sets"])]
    sets = _map(_condense_job, args, jobs)
    metrics = {"status": "ok", "sets": sets}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    return metrics


def select_training_sets(cfg: dict, train: Dataset, source: str, num_sets: int):
    """Small training sets for evaluation: checkpoints, a coreset method, or the whole set."""
    ipc = cfg["condense"]["ipc"]
    seed = cfg["condense"]["seed"]
    if source == "whole":
        return [(train.images, train.labels)]
    if source == "random":
        return [random_coreset(train, ipc, seed + i).subset(train) for i in range(num_sets)]
    if source.startswith("herding"):
        feats = "model_embedding" if source.endswith("embedding") else "pixel"
        spec = model_spec(cfg, train) if feats == "model_embedding" else None
        return [herding_coreset(train, ipc, feats, spec, seed).subset(train)]
    raise ValueError(f"unknown coreset method {source!r}")


def run_eval(cfg: dict, out_dir, checkpoints=(), coreset: str | None = None) -> EvalReport:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config_mod.dump(cfg, out / "resolved_config.json")
    train, test = build_data(cfg)
    spec = model_spec(cfg, train)
    if checkpoints:
        sets = []
        for path in checkpoints:
            syn = checkpoint.load(path)
            if tuple(syn.images.shape[1:]) != spec.input_shape or syn.num_classes != spec.num_classes:
                raise ValueError(
                    f"checkpoint {path} holds {syn.images.shape[1:]} x {syn.num_classes} classes, "
                    f"model expects {spec.input_shape} x {spec.num_classes}"
                )
            sets.append((syn.images, syn.labels))
        method = "condensed"
    else:
        method = coreset or "random"
        sets = select_training_sets(cfg, train, method, cfg["eval"]["num_sets"])
    start = time.perf_counter()
    report = evaluate_sets(spec, sets, (test.images, test.labels), cfg["eval"]["runs"],
                           cfg["eval"]["base_seed"], train_config(cfg), cfg["model"]["arch"])
    wall = time.perf_counter() - start
    (out / "report.json").write_text(report.to_json() + "\n")
    append_csv_row(out / "results.csv", {
        "dataset": cfg["dataset"]["name"], "ipc": cfg["condense"]["ipc"], "method": method,
        "mode": cfg["condense"]["mode"], "distance": cfg["condense"]["distance"],
        "mean": f"{report.mean:.6f}", "std": f"{report.std:.6f}", "runs": report.runs,
        "wall_time_s": f"{wall:.2f}",
    })
    return report


def run_ablate(cfg: dict, out_dir, jobs: int = 1) -> list[dict]:
    """Condense + evaluate once per sweep value, with shared seeds."""
    axis, values = cfg["ablate"]["axis"], cfg["ablate"]["values"]
    if not values:
        raise config_mod.ConfigError(["ablate.values is empty"])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config_mod.dump(cfg, out / "resolved_config.json")
    train, test = build_data(cfg)
    spec = model_spec(cfg, train)
    tcfg = train_config(cfg)
    rows = []
    for value in values:
        point_dir = out / f"{axis}={value}".replace("/", "_").replace(":", "_")
        metrics = run_condense(cfg, point_dir, jobs, overrides={axis: value})
        ccfg = condense_config(cfg, **{axis: value})
        try:
            updates = count_theta_updates(ccfg.inner_iters, ccfg.theta_policy)
        except ValueError:
            updates = None
        for s in metrics["sets"]:
            syn = checkpoint.load(s["checkpoint"])
            rep = evaluate_sets(spec, [(syn.images, syn.labels)], (test.images, test.labels),
                                cfg["eval"]["runs"], cfg["eval"]["base_seed"], tcfg)
            for r, acc in enumerate(rep.accuracies):
                rows.append({
                    "axis": axis, "value": value, "set": s["set"], "run": r,
                    "accuracy": f"{acc:.6f}",
                    "theta_updates": updates if updates is not None else s["theta_updates"],
                    "final_loss": f"{s['final_loss']:.6f}",
                })
    with (out / "ablation.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    return rows


def run_xarch(cfg: dict, out_dir, jobs: int = 1) -> dict[tuple[str, str], EvalReport]:
    from .evaluation import cross_arch_matrix

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config_mod.dump(cfg, out / "resolved_config.json")
    train, test = build_data(cfg)
    sets_by_source = {}
    for src in cfg["xarch"]["sources"]:
        metrics = run_condense(cfg, out / f"source_{src}", jobs, arch=src)
        sets_by_source[src] = [
            (syn.images, syn.labels)
            for syn in (checkpoint.load(s["checkpoint"]) for s in metrics["sets"])
        ]
    targets = [model_spec(cfg, train, a) for a in cfg["xarch"]["targets"]]
    matrix = cross_arch_matrix(sets_by_source, targets, (test.images, test.labels),
                               cfg["eval"]["runs"], cfg["eval"]["base_seed"], train_config(cfg))
    with (out / "xarch.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=XARCH_FIELDS)
        writer.writeheader()
        for (src, tgt), rep in matrix.items():
            writer.writerow({"source": src, "target": tgt, "runs": rep.runs,
                             "mean": f"{rep.mean:.6f}", "std": f"{rep.std:.6f}"})
    return matrix
