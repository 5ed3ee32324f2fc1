"""Train target networks from scratch on a small set and measure test accuracy."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import models
from .autodiff import Tensor
from .condenser import SGD
from .models import ModelSpec, ParamSet

CSV_FIELDS = ("dataset", "ipc", "method", "mode", "distance", "mean", "std", "runs", "wall_time_s")


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int | None = None, run: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.run = run


class MatrixError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 256
    lr: float = 0.01
    decay_epochs: tuple[int, ...] = (150,)
    decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.decay ** sum(1 for e in self.decay_epochs if epoch >= e)


def train_from_scratch(spec: ModelSpec, images: np.ndarray, labels: np.ndarray,
                       cfg: TrainConfig) -> ParamSet:
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("empty training set")
    params = models.init_params(spec, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    bs = min(cfg.batch_size, len(images))
    opt = SGD(cfg.lr, cfg.momentum)
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        order = rng.permutation(len(images))
        for start in range(0, len(images), bs):
            idx = order[start:start + bs]
            try:
                loss = models.loss(spec, params, Tensor(images[idx]), labels[idx])
                grads = ad.grad(loss, params.tensors())
            except ad.NonFiniteError as exc:
                raise TrainingError(f"training diverged in epoch {epoch}: {exc}", epoch) from exc
            arrays = params.arrays()
            g = [gr.data + cfg.weight_decay * a for gr, a in zip(grads, arrays)]
            params = params.with_tensors(opt.step(arrays, g))
    return params


def accuracy(spec: ModelSpec, params: ParamSet, images: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy; argmax ties go to the lowest class index."""
    if len(labels) == 0:
        return 0.0
    return float(np.mean(models.predict(spec, params, images) == np.asarray(labels)))


@dataclass
class EvalReport:
    accuracies: list[float]
    mean: float
    std: float
    runs: int
    source_arch: str = ""
    target_arch: str = ""
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_runs(cls, accuracies: Sequence[float], source_arch: str = "",
                  target_arch: str = "") -> "EvalReport":
        accs = [float(a) for a in accuracies]
        if not accs:
            raise ValueError("no runs to aggregate")
        mean = math.fsum(accs) / len(accs)
        std = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
        return cls(accs, mean, std, len(accs), source_arch, target_arch)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def repeat_eval(spec: ModelSpec, train: tuple[np.ndarray, np.ndarray],
                test: tuple[np.ndarray, np.ndarray], runs: int, base_seed: int = 0,
                cfg: TrainConfig | None = None, source_arch: str = "") -> EvalReport:
    if runs < 1:
        raise ValueError("runs must be >= 1")
    cfg = cfg or TrainConfig()
    accs = []
    for r in range(runs):
        run_cfg = replace(cfg, seed=base_seed + r)
        try:
            params = train_from_scratch(spec, train[0], train[1], run_cfg)
        except TrainingError as exc:
            exc.run = r
            raise
        accs.append(accuracy(spec, params, test[0], test[1]))
    return EvalReport.from_runs(accs, source_arch, spec.arch)


def evaluate_sets(spec: ModelSpec, sets: Sequence[tuple[np.ndarray, np.ndarray]],
                  test: tuple[np.ndarray, np.ndarray], runs: int, base_seed: int = 0,
                  cfg: TrainConfig | None = None, source_arch: str = "") -> EvalReport:
    """repeat_eval on each of several small sets, pooled into one report."""
    accs: list[float] = []
    for i, s in enumerate(sets):
        rep = repeat_eval(spec, s, test, runs, base_seed + i * runs, cfg, source_arch)
        accs.extend(rep.accuracies)
    return EvalReport.from_runs(accs, source_arch, spec.arch)


def cross_arch_matrix(sets_by_source: Mapping[str, Sequence[tuple[np.ndarray, np.ndarray]]],
                      targets: Sequence[ModelSpec], test: tuple[np.ndarray, np.ndarray],
                      runs: int, base_seed: int = 0,
                      cfg: TrainConfig | None = None) -> dict[tuple[str, str], EvalReport]:
    out = {}
    for src, sets in sets_by_source.items():
        for tgt in targets:
            for images, _ in sets:
                if tuple(images.shape[1:]) != tgt.input_shape:
                    raise MatrixError(
                        f"({src}, {tgt.arch}): set samples {images.shape[1:]} "
                        f"vs target input {tgt.input_shape}"
                    )
            out[src, tgt.arch] = evaluate_sets(tgt, sets, test, runs, base_seed, cfg, src)
    return out


def append_csv_row(path, row: Mapping) -> None:
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        if new:
            writer.writeheader()
        writer.writerow({k: row.get(k, "") for k in CSV_FIELDS})
