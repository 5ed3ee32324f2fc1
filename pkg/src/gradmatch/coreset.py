"""Random and herding coreset baselines."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .models import ModelSpec


class SelectionError(ValueError):
    pass


@dataclass
class CoresetResult:
    indices: list[list[int]]  # per class, dataset positions
    method: str
    seed: int

    def flat(self) -> np.ndarray:
        return np.array([i for ix in self.indices for i in ix], dtype=np.int64)

    def subset(self, ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
        idx = self.flat()
        return ds.images[idx], ds.labels[idx]

    def to_json(self) -> str:
        return json.dumps({"method": self.method, "seed": self.seed, "indices": self.indices})

    @classmethod
    def from_json(cls, text: str) -> "CoresetResult":
        d = json.loads(text)
        return cls([list(map(int, ix)) for ix in d["indices"]], d["method"], int(d["seed"]))


def _check_sizes(ds: Dataset, ipc: int) -> None:
    for c, ix in enumerate(ds.class_index):
        if len(ix) < ipc:
            raise SelectionError(f"class {c} has {len(ix)} samples, need {ipc}")


def random_coreset(ds: Dataset, ipc: int, seed: int) -> CoresetResult:
    _check_sizes(ds, ipc)
    rng = np.random.default_rng(seed)
    picks = [sorted(int(i) for i in rng.choice(ix, ipc, replace=False)) for ix in ds.class_index]
    return CoresetResult(picks, "random", seed)


def herding_select(feats: np.ndarray, k: int) -> list[int]:
    """Greedy mean matching: repeatedly add the point that brings the running
    mean of the selection closest to the mean of all points.

    Returns positions into ``feats``; ties go to the lowest position.
    """
    feats = np.asarray(feats, dtype=np.float64).reshape(len(feats), -1)
    if k > len(feats):
        raise SelectionError(f"cannot select {k} of {len(feats)} points")
    mu = feats.mean(axis=0)
    chosen: list[int] = []
    available = np.ones(len(feats), dtype=bool)
    running = np.zeros_like(mu)
    for step in range(1, k + 1):
        cand = (running[None, :] + feats) / step
        dist = np.linalg.norm(cand - mu, axis=1)
        dist[~available] = np.inf
        best = int(np.argmin(dist))
        chosen.append(best)
        available[best] = False
        running += feats[best]
    return chosen


def herding_coreset(ds: Dataset, ipc: int, features: str = "pixel",
                    spec: ModelSpec | None = None, seed: int = 0,
                    train_epochs: int = 5) -> CoresetResult:
    """Per-class herding in pixel space or in a briefly trained model's
    penultimate feature space."""
    _check_sizes(ds, ipc)
    if features == "pixel":
        feats = ds.images.reshape(len(ds), -1)
    elif features == "model_embedding":
        if spec is None:
            raise ValueError("model_embedding features need a model spec")
        from . import autodiff as ad
        from .evaluation import TrainConfig, train_from_scratch
        from .models import features as model_features

        cfg = TrainConfig(epochs=train_epochs, batch_size=256, lr=0.01, seed=seed, decay_epochs=())
        params = train_from_scratch(spec, ds.images, ds.labels, cfg)
        with ad.no_grad():
            feats = np.concatenate([
                model_features(spec, params, ds.images[i:i + 1000]).data
                for i in range(0, len(ds), 1000)
            ])
    else:
        raise ValueError(f"unknown herding feature space {features!r}")
    picks = []
    for ix in ds.class_index:
        local = herding_select(feats[ix], ipc)
        picks.append([int(ix[j]) for j in local])
    return CoresetResult(picks, f"herding_{features}", seed)
