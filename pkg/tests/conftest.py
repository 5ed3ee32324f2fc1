import functools

import numpy as np
import pytest

from gradmatch.condenser import CondenseConfig, condense
from gradmatch.coreset import random_coreset
from gradmatch.data import gaussian_blobs, init_synthetic
from gradmatch.evaluation import TrainConfig, evaluate_sets
from gradmatch.models import ModelSpec

BLOBS_SEEDS = range(10)
BLOBS_EVAL = TrainConfig(epochs=300, batch_size=256, lr=0.1, decay_epochs=(150,),
                         momentum=0.9, weight_decay=0.05)
BLOBS_RUNS = 2


def _acc(spec, images, labels, test):
    return evaluate_sets(spec, [(images, labels)], (test.images, test.labels),
                         BLOBS_RUNS, 0, BLOBS_EVAL).mean


@functools.lru_cache(maxsize=None)
def blobs_point(seed: int, distance: str) -> dict:
    """Condensed, random-coreset and noise-init accuracies for one blobs seed."""
    train = gaussian_blobs(2, 500, 2, 4.0, seed)
    test = gaussian_blobs(2, 5000, 2, 4.0, 1000 + seed)
    spec = ModelSpec("logistic", (2,), 2)
    cfg = CondenseConfig(ipc=1, outer_iters=20, inner_iters=1, lr_syn=0.1,
                         mode="multi_level", distance=distance, seed=seed)
    syn, _ = condense(train, cfg, spec)
    rand = random_coreset(train, 1, seed).subset(train)
    noise = init_synthetic(train, 1, "noise", seed=seed)
    return {
        "condensed": _acc(spec, syn.images, syn.labels, test),
        "random": _acc(spec, *rand, test),
        "noise": _acc(spec, noise.images, noise.labels, test),
    }


@pytest.fixture(scope="session")
def blobs_bench():
    def table(distance: str) -> dict[str, np.ndarray]:
        pts = [blobs_point(s, distance) for s in BLOBS_SEEDS]
        return {k: np.array([p[k] for p in pts]) for k in pts[0]}
    return table
