import itertools
import math

import numpy as np
import pytest

from gradmatch.coreset import (
    CoresetResult,
    SelectionError,
    herding_coreset,
    herding_select,
    random_coreset,
)
from gradmatch.data import gaussian_blobs
from gradmatch.models import ModelSpec


def brute_greedy(points, k):
    """Exhaustive greedy: try every unselected point at every step."""
    pts = [list(map(float, p)) for p in points]
    dim = len(pts[0])
    mu = [math.fsum(p[d] for p in pts) / len(pts) for d in range(dim)]
    chosen = []
    for _ in range(k):
        best, best_d = None, math.inf
        for i in range(len(pts)):
            if i in chosen:
                continue
            sel = chosen + [i]
            m = [math.fsum(pts[j][d] for j in sel) / len(sel) for d in range(dim)]
            dist = math.sqrt(math.fsum((m[d] - mu[d]) ** 2 for d in range(dim)))
            if dist < best_d:
                best, best_d = i, dist
        chosen.append(best)
    return chosen


def test_herding_small_examples():
    pts = np.array([[0.0], [1.0], [5.0]])
    assert herding_select(pts, 1) == [1]
    assert sorted(herding_select(pts, 2)) == [1, 2]
    assert sorted(herding_select(pts, 3)) == [0, 1, 2]


def test_herding_second_step_brute_force():
    pts = [0.0, 1.0, 5.0]
    pairs = [s for s in itertools.combinations(range(3), 2) if 1 in s]
    best = min(pairs, key=lambda s: abs(np.mean([pts[i] for i in s]) - 2))
    assert set(best) == {1, 2}
    assert set(herding_select(np.array(pts)[:, None], 2)) == set(best)


@pytest.mark.parametrize("seed", range(50))
def test_herding_matches_exhaustive_greedy(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 13))
    k = int(rng.integers(1, min(4, n) + 1))
    pts = rng.normal(size=(n, int(rng.integers(1, 5))))
    assert herding_select(pts, k) == brute_greedy(pts, k)


def test_herding_tie_goes_to_lowest():
    pts = np.array([[-1.0], [1.0], [-1.0], [1.0]])
    assert herding_select(pts, 1) == [0]


def test_herding_coreset_balanced_and_deterministic():
    ds = gaussian_blobs(3, 8, 2, 2.0, 0)
    a, b = herding_coreset(ds, 2), herding_coreset(ds, 2)
    assert a.indices == b.indices
    for c, ix in enumerate(a.indices):
        assert len(ix) == len(set(ix)) == 2
        assert all(ds.labels[i] == c for i in ix)
    whole = herding_coreset(ds, 8)
    assert [sorted(ix) for ix in whole.indices] == [ix.tolist() for ix in ds.class_index]


def test_herding_embedding_mode():
    ds = gaussian_blobs(2, 10, 4, 2.0, 0)
    spec = ModelSpec("mlp", (4,), 2, hidden=6)
    res = herding_coreset(ds, 3, "model_embedding", spec, seed=1, train_epochs=2)
    assert res.method == "herding_model_embedding" and [len(ix) for ix in res.indices] == [3, 3]
    with pytest.raises(ValueError):
        herding_coreset(ds, 1, "model_embedding")


def test_random_coreset_contract():
    ds = gaussian_blobs(2, 5, 2, 1.0, 0)
    a = random_coreset(ds, 3, seed=4)
    assert a.indices == random_coreset(ds, 3, seed=4).indices
    for c, ix in enumerate(a.indices):
        assert len(set(ix)) == 3 and all(ds.labels[i] == c for i in ix)
    full = random_coreset(ds, 5, seed=0)
    assert [sorted(ix) for ix in full.indices] == [ix.tolist() for ix in ds.class_index]
    with pytest.raises(SelectionError):
        random_coreset(ds, 6, seed=0)
    with pytest.raises(SelectionError):
        herding_coreset(ds, 6)


def test_random_coreset_uniform():
    ds = gaussian_blobs(2, 10, 1, 1.0, 0)
    reps, k = 10_000, 3
    counts = np.zeros(len(ds))
    for r in range(reps):
        counts[random_coreset(ds, k, seed=r).flat()] += 1
    p = k / 10
    sigma = math.sqrt(reps * p * (1 - p))
    assert np.all(np.abs(counts - reps * p) <= 3 * sigma)


def test_coreset_json_round_trip():
    ds = gaussian_blobs(2, 5, 2, 1.0, 0)
    res = random_coreset(ds, 2, seed=1)
    back = CoresetResult.from_json(res.to_json())
    assert back == res
    x, y = back.subset(ds)
    assert x.shape == (4, 2) and y.tolist() == [0, 0, 1, 1]
