import csv
import math

import numpy as np
import pytest

from gradmatch.data import gaussian_blobs
from gradmatch.evaluation import (
    CSV_FIELDS,
    EvalReport,
    MatrixError,
    TrainConfig,
    TrainingError,
    accuracy,
    append_csv_row,
    cross_arch_matrix,
    repeat_eval,
    train_from_scratch,
)
from gradmatch.models import ModelSpec, init_params

FAST = TrainConfig(epochs=20, batch_size=16, lr=0.1, decay_epochs=(10,))


def test_scripted_report():
    rep = EvalReport.from_runs([1.0, 2.0, 3.0])
    assert rep.mean == 2.0 and rep.std == 1.0 and rep.runs == 3
    assert EvalReport.from_runs([0.7]).std == 0.0
    assert EvalReport.from_runs([3.0, 1.0, 2.0]).mean == rep.mean
    with pytest.raises(ValueError):
        EvalReport.from_runs([])


def test_report_recomputable():
    accs = list(np.random.default_rng(0).uniform(size=17))
    rep = EvalReport.from_runs(accs)
    assert abs(rep.mean - math.fsum(rep.accuracies) / rep.runs) <= 1e-12
    assert abs(rep.std - np.std(rep.accuracies, ddof=1)) <= 1e-12


def test_lr_schedule():
    cfg = TrainConfig(lr=0.01, decay_epochs=(150,), decay=0.1)
    assert cfg.lr_at(149) == 0.01 and cfg.lr_at(150) == pytest.approx(0.001)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)


def test_zero_lr_leaves_params():
    ds = gaussian_blobs(2, 10, 2, 3.0, 0)
    spec = ModelSpec("mlp", (2,), 2, hidden=4)
    cfg = TrainConfig(epochs=3, lr=0.0, seed=5)
    trained = train_from_scratch(spec, ds.images, ds.labels, cfg)
    init = init_params(spec, 5)
    assert all(np.array_equal(a, b) for a, b in zip(trained.arrays(), init.arrays()))


def test_separable_blobs_reach_full_train_accuracy():
    ds = gaussian_blobs(2, 50, 2, 12.0, 3)
    spec = ModelSpec("logistic", (2,), 2)
    centers = 12.0 * np.eye(2)
    nearest = np.argmin(((ds.images[:, None] - centers) ** 2).sum(-1), 1)
    assert np.array_equal(nearest, ds.labels)  # the sample is linearly separable
    params = train_from_scratch(spec, ds.images, ds.labels,
                                TrainConfig(epochs=200, batch_size=100, lr=0.1, weight_decay=0.0))
    assert accuracy(spec, params, ds.images, ds.labels) == 1.0


def test_training_improves_train_accuracy_for_logistic():
    ds = gaussian_blobs(3, 30, 4, 1.5, 2)
    spec = ModelSpec("logistic", (4,), 3)
    before = accuracy(spec, init_params(spec, 0), ds.images, ds.labels)
    params = train_from_scratch(spec, ds.images, ds.labels,
                                TrainConfig(epochs=30, lr=0.01, momentum=0.0, weight_decay=0.0))
    assert accuracy(spec, params, ds.images, ds.labels) >= before


def _fixed_logistic(w, b):
    spec = ModelSpec("logistic", (2,), 3)
    p = init_params(spec, 0)
    return spec, p.with_tensors([np.asarray(w, float), np.asarray(b, float)])


def test_accuracy_hand_counted_confusion():
    spec, p = _fixed_logistic(np.eye(3, 2), np.zeros(3))
    x = np.array([[1, 0], [0, 1], [2, 1], [1, 3], [-1, -1], [-1, -2], [5, 0], [0, 5], [3, 3], [-2, 0.5]])
    y = np.array([0, 1, 0, 0, 2, 2, 0, 1, 1, 2])
    # predictions: 0 1 0 1 2 2 0 1 0 1 -> hits at 0,1,2,4,5,6,7
    assert accuracy(spec, p, x, y) == pytest.approx(0.7)


def test_accuracy_perfect_and_constant():
    spec, p = _fixed_logistic(np.zeros((3, 2)), [0.0, 0.0, 0.0])
    x = np.random.default_rng(0).normal(size=(9, 2))
    y = np.repeat([0, 1, 2], 3)
    assert accuracy(spec, p, x, y) == pytest.approx(1 / 3)  # tie -> class 0
    spec, p = _fixed_logistic(np.zeros((3, 2)), [0.0, 0.0, 1.0])
    assert accuracy(spec, p, x, np.full(9, 2)) == 1.0


def test_repeat_eval_reproducible_and_seeded():
    ds = gaussian_blobs(2, 20, 2, 3.0, 0)
    test = gaussian_blobs(2, 50, 2, 3.0, 1)
    spec = ModelSpec("mlp", (2,), 2, hidden=4)
    a = repeat_eval(spec, (ds.images, ds.labels), (test.images, test.labels), 3, 7, FAST)
    b = repeat_eval(spec, (ds.images, ds.labels), (test.images, test.labels), 3, 7, FAST)
    assert a == b and a.runs == 3 and all(0 <= v <= 1 for v in a.accuracies)
    one = repeat_eval(spec, (ds.images, ds.labels), (test.images, test.labels), 1, 8, FAST)
    assert one.accuracies[0] == a.accuracies[1]


def test_divergence_carries_epoch_and_run():
    ds = gaussian_blobs(2, 10, 2, 3.0, 0)
    spec = ModelSpec("mlp", (2,), 2, hidden=4)
    cfg = TrainConfig(epochs=50, lr=1e150, momentum=0.0)
    with pytest.raises(TrainingError) as info:
        repeat_eval(spec, (ds.images, ds.labels), (ds.images, ds.labels), 2, 0, cfg)
    assert info.value.epoch is not None and info.value.run == 0


def test_cross_arch_shape_and_reduction():
    ds = gaussian_blobs(2, 10, 2, 3.0, 0)
    test = (ds.images, ds.labels)
    sets = {"mlp": [test], "logistic": [test]}
    targets = [ModelSpec(a, (2,), 2, hidden=4) for a in ("logistic", "mlp")]
    m = cross_arch_matrix(sets, targets, test, 2, 0, FAST)
    assert sorted(m) == [(s, t) for s in ("logistic", "mlp") for t in ("logistic", "mlp")]
    direct = repeat_eval(targets[1], test, test, 2, 0, FAST)
    assert m["mlp", "mlp"].accuracies == direct.accuracies
    assert m["mlp", "mlp"].source_arch == "mlp" and m["mlp", "mlp"].target_arch == "mlp"
    with pytest.raises(MatrixError, match="logistic"):
        cross_arch_matrix({"mlp": [test]}, [ModelSpec("logistic", (3,), 2)], test, 1, 0, FAST)


def test_csv_append(tmp_path):
    path = tmp_path / "r.csv"
    append_csv_row(path, {"dataset": "blobs", "mean": "0.5"})
    append_csv_row(path, {"dataset": "blobs", "mean": "0.6"})
    rows = list(csv.DictReader(path.open()))
    assert tuple(rows[0]) == CSV_FIELDS and [r["mean"] for r in rows] == ["0.5", "0.6"]
