import json
from dataclasses import replace

import numpy as np
import pytest

from gradmatch import autodiff as ad
from gradmatch import models
from gradmatch.condenser import (
    CondenseConfig,
    DivergenceError,
    ThetaPolicy,
    condense,
    count_theta_updates,
    synthetic_step,
    theta_phase,
    zeta_schedule,
)
from gradmatch.data import gaussian_blobs, init_synthetic
from gradmatch.models import ModelSpec, init_params

SCHEDULE = {0: 50, 1: 40, 2: 30, 3: 20, 4: 10, 9: 10, 10: 5, 1000: 5}


@pytest.mark.parametrize("t,expected", sorted(SCHEDULE.items()))
def test_zeta_schedule_examples(t, expected):
    assert zeta_schedule(t) == expected


def test_zeta_schedule_non_increasing():
    vals = [zeta_schedule(t) for t in range(30)]
    assert all(a >= b >= 1 for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        zeta_schedule(-1)


@pytest.mark.parametrize("T,policy,expected", [
    (10, "fixed:50", 450),
    (10, "schedule", 190),
    (1, "fixed:50", 0),
    (1, "schedule", 0),
    (3, "fixed:7", 14),
])
def test_count_theta_updates(T, policy, expected):
    assert count_theta_updates(T, ThetaPolicy.parse(policy)) == expected


def test_policy_parse():
    assert ThetaPolicy.parse("overfit:9") == ThetaPolicy("overfit", cap=9)
    assert str(ThetaPolicy.parse("fixed:50")) == "fixed:50"
    for bad in ("adaptive", "overfit:0"):
        with pytest.raises(ValueError):
            ThetaPolicy.parse(bad)


def _scripted(values):
    it = iter(values)
    return lambda params: next(it)


@pytest.fixture
def tiny():
    ds = gaussian_blobs(2, 20, 2, 3.0, 0)
    spec = ModelSpec("logistic", (2,), 2)
    return ds, spec, init_params(spec, 0), init_synthetic(ds, 2, seed=0)


@pytest.mark.parametrize("losses,cap,steps", [
    ([5.0, 4.0, 4.5], 50, 2),
    ([9.0, 8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0], 7, 7),
    ([5.0, 6.0], 50, 1),
])
def test_overfit_policy_scripted(tiny, losses, cap, steps):
    _, spec, params, syn = tiny
    _, n, hist = theta_phase(spec, params, syn, ThetaPolicy("overfit", cap=cap), 0, 0.1,
                             val_loss=_scripted(losses))
    assert n == steps
    assert hist == losses[:steps + 1]


def test_overfit_keeps_increasing_step(tiny):
    _, spec, params, syn = tiny
    fixed, _, _ = theta_phase(spec, params, syn, ThetaPolicy("fixed", 1), 0, 0.1)
    over, _, _ = theta_phase(spec, params, syn, ThetaPolicy("overfit", cap=5), 0, 0.1,
                             val_loss=_scripted([1.0, 2.0]))
    assert all(np.array_equal(a, b) for a, b in zip(fixed.arrays(), over.arrays()))


@pytest.mark.parametrize("policy,t,expected", [("fixed:3", 0, 3), ("schedule", 3, 20)])
def test_theta_phase_step_counts(tiny, policy, t, expected):
    _, spec, params, syn = tiny
    _, n, _ = theta_phase(spec, params, syn, ThetaPolicy.parse(policy), t, 0.01)
    assert n == expected


def test_synthetic_step_zero_lr_is_identity(tiny):
    ds, spec, params, syn = tiny
    cfg = CondenseConfig(ipc=2, lr_syn=0.0)
    out, _ = synthetic_step(ds, syn, spec, params, cfg, 0, np.random.default_rng(0))
    assert np.array_equal(out.images, syn.images)


def test_intra_equals_multi_level_lambda_zero(tiny):
    ds, spec, params, syn = tiny
    a, la = synthetic_step(ds, syn, spec, params, CondenseConfig(ipc=2, mode="intra", lam=5.0),
                           0, np.random.default_rng(1))
    b, lb = synthetic_step(ds, syn, spec, params, CondenseConfig(ipc=2, mode="multi_level", lam=0.0),
                           0, np.random.default_rng(1))
    assert np.array_equal(a.images, b.images)
    assert la.total.item() == lb.total.item()


def test_interleaved_alternates(tiny):
    ds, spec, params, syn = tiny
    cfg = CondenseConfig(ipc=2, mode="interleaved")
    _, even = synthetic_step(ds, syn, spec, params, cfg, 0, np.random.default_rng(2))
    _, odd = synthetic_step(ds, syn, spec, params, cfg, 1, np.random.default_rng(2))
    assert even.inter == 0.0 and even.intra > 0
    assert odd.intra == 0.0 and odd.inter > 0


def test_synthetic_step_gradient_matches_fd():
    ds = gaussian_blobs(2, 30, 3, 2.0, 1)
    spec = ModelSpec("logistic", (3,), 2)
    params = init_params(spec, 3)
    syn = init_synthetic(ds, 2, seed=4)
    cfg = CondenseConfig(ipc=2, lr_syn=1e-3, real_batch_per_class=8)
    out, _ = synthetic_step(ds, syn, spec, params, cfg, 0, np.random.default_rng(5))
    step = (syn.images - out.images) / cfg.lr_syn

    def loss_at(t):
        shifted = replace(syn, images=t.data)
        _, m = synthetic_step(ds, shifted, spec, params, replace(cfg, lr_syn=0.0), 0,
                              np.random.default_rng(5))
        return ad.Tensor(m.total.item())

    fd = ad.finite_diff_gradient(loss_at, syn.images)
    err = np.linalg.norm(step - fd.data) / (np.linalg.norm(step) + np.linalg.norm(fd.data))
    assert err <= 1e-4


def _numpy_logistic_grads(w, b, x, y, c):
    z = x @ w.T + b
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    p[np.arange(len(y)), y] -= 1
    p /= len(y)
    return [p.T @ x, p.sum(0)]


def _numpy_distance(ga, gb):
    total = 0.0
    for a, b in zip(ga, gb):
        a, b = np.atleast_2d(a), np.atleast_2d(b)
        for x, y in zip(a, b):
            total += 1 - x @ y / max(np.linalg.norm(x) * np.linalg.norm(y), 1e-6)
            total += np.linalg.norm(x - y)
    return total


def test_multi_level_loss_matches_direct_reimplementation():
    rng = np.random.default_rng(9)
    c, ipc = 3, 2
    ds = gaussian_blobs(c, 10, 4, 2.0, 2)
    spec = ModelSpec("logistic", (4,), c)
    params = init_params(spec, 1)
    syn = init_synthetic(ds, ipc, seed=3)
    cfg = CondenseConfig(ipc=ipc, lam=None, lr_syn=0.0, real_batch_per_class=10)
    _, match = synthetic_step(ds, syn, spec, params, cfg, 0, rng)

    w, b = params.arrays()
    gs = [_numpy_logistic_grads(w, b, syn.images[syn.class_slice(k)], syn.labels[syn.class_slice(k)], c)
          for k in range(c)]
    gt = [_numpy_logistic_grads(w, b, ds.images[ds.class_index[k]], ds.labels[ds.class_index[k]], c)
          for k in range(c)]
    intra = sum(_numpy_distance(a, b) for a, b in zip(gs, gt))
    mean_s = [np.mean([g[i] for g in gs], axis=0) for i in range(2)]
    mean_t = [np.mean([g[i] for g in gt], axis=0) for i in range(2)]
    expected = intra + c * _numpy_distance(mean_s, mean_t)
    assert abs(match.total.item() - expected) <= 1e-12


def test_condense_minimal_loop_and_trace(tmp_path):
    ds = gaussian_blobs(2, 30, 2, 4.0, 0)
    spec = ModelSpec("logistic", (2,), 2)
    syn, trace = condense(ds, CondenseConfig(outer_iters=1, inner_iters=1), spec)
    assert len(trace) == 1 and trace.total_theta_steps() == 0
    assert syn.images.shape == (2, 2) and syn.labels.tolist() == [0, 1]

    cfg = CondenseConfig(ipc=2, outer_iters=3, inner_iters=4, theta_policy="fixed:2")
    path = tmp_path / "trace.jsonl"
    syn, trace = condense(ds, cfg, spec, trace_path=path)
    assert len(trace) == 12
    assert trace.total_theta_steps() == 3 * count_theta_updates(4, cfg.theta_policy)
    lines = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(lines) == 12 and lines[-1]["inner"] == 3 and lines[-1]["theta_steps"] == 0
    assert syn.labels.tolist() == [0, 0, 1, 1]


def test_condense_overfit_policy_runs():
    ds = gaussian_blobs(2, 30, 2, 4.0, 0)
    spec = ModelSpec("logistic", (2,), 2)
    cfg = CondenseConfig(outer_iters=2, inner_iters=3, theta_policy="overfit:4", val_batch_size=20)
    _, trace = condense(ds, cfg, spec)
    for rec in trace.records:
        if rec.inner < 2:
            assert 1 <= rec.theta_steps <= 4 and len(rec.val_losses) == rec.theta_steps + 1
        else:
            assert rec.theta_steps == 0


def test_condense_deterministic():
    ds = gaussian_blobs(2, 30, 2, 4.0, 0)
    spec = ModelSpec("mlp", (2,), 2, hidden=4)
    cfg = CondenseConfig(ipc=2, outer_iters=2, inner_iters=2, seed=11)
    a, _ = condense(ds, cfg, spec)
    b, _ = condense(ds, cfg, spec)
    assert np.array_equal(a.images, b.images)
    c, _ = condense(ds, replace(cfg, seed=12), spec)
    assert not np.array_equal(a.images, c.images)


def test_divergence_reports_position():
    ds = gaussian_blobs(2, 30, 2, 4.0, 0)
    spec = ModelSpec("logistic", (2,), 2)
    cfg = CondenseConfig(outer_iters=3, inner_iters=2, lr_syn=1e300, theta_policy="fixed:1")
    with pytest.raises(DivergenceError) as info:
        condense(ds, cfg, spec)
    assert info.value.outer is not None and info.value.inner is not None


def test_config_validation():
    with pytest.raises(ValueError):
        CondenseConfig(outer_iters=0)
    with pytest.raises(ValueError):
        CondenseConfig(mode="bogus")
    with pytest.raises(ValueError):
        CondenseConfig(distance="d7")
    assert CondenseConfig().lam_for(10) == 10.0
    assert CondenseConfig(lam=0.5).lam_for(10) == 0.5


def test_class_mismatch_rejected():
    ds = gaussian_blobs(3, 5, 2, 1.0, 0)
    with pytest.raises(ValueError):
        condense(ds, CondenseConfig(outer_iters=1), ModelSpec("logistic", (2,), 2))
    with pytest.raises(ValueError):
        condense(ds, CondenseConfig(outer_iters=1), ModelSpec("logistic", (3,), 3))


def test_theta_phase_uses_only_synthetic_data(tiny):
    _, spec, params, syn = tiny
    new, _, _ = theta_phase(spec, params, syn, ThetaPolicy("fixed", 1), 0, 0.1)
    loss = models.loss(spec, params, ad.Tensor(syn.images), syn.labels)
    grads = ad.grad(loss, params.tensors())
    for a, g, n in zip(params.arrays(), grads, new.arrays()):
        assert np.array_equal(n, a - 0.1 * g.data)


def test_condensed_beats_unoptimized_noise_on_blobs(blobs_bench):
    t = blobs_bench("d1+d2")
    assert t["condensed"].mean() - t["noise"].mean() >= 0.20
