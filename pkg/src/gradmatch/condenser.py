"""Gradient-matching condensation loop.

One outer iteration draws fresh network parameters; each of its inner
iterations first moves the synthetic images to reduce the gradient-matching
loss, then trains the network on the synthetic images for a number of SGD
steps decided by the theta-step policy.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import models
from .autodiff import Tensor
from .data import Dataset, SyntheticSet, init_synthetic, sample_class_batch
from .matching import DistanceSpec, GradientSet, MatchLoss, intra_loss, inter_loss, multi_level_loss
from .models import ModelSpec, ParamSet

log = logging.getLogger(__name__)

MODES = ("intra", "inter", "interleaved", "multi_level")
POLICIES = ("fixed", "schedule", "overfit")


class DivergenceError(RuntimeError):
    def __init__(self, message: str, trace: "CondenseTrace | None" = None,
                 outer: int | None = None, inner: int | None = None):
        super().__init__(message)
        self.trace = trace
        self.outer = outer
        self.inner = inner


def zeta_schedule(t: int) -> int:
    """Number of theta updates at inner iteration t (non-increasing)."""
    if t < 0:
        raise ValueError("t must be >= 0")
    if t < 4:
        return 50 - 10 * t
    if t < 10:
        return 10
    return 5


@dataclass(frozen=True)
class ThetaPolicy:
    kind: str = "fixed"
    steps: int = 1
    cap: int = 50

    def __post_init__(self):
        if self.kind not in POLICIES:
            raise ValueError(f"unknown theta policy {self.kind!r}")
        if self.kind == "fixed" and self.steps < 0:
            raise ValueError("fixed steps must be >= 0")
        if self.kind == "overfit" and self.cap < 1:
            raise ValueError("overfit cap must be >= 1")

    def steps_at(self, t: int) -> int:
        if self.kind == "fixed":
            return self.steps
        if self.kind == "schedule":
            return zeta_schedule(t)
        return self.cap

    @classmethod
    def parse(cls, text: str) -> "ThetaPolicy":
        """``"fixed:50"``, ``"schedule"`` or ``"overfit:50"``."""
        kind, _, arg = text.partition(":")
        if kind == "fixed":
            return cls("fixed", steps=int(arg or 1))
        if kind == "schedule":
            return cls("schedule")
        if kind == "overfit":
            return cls("overfit", cap=int(arg or 50))
        raise ValueError(f"unknown theta policy {text!r}")

    def __str__(self) -> str:
        if self.kind == "fixed":
            return f"fixed:{self.steps}"
        if self.kind == "overfit":
            return f"overfit:{self.cap}"
        return "schedule"


def count_theta_updates(inner_iters: int, policy: ThetaPolicy) -> int:
    """Theta updates per outer iteration; the last inner iteration does none."""
    if policy.kind == "overfit":
        raise ValueError("the overfit policy's update count depends on the data")
    return int(np.sum([policy.steps_at(t) for t in range(inner_iters - 1)], dtype=np.int64))


@dataclass
class CondenseConfig:
    ipc: int = 1
    outer_iters: int = 100
    inner_iters: int = 1
    syn_steps: int = 1
    theta_policy: ThetaPolicy = field(default_factory=ThetaPolicy)
    lr_syn: float = 0.1
    lr_theta: float = 0.01
    momentum_syn: float = 0.0
    momentum_theta: float = 0.0
    lam: float | None = None  # None means "number of classes"
    mode: str = "multi_level"
    distance: str = "d1+d2"
    real_batch_per_class: int = 64
    val_batch_size: int = 256
    init: str = "noise"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.theta_policy, str):
            self.theta_policy = ThetaPolicy.parse(self.theta_policy)
        elif isinstance(self.theta_policy, dict):
            self.theta_policy = ThetaPolicy(**self.theta_policy)
        errors = []
        if self.outer_iters < 1 or self.inner_iters < 1:
            errors.append("outer_iters and inner_iters must be >= 1")
        if self.syn_steps < 1:
            errors.append("syn_steps must be >= 1")
        if self.lr_syn < 0 or self.lr_theta < 0:
            errors.append("learning rates must be non-negative")
        if self.mode not in MODES:
            errors.append(f"mode must be one of {MODES}")
        if self.ipc < 1:
            errors.append("ipc must be >= 1")
        try:
            DistanceSpec.parse(self.distance)
        except ValueError as exc:
            errors.append(str(exc))
        if errors:
            raise ValueError("; ".join(errors))

    @property
    def distance_spec(self) -> DistanceSpec:
        return DistanceSpec.parse(self.distance)

    def lam_for(self, num_classes: int) -> float:
        return float(num_classes) if self.lam is None else float(self.lam)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["theta_policy"] = str(self.theta_policy)
        return d


@dataclass
class StepRecord:
    outer: int
    inner: int
    loss: float
    loss_intra: float
    loss_inter: float
    theta_steps: int
    val_losses: list[float] = field(default_factory=list)


@dataclass
class CondenseTrace:
    records: list[StepRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, rec: StepRecord) -> None:
        self.records.append(rec)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r)) + "\n" for r in self.records)

    def total_theta_steps(self) -> int:
        return int(np.sum([r.theta_steps for r in self.records], dtype=np.int64))


class SGD:
    """Plain or heavy-ball SGD over a list of numpy arrays."""

    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.velocity: list[np.ndarray] | None = None

    def step(self, arrays: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> list[np.ndarray]:
        if self.momentum == 0.0:
            return [a - self.lr * g for a, g in zip(arrays, grads)]
        if self.velocity is None:
            self.velocity = [np.zeros_like(a) for a in arrays]
        self.velocity = [self.momentum * v + g for v, g in zip(self.velocity, grads)]
        return [a - self.lr * v for a, v in zip(arrays, self.velocity)]


def _class_gradients(spec: ModelSpec, params: ParamSet, images, labels,
                     create_graph: bool) -> GradientSet:
    loss = models.loss(spec, params, images, labels)
    grads = ad.grad(loss, params.tensors(), create_graph=create_graph)
    return GradientSet.from_params(params, grads)


def assemble_loss(mode: str, t: int, gs: list[GradientSet], gt: list[GradientSet],
                  dist: DistanceSpec, lam: float, sizes_s: list[int],
                  sizes_t: list[int]) -> MatchLoss:
    if mode == "interleaved":
        mode = "intra" if t % 2 == 0 else "inter"
    if mode == "multi_level":
        return multi_level_loss(gs, gt, dist, lam, sizes_s, sizes_t)
    if mode == "intra":
        intra = intra_loss(gs, gt, dist)
        return MatchLoss(intra, intra.item(), 0.0)
    inter = ad.scale(inter_loss(gs, gt, dist, sizes_s, sizes_t), lam)
    return MatchLoss(inter, 0.0, inter.item())


def synthetic_step(real: Dataset, syn: SyntheticSet, spec: ModelSpec, params: ParamSet,
                   config: CondenseConfig, t: int, rng: np.random.Generator,
                   opt: SGD | None = None) -> tuple[SyntheticSet, MatchLoss]:
    """Update the synthetic images ``config.syn_steps`` times against fresh
    per-class real batches; returns the new set and the last matching loss."""
    dist = config.distance_spec
    lam = config.lam_for(real.num_classes)
    opt = opt or SGD(config.lr_syn, config.momentum_syn)
    images = syn.images
    match = None
    for _ in range(config.syn_steps):
        leaves = []
        gs, gt, sizes_s, sizes_t = [], [], [], []
        for c in range(real.num_classes):
            xr, yr = sample_class_batch(real, c, config.real_batch_per_class, rng)
            sl = syn.class_slice(c)
            leaf = Tensor(images[sl], requires_grad=True)
            leaves.append(leaf)
            gt.append(_class_gradients(spec, params, Tensor(xr), yr, create_graph=False))
            gs.append(_class_gradients(spec, params, leaf, syn.labels[sl], create_graph=True))
            sizes_s.append(len(leaf.data))
            sizes_t.append(len(xr))
        match = assemble_loss(config.mode, t, gs, gt, dist, lam, sizes_s, sizes_t)
        grads = ad.grad(match.total, leaves)
        new = opt.step([leaf.data for leaf in leaves], [g.data for g in grads])
        images = np.concatenate(new, axis=0)
    return SyntheticSet(images, syn.labels, syn.ipc, syn.num_classes), match


def theta_phase(spec: ModelSpec, params: ParamSet, syn: SyntheticSet, policy: ThetaPolicy,
                t: int, lr: float, momentum: float = 0.0,
                val_loss: Callable[[ParamSet], float] | None = None) -> tuple[ParamSet, int, list[float]]:
    """Train the network on the synthetic set only.

    Fixed and schedule policies take exactly their step count. The overfit
    policy evaluates ``val_loss`` before and after each step and stops after
    the first increase (keeping that step) or at the cap.
    """
    n = policy.steps_at(t)
    opt = SGD(lr, momentum)
    images = Tensor(syn.images)
    val_history: list[float] = []
    check = policy.kind == "overfit"
    if check:
        if val_loss is None:
            raise ValueError("overfit policy needs a validation loss")
        val_history.append(float(val_loss(params)))
    steps = 0
    for _ in range(n):
        loss = models.loss(spec, params, images, syn.labels)
        grads = ad.grad(loss, params.tensors())
        params = params.with_tensors(opt.step(params.arrays(), [g.data for g in grads]))
        steps += 1
        if check:
            v = float(val_loss(params))
            val_history.append(v)
            if v > val_history[-2]:
                break
    return params, steps, val_history


def _validation_loss(spec: ModelSpec, images: np.ndarray, labels: np.ndarray):
    x = Tensor(images)

    def fn(params: ParamSet) -> float:
        with ad.no_grad():
            return models.loss(spec, params, x, labels).item()

    return fn


def condense(real: Dataset, config: CondenseConfig, spec: ModelSpec,
             trace_path=None) -> tuple[SyntheticSet, CondenseTrace]:
    if spec.num_classes != real.num_classes:
        raise ValueError(
            f"model has {spec.num_classes} classes, dataset has {real.num_classes}"
        )
    if real.sample_shape != spec.input_shape:
        raise ValueError(f"dataset samples {real.sample_shape} vs model input {spec.input_shape}")
    rng = np.random.default_rng(config.seed)
    syn = init_synthetic(real, config.ipc, config.init, seed=int(rng.integers(2**31)))
    labels_before = syn.labels.copy()
    trace = CondenseTrace()
    syn_opt = SGD(config.lr_syn, config.momentum_syn)
    sink = open(trace_path, "w") if trace_path else None
    try:
        for k in range(config.outer_iters):
            params = models.init_params(spec, seed=int(rng.integers(2**31)))
            val_fn = None
            if config.theta_policy.kind == "overfit":
                pick = rng.permutation(len(real))[:config.val_batch_size]
                val_fn = _validation_loss(spec, real.images[pick], real.labels[pick])
            for t in range(config.inner_iters):
                try:
                    syn, match = synthetic_step(real, syn, spec, params, config, t, rng, syn_opt)
                    steps, vals = 0, []
                    if t < config.inner_iters - 1:
                        params, steps, vals = theta_phase(
                            spec, params, syn, config.theta_policy, t, config.lr_theta,
                            config.momentum_theta, val_fn,
                        )
                except ad.NonFiniteError as exc:
                    raise DivergenceError(
                        f"divergence at outer {k}, inner {t}: {exc}", trace, k, t
                    ) from exc
                rec = StepRecord(k, t, match.total.item(), match.intra, match.inter, steps, vals)
                trace.append(rec)
                if sink:
                    sink.write(json.dumps(asdict(rec)) + "\n")
            if k % 10 == 0 or k == config.outer_iters - 1:
                log.info("outer %d/%d loss %.4f", k + 1, config.outer_iters, trace.records[-1].loss)
    finally:
        if sink:
            sink.close()
    assert np.array_equal(syn.labels, labels_before)
    return syn, trace
