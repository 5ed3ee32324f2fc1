"""Finite-difference oracle suite for the differentiable ops.

Used by ``gradmatch selftest`` and by the test suite.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def check_op(fn: Callable[..., Tensor], inputs: list[np.ndarray], h: float = 1e-5,
             seed: int = 0) -> float:
    """Max relative error between autodiff and central differences of
    sum(fn(*inputs) * w) for a fixed random weighting w, over all inputs."""
    with ad.no_grad():
        out_shape = fn(*[Tensor(x) for x in inputs]).shape
    w = Tensor(np.random.default_rng(seed).normal(size=out_shape))

    def scalar(*xs):
        return ad.sum(ad.mul(fn(*xs), w))

    leaves = [Tensor(x, requires_grad=True) for x in inputs]
    grads = ad.grad(scalar(*leaves), leaves)
    worst = 0.0
    for i, x in enumerate(inputs):
        def f(t, i=i):
            xs = [Tensor(v) for v in inputs]
            xs[i] = t
            return scalar(*xs)

        fd = ad.finite_diff_gradient(f, x, h)
        worst = max(worst, rel_error(grads[i].data, fd.data))
    return worst


def _away_from_kink(rng, shape, margin=1e-3):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    """One random instance of every differentiable op."""
    m = lambda *s: rng.normal(size=s)  # noqa: E731
    pos = lambda *s: rng.uniform(0.5, 2.0, size=s)  # noqa: E731
    labels = rng.integers(0, 3, size=4)
    return {
        "add": (ad.add, [m(3, 4), m(3, 4)]),
        "add_bias": (ad.add, [m(3, 4), m(4)]),
        "sub": (ad.sub, [m(3, 4), m(3, 4)]),
        "mul": (ad.mul, [m(3, 4), m(3, 4)]),
        "div": (ad.div, [m(3, 4), pos(3, 4)]),
        "scale": (lambda x: ad.scale(x, -2.5), [m(3, 4)]),
        "exp": (ad.exp, [m(3, 4)]),
        "log": (ad.log, [pos(3, 4)]),
        "sqrt": (ad.sqrt, [pos(3, 4)]),
        "reciprocal": (ad.reciprocal, [pos(3, 4)]),
        "relu": (ad.relu, [_away_from_kink(rng, (3, 4))]),
        "matmul": (ad.matmul, [m(3, 5), m(5, 2)]),
        "transpose": (ad.transpose, [m(3, 5)]),
        "reshape": (lambda x: ad.reshape(x, (6, 2)), [m(3, 4)]),
        "flatten": (ad.flatten, [m(2, 3, 2, 2)]),
        "sum": (ad.sum, [m(3, 4)]),
        "sum_axis": (lambda x: ad.sum(x, axis=1), [m(3, 4)]),
        "mean": (ad.mean, [m(3, 4)]),
        "l2_norm": (ad.l2_norm, [m(3, 4)]),
        "dot": (ad.dot, [m(3, 4), m(3, 4)]),
        "avg_pool2d": (lambda x: ad.avg_pool2d(x, 2), [m(2, 2, 5, 4)]),
        "conv2d": (lambda x, k: ad.conv2d(x, k, stride=1, padding=1), [m(2, 2, 5, 5), m(3, 2, 3, 3)]),
        "conv2d_stride2": (lambda x, k: ad.conv2d(x, k, stride=2, padding=0), [m(1, 2, 6, 5), m(2, 2, 2, 3)]),
        "softmax_cross_entropy": (lambda z: ad.softmax_cross_entropy(z, labels), [m(4, 3)]),
    }


def run(instances: int = 20, tol: float = 1e-5, verbose: bool = True) -> bool:
    rng = np.random.default_rng(0)
    worst: dict[str, float] = {}
    for i in range(instances):
        for name, (fn, xs) in op_cases(rng).items():
            worst[name] = max(worst.get(name, 0.0), check_op(fn, xs, seed=i))
    ok = True
    for name, err in worst.items():
        passed = err <= tol
        ok &= passed
        if verbose:
            print(f"{'PASS' if passed else 'FAIL'} {name:24s} max rel err {err:.2e}")
    return ok
