"""Distances between gradient sets and the multi-level matching loss."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

COSINE_EPS = 1e-6
TERM_KINDS = {"d1": "d1_cosine", "d2": "d2_euclid", "d3": "d3_sq", "d4": "d4_mse"}


class StructureError(ValueError):
    pass


@dataclass(frozen=True)
class DistanceSpec:
    """Weighted sum of per-row distance terms."""

    terms: tuple[tuple[str, float], ...]

    def __post_init__(self):
        if not self.terms:
            raise ValueError("distance needs at least one term")
        for kind, w in self.terms:
            if kind not in TERM_KINDS.values():
                raise ValueError(f"unknown distance term {kind!r}")
            if not np.isfinite(w):
                raise ValueError(f"weight of {kind} is not finite")

    @classmethod
    def parse(cls, text: str) -> "DistanceSpec":
        """Parse strings like ``"d1"``, ``"d1+d2"``, ``"d1+100*d4"``, ``"d1 + 0.1*d2"``."""
        terms = []
        for part in text.replace(" ", "").split("+"):
            m = re.fullmatch(r"(?:([0-9]*\.?[0-9]+(?:[eE][-+]?\d+)?)\*?)?(d[1-4])", part)
            if not m:
                raise ValueError(f"cannot parse distance term {part!r} in {text!r}")
            weight = float(m.group(1)) if m.group(1) else 1.0
            terms.append((TERM_KINDS[m.group(2)], weight))
        return cls(tuple(terms))

    def __str__(self) -> str:
        inv = {v: k for k, v in TERM_KINDS.items()}
        parts = []
        for kind, w in self.terms:
            parts.append(inv[kind] if w == 1.0 else f"{w:g}*{inv[kind]}")
        return "+".join(parts)


@dataclass
class GradientSet:
    """Per-parameter gradients keyed like the ParamSet they were taken against."""

    entries: list[tuple[str, str, Tensor]]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def tensors(self) -> list[Tensor]:
        return [g for _, _, g in self.entries]

    @classmethod
    def from_params(cls, params, grads: Sequence[Tensor]) -> "GradientSet":
        return cls([(lid, role, g) for (lid, role, _), g in zip(params, grads)])


def row_view(g, bias: str = "vector") -> Tensor:
    """Reshape a gradient to (out, rest).

    A 1-d (bias) gradient becomes a single row (1, out) with ``bias="vector"``
    or ``out`` rows of length 1 with ``bias="rows"``.  Cosine terms on length-1
    rows reduce to a sign and have 1/eps sized derivatives near zero.
    """
    g = g if isinstance(g, Tensor) else Tensor(g)
    if g.ndim == 0:
        return ad.reshape(g, (1, 1))
    if g.ndim == 1:
        if bias == "vector":
            return ad.reshape(g, (1, g.shape[0]))
        if bias != "rows":
            raise ValueError(f"unknown bias layout {bias!r}")
    return ad.reshape(g, (g.shape[0], -1))


def layer_distance(a: Tensor, b: Tensor, spec: DistanceSpec) -> Tensor:
    """Sum over rows of the weighted distance terms between matching rows of a and b."""
    if a.shape != b.shape:
        raise ShapeError(f"layer_distance: shapes {a.shape} and {b.shape} differ")
    total = None
    diff = None
    for kind, weight in spec.terms:
        if kind == "d1_cosine":
            norms = ad.mul(ad.l2_norm(a), ad.l2_norm(b))
            denom = ad.add(norms, ad.relu(ad.sub(COSINE_EPS, norms)))  # max(norms, eps)
            rows = ad.sub(1.0, ad.div(ad.dot(a, b), denom))
        else:
            diff = diff if diff is not None else ad.sub(a, b)
            if kind == "d2_euclid":
                rows = ad.l2_norm(diff)
            else:
                rows = ad.sum(ad.mul(diff, diff), axis=1)
                if kind == "d4_mse":
                    rows = ad.scale(rows, 1.0 / a.shape[1])
        term = ad.sum(rows)
        if weight != 1.0:
            term = ad.scale(term, weight)
        total = term if total is None else ad.add(total, term)
    return total


def _check_structure(ga: GradientSet, gb: GradientSet) -> None:
    if len(ga) != len(gb):
        raise StructureError(f"gradient sets have {len(ga)} and {len(gb)} entries")
    for (la, ra, ta), (lb, rb, tb) in zip(ga, gb):
        if (la, ra) != (lb, rb) or ta.shape != tb.shape:
            raise StructureError(
                f"layer mismatch at {la}.{ra} {ta.shape} vs {lb}.{rb} {tb.shape}"
            )


def gradset_distance(gs: GradientSet, gt: GradientSet, spec: DistanceSpec,
                     bias: str = "vector") -> Tensor:
    """Sum of per-layer distances over all parameters."""
    _check_structure(gs, gt)
    total = None
    for (_, _, a), (_, _, b) in zip(gs, gt):
        d = layer_distance(row_view(a, bias), row_view(b, bias), spec)
        total = d if total is None else ad.add(total, d)
    return total


def union_gradient(per_class: Sequence[tuple[GradientSet, int]]) -> GradientSet:
    """Batch-size weighted mean of per-class gradients.

    For a mean-reduced loss this equals the gradient of the concatenated batch,
    so no extra forward/backward pass is needed.
    """
    if not per_class:
        raise ValueError("union_gradient needs at least one class")
    first = per_class[0][0]
    for gset, _ in per_class[1:]:
        _check_structure(first, gset)
    sizes = [int(n) for _, n in per_class]
    total = float(np.sum(sizes))
    equal = len(set(sizes)) == 1
    out = []
    for k, (lid, role, _) in enumerate(first.entries):
        acc = None
        for gset, n in per_class:
            g = gset.entries[k][2]
            if not equal:
                g = ad.scale(g, n)
            acc = g if acc is None else ad.add(acc, g)
        acc = ad.scale(acc, 1.0 / len(per_class) if equal else 1.0 / total)
        out.append((lid, role, acc))
    return GradientSet(out)


@dataclass
class MatchLoss:
    total: Tensor
    intra: float
    inter: float


def multi_level_loss(per_class_s: Sequence[GradientSet], per_class_t: Sequence[GradientSet],
                     spec: DistanceSpec, lam: float,
                     sizes_s: Sequence[int] | None = None,
                     sizes_t: Sequence[int] | None = None) -> MatchLoss:
    """Intra-class distances summed over classes plus ``lam`` times the
    distance between the class-union gradients."""
    if len(per_class_s) != len(per_class_t):
        raise ValueError(
            f"class-count mismatch: {len(per_class_s)} synthetic vs {len(per_class_t)} real"
        )
    intra = intra_loss(per_class_s, per_class_t, spec)
    inter = inter_loss(per_class_s, per_class_t, spec, sizes_s, sizes_t)
    total = intra if lam == 0 else ad.add(intra, ad.scale(inter, lam))
    return MatchLoss(total, intra.item(), inter.item())


def intra_loss(per_class_s, per_class_t, spec: DistanceSpec) -> Tensor:
    total = None
    for gs, gt in zip(per_class_s, per_class_t):
        d = gradset_distance(gs, gt, spec)
        total = d if total is None else ad.add(total, d)
    return total


def inter_loss(per_class_s, per_class_t, spec: DistanceSpec, sizes_s=None, sizes_t=None) -> Tensor:
    sizes_s = sizes_s or [1] * len(per_class_s)
    sizes_t = sizes_t or [1] * len(per_class_t)
    us = union_gradient(list(zip(per_class_s, sizes_s)))
    ut = union_gradient(list(zip(per_class_t, sizes_t)))
    return gradset_distance(us, ut, spec)
