"""Network architectures and their parameter containers.

Architectures are small, normalization-free stand-ins:

* ``logistic``      flatten -> linear(C)
* ``mlp``           flatten -> linear(hidden) -> relu -> linear(C)
* ``convnet_lite``  depth x [conv3x3(width, pad 1) -> relu -> avgpool 2] -> linear(C)
* ``lenet_lite``    conv5x5(6, pad 2) -> relu -> avgpool 2 -> conv5x5(16) -> relu
                    -> avgpool 2 -> linear(84) -> relu -> linear(C)

Linear weights are stored as (out, in), conv kernels as (out, in, kh, kw).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

ARCHS = ("logistic", "mlp", "convnet_lite", "lenet_lite")


@dataclass(frozen=True)
class LayerDef:
    layer_id: str
    kind: str  # "linear" | "conv"
    weight_shape: tuple[int, ...]
    padding: int = 0

    @property
    def fan_in(self) -> int:
        return int(np.prod(self.weight_shape[1:]))


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    input_shape: tuple[int, ...]
    num_classes: int
    hidden: int = 128
    width: int = 32
    depth: int = 3

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.arch in ("convnet_lite", "lenet_lite") and len(self.input_shape) != 3:
            raise ValueError(f"{self.arch} needs an image input shape (C, H, W)")
        self.layers()  # validates that the spatial dims survive pooling

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    def layers(self) -> list[LayerDef]:
        c = self.num_classes
        if self.arch == "logistic":
            return [LayerDef("fc", "linear", (c, self.input_dim))]
        if self.arch == "mlp":
            return [
                LayerDef("fc1", "linear", (self.hidden, self.input_dim)),
                LayerDef("fc2", "linear", (c, self.hidden)),
            ]
        cin, h, w = self.input_shape
        if self.arch == "convnet_lite":
            out = []
            for i in range(self.depth):
                out.append(LayerDef(f"conv{i + 1}", "conv", (self.width, cin, 3, 3), padding=1))
                cin, h, w = self.width, h // 2, w // 2
                if h == 0 or w == 0:
                    raise ValueError(f"input {self.input_shape} too small for depth {self.depth}")
            out.append(LayerDef("fc", "linear", (c, cin * h * w)))
            return out
        # lenet_lite
        h, w = h // 2, w // 2
        h, w = (h - 4) // 2, (w - 4) // 2
        if h <= 0 or w <= 0:
            raise ValueError(f"input {self.input_shape} too small for lenet_lite")
        return [
            LayerDef("conv1", "conv", (6, cin, 5, 5), padding=2),
            LayerDef("conv2", "conv", (16, 6, 5, 5), padding=0),
            LayerDef("fc1", "linear", (84, 16 * h * w)),
            LayerDef("fc2", "linear", (c, 84)),
        ]

    def to_dict(self) -> dict:
        return {
            "arch": self.arch, "input_shape": list(self.input_shape),
            "num_classes": self.num_classes, "hidden": self.hidden,
            "width": self.width, "depth": self.depth,
        }


@dataclass
class ParamSet:
    """Ordered (layer_id, role, tensor) entries; role is "weight" or "bias"."""

    entries: list[tuple[str, str, Tensor]] = field(default_factory=list)

    def __iter__(self) -> Iterator[tuple[str, str, Tensor]]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def tensors(self) -> list[Tensor]:
        return [t for _, _, t in self.entries]

    def keys(self) -> list[tuple[str, str]]:
        return [(lid, role) for lid, role, _ in self.entries]

    def get(self, layer_id: str, role: str) -> Tensor:
        for lid, r, t in self.entries:
            if lid == layer_id and r == role:
                return t
        raise KeyError((layer_id, role))

    def with_tensors(self, tensors: Sequence, requires_grad: bool = True) -> "ParamSet":
        if len(tensors) != len(self.entries):
            raise ValueError("tensor count does not match parameter structure")
        out = []
        for (lid, role, old), new in zip(self.entries, tensors):
            arr = new.data if isinstance(new, Tensor) else np.asarray(new)
            if arr.shape != old.shape:
                raise ShapeError(f"{lid}.{role}: expected {old.shape}, got {arr.shape}")
            out.append((lid, role, Tensor(arr, requires_grad=requires_grad)))
        return ParamSet(out)

    def arrays(self) -> list[np.ndarray]:
        return [t.data for t in self.tensors()]


def init_params(spec: ModelSpec, seed: int, dtype=None) -> ParamSet:
    """Kaiming-normal weights (std sqrt(2 / fan_in)) and zero biases."""
    rng = np.random.default_rng(seed)
    dtype = dtype or ad.get_default_dtype()
    entries = []
    for layer in spec.layers():
        std = np.sqrt(2.0 / layer.fan_in)
        w = rng.normal(0.0, std, size=layer.weight_shape).astype(dtype)
        b = np.zeros(layer.weight_shape[0], dtype=dtype)
        entries.append((layer.layer_id, "weight", Tensor(w, requires_grad=True)))
        entries.append((layer.layer_id, "bias", Tensor(b, requires_grad=True)))
    return ParamSet(entries)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, ad.transpose(w)), b)


def _conv(x: Tensor, w: Tensor, b: Tensor, padding: int) -> Tensor:
    y = ad.conv2d(x, w, stride=1, padding=padding)
    return ad.add(y, ad.reshape(b, (1, b.shape[0], 1, 1)))


def _check_batch(spec: ModelSpec, batch: Tensor) -> None:
    if tuple(batch.shape[1:]) != spec.input_shape:
        raise ShapeError(
            f"batch shape {batch.shape} does not match model input shape {spec.input_shape}"
        )


def features(spec: ModelSpec, params: ParamSet, batch) -> Tensor:
    """Penultimate activations (the input to the final linear layer)."""
    batch = batch if isinstance(batch, Tensor) else Tensor(batch)
    _check_batch(spec, batch)
    p = {(lid, role): t for lid, role, t in params}
    if spec.arch == "logistic":
        return ad.flatten(batch)
    if spec.arch == "mlp":
        return ad.relu(_linear(ad.flatten(batch), p["fc1", "weight"], p["fc1", "bias"]))
    layers = spec.layers()
    x = batch
    if spec.arch == "convnet_lite":
        for layer in layers[:-1]:
            x = _conv(x, p[layer.layer_id, "weight"], p[layer.layer_id, "bias"], layer.padding)
            x = ad.avg_pool2d(ad.relu(x), 2)
        return ad.flatten(x)
    for layer in layers[:2]:
        x = _conv(x, p[layer.layer_id, "weight"], p[layer.layer_id, "bias"], layer.padding)
        x = ad.avg_pool2d(ad.relu(x), 2)
    return ad.relu(_linear(ad.flatten(x), p["fc1", "weight"], p["fc1", "bias"]))


def forward(spec: ModelSpec, params: ParamSet, batch) -> Tensor:
    """Logits [N, num_classes]; differentiable w.r.t. both params and batch."""
    head = spec.layers()[-1].layer_id
    feats = features(spec, params, batch)
    return _linear(feats, params.get(head, "weight"), params.get(head, "bias"))


def loss(spec: ModelSpec, params: ParamSet, images, labels) -> Tensor:
    return ad.softmax_cross_entropy(forward(spec, params, images), labels)


def predict(spec: ModelSpec, params: ParamSet, images: np.ndarray, chunk: int = 1000) -> np.ndarray:
    """Argmax class per sample, evaluated without building a graph."""
    out = []
    with ad.no_grad():
        for i in range(0, len(images), chunk):
            logits = forward(spec, params, Tensor(images[i:i + chunk]))
            out.append(np.argmax(logits.data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
