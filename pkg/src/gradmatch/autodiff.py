"""Dense tensors with reverse-mode automatic differentiation.

Every backward rule is expressed in terms of the differentiable ops defined
here, so a gradient computed with ``create_graph=True`` is itself a graph node
and can be differentiated again (reverse-over-reverse).  That is what makes the
meta-gradient of a gradient-matching loss with respect to the input images
available without hand-written second-order rules.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "Node", "GraphError", "ShapeError", "NonFiniteError", "LabelError",
    "EmptyInputError", "OracleError", "no_grad", "enable_grad", "is_grad_enabled",
    "set_default_dtype", "get_default_dtype", "tensor", "add", "sub", "mul", "div",
    "neg", "scale", "matmul", "transpose", "permute", "reshape", "flatten",
    "broadcast_to", "sum_to", "sum", "mean", "exp", "log", "sqrt", "reciprocal",
    "relu", "avg_pool2d", "conv2d", "l2_norm", "dot", "softmax_cross_entropy",
    "grad", "finite_diff_gradient", "graph_nodes",
]


class GraphError(RuntimeError):
    """An input is not reachable from the differentiated output."""


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class LabelError(ValueError):
    pass


class EmptyInputError(ValueError):
    pass


class OracleError(ArithmeticError):
    pass


_GRAD_ENABLED = True
_DEFAULT_DTYPE = np.dtype(np.float64)


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def enable_grad(mode: bool = True):
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = mode
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def no_grad():
    """Context manager that stops graph recording."""
    return enable_grad(False)


def set_default_dtype(dtype) -> None:
    """Switch the default floating precision (float64 unless opted out)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


class Tensor:
    """An array that may be a node of a computation graph.

    Leaves are created directly; interior nodes are produced by the op
    functions of this module and remember their parents plus a backward rule
    mapping the output cotangent to one cotangent per parent.
    """

    __slots__ = ("data", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def parents(self) -> tuple["Tensor", ...]:
        return self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    @property
    def T(self):
        return transpose(self)


# The graph and the value container are the same object.
Node = Tensor


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.dtype.kind != "f":
        arr = arr.astype(_DEFAULT_DTYPE)
    return Tensor(arr)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------- elementwise

def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return sum_to(g, a.shape), sum_to(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return sum_to(g, a.shape), neg(sum_to(g, b.shape))

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        return sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape)

    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data * b.data
    return _make(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")

    def backward(g):
        ga = div(g, b)
        gb = neg(div(mul(ga, a), b))
        return sum_to(ga, a.shape), sum_to(gb, b.shape)

    with np.errstate(all="ignore"):  # non-finite results raise in _make
        out = a.data / b.data
    return _make(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (neg(g),), "neg")


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    a = _as_tensor(a)
    c = float(c)
    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data * c
    return _make(out, (a,), lambda g: (scale(g, c),), "scale")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(all="ignore"):  # non-finite results raise in _make
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (mul(g, exp(a)),), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    if (a.data <= 0).any():
        raise NonFiniteError("log of non-positive value")
    with np.errstate(all="ignore"):  # non-finite results raise in _make
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (div(g, a),), "log")


def reciprocal(a) -> Tensor:
    """1/x with the value and derivative at exactly 0 defined as 0."""
    a = _as_tensor(a)
    zero = a.data == 0
    out = np.divide(1.0, a.data, out=np.zeros_like(a.data), where=~zero)

    def backward(g):
        r = reciprocal(a)
        return (neg(mul(g, mul(r, r))),)

    return _make(out, (a,), backward, "reciprocal")


def sqrt(a) -> Tensor:
    """Square root; the derivative at 0 is taken as 0 (norm of a zero row)."""
    a = _as_tensor(a)
    if (a.data < 0).any():
        raise NonFiniteError("sqrt of negative value")

    def backward(g):
        return (scale(mul(g, reciprocal(sqrt(a))), 0.5),)

    with np.errstate(all="ignore"):  # non-finite results raise in _make
        out = np.sqrt(a.data)
    return _make(out, (a,), backward, "sqrt")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = (a.data > 0).astype(a.data.dtype)
    const = Tensor(mask)
    return _make(a.data * mask, (a,), lambda g: (mul(g, const),), "relu")


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _make(out, (a,), lambda g: (reshape(g, a.shape),), "reshape")


def flatten(a) -> Tensor:
    """Collapse all but the leading (batch) dimension."""
    a = _as_tensor(a)
    return reshape(a, (a.shape[0], -1))


def permute(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (permute(g, inverse),), "permute")


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return permute(a, (1, 0))


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: {a.shape} -> {shape}") from None
    return _make(out, (a,), lambda g: (sum_to(g, a.shape),), "broadcast_to")


def sum_to(a, shape) -> Tensor:
    """Sum a broadcast result back down to ``shape`` (adjoint of broadcast_to)."""
    a = _as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and a.shape[i + lead] != 1
    )
    out = a.data.sum(axis=axes, keepdims=True)
    out = out.reshape(shape)
    return _make(out, (a,), lambda g: (broadcast_to(g, a.shape),), "sum_to")


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    if a.size == 0:
        raise EmptyInputError("sum over an empty tensor")
    axes = _norm_axes(axis, a.ndim)
    kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        return (broadcast_to(reshape(g, kept), a.shape),)

    return _make(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if a.size == 0:
        raise EmptyInputError("mean over an empty tensor")
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")

    def backward(g):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data @ b.data
    return _make(out, (a, b), backward, "matmul")


def l2_norm(a) -> Tensor:
    """Euclidean norm of each row of a matrix."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"l2_norm expects a matrix, got shape {a.shape}")
    return sqrt(sum(mul(a, a), axis=1))


def dot(a, b) -> Tensor:
    """Row-wise inner products of two equally shaped matrices."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"dot: row shapes {a.shape} and {b.shape} differ")
    return sum(mul(a, b), axis=1)


# ---------------------------------------------------------------- convolution

def _im2col(a: Tensor, kh: int, kw: int, stride: int, padding: int) -> Tensor:
    n, c, h, w = a.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    x = a.data
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)

    def backward(g):
        return (_col2im(g, a.shape, kh, kw, stride, padding),)

    return _make(np.ascontiguousarray(cols), (a,), backward, "im2col")


def _col2im(g: Tensor, shape, kh: int, kw: int, stride: int, padding: int) -> Tensor:
    n, c, h, w = shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    cols = g.data.reshape(n, ho, wo, c, kh, kw)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g.data.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + w]

    def backward(gg):
        return (_im2col(gg, kh, kw, stride, padding),)

    return _make(np.ascontiguousarray(out), (g,), backward, "col2im")


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct cross-correlation; kernel layout is (out, in, kh, kw)."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape}, {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    if stride < 1:
        raise ShapeError("conv2d: stride must be >= 1")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    cols = _im2col(x, kh, kw, stride, padding)
    out = matmul(cols, transpose(reshape(kernel, (cout, cin * kh * kw))))
    return permute(reshape(out, (n, ho, wo, cout)), (0, 3, 1, 2))


def avg_pool2d(a, k: int = 2) -> Tensor:
    """Non-overlapping k x k mean pooling; trailing rows/cols that do not fill a window are dropped."""
    a = _as_tensor(a)
    if a.ndim != 4:
        raise ShapeError(f"avg_pool2d expects NCHW input, got {a.shape}")
    n, c, h, w = a.shape
    ho, wo = h // k, w // k
    if ho == 0 or wo == 0:
        raise EmptyInputError(f"avg_pool2d: window {k} exceeds input {h}x{w}")
    blocks = a.data[:, :, :ho * k, :wo * k].reshape(n, c, ho, k, wo, k)
    out = blocks.mean(axis=(3, 5))

    def backward(g):
        return (_pool_adjoint(g, k, a.shape),)

    return _make(out, (a,), backward, "avg_pool2d")


def _pool_adjoint(g: Tensor, k: int, shape) -> Tensor:
    n, c, h, w = shape
    up = np.repeat(np.repeat(g.data, k, axis=2), k, axis=3) / (k * k)
    out = np.zeros(shape, dtype=g.data.dtype)
    out[:, :, :up.shape[2], :up.shape[3]] = up
    return _make(out, (g,), lambda gg: (avg_pool2d(gg, k),), "avg_unpool2d")


# ---------------------------------------------------------------- loss

def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [N, C], got {logits.shape}")
    n, c = logits.shape
    if n < 1:
        raise EmptyInputError("cross entropy over an empty batch")
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.dtype.kind not in "iu" or (labels < 0).any() or (labels >= c).any():
        raise LabelError(f"labels must be integers in [0, {c})")
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    z = sub(logits, shift)
    onehot = np.zeros((n, c), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1.0
    lse = log(sum(exp(z), axis=1))
    picked = sum(mul(z, Tensor(onehot)), axis=1)
    return mean(sub(lse, picked))


# ---------------------------------------------------------------- differentiation

def graph_nodes(output: Tensor) -> list[Tensor]:
    """Nodes reachable from ``output`` in topological order (parents first).

    Raises GraphError if a cycle is encountered.
    """
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        if state.get(key) == 2:
            continue
        if state.get(key) == 1:
            raise GraphError("computation graph contains a cycle")
        state[key] = 1
        stack.append((node, True))
        for p in node._parents:
            s = state.get(id(p))
            if s == 1:
                raise GraphError("computation graph contains a cycle")
            if s is None:
                stack.append((p, False))
    return order


def grad(output: Tensor, inputs: Iterable[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to each of ``inputs``.

    With ``create_graph=True`` the returned tensors are graph nodes that can be
    differentiated again.
    """
    inputs = list(inputs)
    if output.size != 1:
        raise ValueError(f"grad requires a scalar output, got shape {output.shape}")
    order = graph_nodes(output) if output.requires_grad else [output]
    reachable = {id(n) for n in order}
    for i, x in enumerate(inputs):
        if id(x) not in reachable or not x.requires_grad:
            raise GraphError(f"input {i} ({x!r}) is not reachable from the output")

    grads: dict[int, Tensor] = {id(output): Tensor(np.ones_like(output.data))}
    with enable_grad(create_graph):
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else add(grads[key], pg)
    return [grads[id(x)] for x in inputs]


def finite_diff_gradient(f: Callable[[Tensor], object], x, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, one entry at a time."""
    if h <= 0:
        raise ValueError("step h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    out = np.zeros_like(base)

    def evaluate(arr, idx):
        v = f(Tensor(arr))
        v = float(v.data.reshape(-1)[0]) if isinstance(v, Tensor) else float(v)
        if not np.isfinite(v):
            raise OracleError(f"function value is non-finite when perturbing entry {idx}")
        return v

    for idx in np.ndindex(base.shape):
        orig = base[idx]
        base[idx] = orig + h
        fp = evaluate(base.copy(), idx)
        base[idx] = orig - h
        fm = evaluate(base.copy(), idx)
        base[idx] = orig
        out[idx] = (fp - fm) / (2 * h)
    return Tensor(out)
