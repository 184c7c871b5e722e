"""Reverse-mode automatic differentiation over numpy float32 buffers.

Every primitive records a :class:`Node` holding its operands and a
vector-Jacobian product written in terms of other primitives, so the
backward pass can itself be recorded (``create_graph=True``) when a loss
depends on a gradient (GradMask, RRR, double-backward relevance).
"""

from __future__ import annotations

import itertools
import threading
import weakref
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float32

GELU_C = 0.7978845608
GELU_A = 0.044715
LAYERNORM_EPS = 1e-6


class TensorError(ValueError):
    """Construction or shape contract violated."""


class DimensionError(TensorError):
    pass


class ContractError(TensorError):
    pass


_seq = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextmanager
def enable_grad():
    prev = grad_enabled()
    _state.enabled = True
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    """One recorded primitive application."""

    __slots__ = ("kind", "inputs", "vjp", "seq", "_out", "__weakref__")

    def __init__(self, kind: str, inputs: tuple, vjp: Callable, out: "Tensor"):
        self.kind = kind
        self.inputs = inputs
        self.vjp = vjp
        self.seq = next(_seq)
        self._out = weakref.ref(out)

    @property
    def output(self) -> "Tensor | None":
        return self._out()

    def __repr__(self) -> str:
        return f"Node({self.kind}, seq={self.seq})"


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DTYPE
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

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
    def node(self) -> Node | None:
        return self._node

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return detach(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return hadamard(self, _as_tensor(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return hadamard(self, power(_as_tensor(other, self), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self):
        return transpose_lastdims(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        if axis is None:
            return sum_all(self)
        return sum_axis(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            return mean_all(self)
        return mean_axis(self, axis, keepdims)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def tensor_new(shape: Sequence[int], data, requires_grad: bool = False) -> Tensor:
    """Build a tensor from a shape and flat row-major data."""
    flat = np.asarray(data, dtype=DTYPE).reshape(-1)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != flat.size:
        raise TensorError(f"data length {flat.size} does not match shape {shape}")
    return Tensor(flat.reshape(shape), requires_grad=requires_grad)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.asarray(data, dtype=DTYPE), requires_grad=requires_grad)


def constant(arr: np.ndarray, like: Tensor) -> Tensor:
    return Tensor(np.asarray(arr, dtype=like.data.dtype))


def detach(t: Tensor) -> Tensor:
    out = Tensor(t.data.copy())
    return out


def _record(kind: str, out_data: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    out = Tensor(out_data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(kind, inputs, vjp, out)
    return out


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and g.shape[i + lead] != 1
    )
    summed = sum_axis(g, axes, keepdims=True) if axes else g
    return reshape(summed, shape)


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"incompatible shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shapes {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise DimensionError(f"matmul batch shapes {a.shape} @ {b.shape}") from exc

    def vjp(g, out):
        ga = _unbroadcast(matmul(g, transpose_lastdims(b)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(matmul(transpose_lastdims(a), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _record("matmul", np.matmul(a.data, b.data), (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b)

    def vjp(g, out):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _record("add", a.data + b.data, (a, b), vjp)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b)

    def vjp(g, out):
        return (
            _unbroadcast(hadamard(g, b), a.shape) if a.requires_grad else None,
            _unbroadcast(hadamard(g, a), b.shape) if b.requires_grad else None,
        )

    return _record("hadamard", a.data * b.data, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def vjp(g, out):
        return (scale(g, c),)

    return _record("scale", a.data * a.data.dtype.type(c), (a,), vjp)


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)

    def vjp(g, out):
        if p == 1.0:
            return (g,)
        return (hadamard(g, scale(power(a, p - 1.0), p)),)

    with np.errstate(divide="ignore"):
        data = np.power(a.data, a.data.dtype.type(p))
    return _record("power", data, (a,), vjp)


def softmax_lastdim(a: Tensor) -> Tensor:
    if a.ndim == 0 or a.shape[-1] == 0:
        raise DimensionError("softmax over an empty axis")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def vjp(g, out):
        gs = hadamard(g, out)
        return (add(gs, scale(hadamard(out, sum_axis(gs, -1, keepdims=True)), -1.0)),)

    return _record("softmax_lastdim", data, (a,), vjp)


def log_softmax_lastdim(a: Tensor) -> Tensor:
    if a.ndim == 0 or a.shape[-1] == 0:
        raise DimensionError("log-softmax over an empty axis")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    data = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def vjp(g, out):
        p = softmax_lastdim(a)
        return (add(g, scale(hadamard(p, sum_axis(g, -1, keepdims=True)), -1.0)),)

    return _record("log_softmax_lastdim", data, (a,), vjp)


def layernorm(a: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalise over the last axis (no affine part)."""
    if a.ndim == 0 or a.shape[-1] == 0:
        raise DimensionError("layernorm over an empty axis")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    data = xc / np.sqrt(var + a.data.dtype.type(eps))

    def vjp(g, out):
        # d/dx = inv_std * (g - mean(g) - y * mean(g*y))
        xc_t = add(a, scale(mean_axis(a, -1, keepdims=True), -1.0))
        var_t = mean_axis(hadamard(xc_t, xc_t), -1, keepdims=True)
        inv = power(add(var_t, constant(np.asarray(eps), a)), -0.5)
        y = hadamard(xc_t, inv)
        inner = add(
            add(g, scale(mean_axis(g, -1, keepdims=True), -1.0)),
            scale(hadamard(y, mean_axis(hadamard(g, y), -1, keepdims=True)), -1.0),
        )
        return (hadamard(inner, inv),)

    return _record("layernorm", data, (a,), vjp)


def tanh(a: Tensor) -> Tensor:
    def vjp(g, out):
        return (hadamard(g, add(constant(np.ones(()), a), scale(hadamard(out, out), -1.0))),)

    return _record("tanh", np.tanh(a.data), (a,), vjp)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    dt = x.dtype.type
    t = np.tanh(dt(GELU_C) * (x + dt(GELU_A) * x * x * x))
    data = dt(0.5) * x * (dt(1.0) + t)

    def vjp(g, out):
        x2 = hadamard(a, a)
        inner = scale(add(a, scale(hadamard(x2, a), GELU_A)), GELU_C)
        tt = tanh(inner)
        one = constant(np.ones(()), a)
        dinner = scale(add(one, scale(x2, 3.0 * GELU_A)), GELU_C)
        sech2 = add(one, scale(hadamard(tt, tt), -1.0))
        d = add(scale(add(one, tt), 0.5), scale(hadamard(hadamard(a, sech2), dinner), 0.5))
        return (hadamard(g, d),)

    return _record("gelu", data, (a,), vjp)


def positive_part(a: Tensor) -> Tensor:
    mask = (a.data > 0).astype(a.data.dtype)

    def vjp(g, out):
        return (hadamard(g, constant(mask, a)),)

    return _record("positive_part", a.data * mask, (a,), vjp)


def max_lastdim(a: Tensor, keepdims: bool = False) -> Tensor:
    """Maximum over the last axis; the gradient goes to the first maximal entry."""
    if a.ndim == 0 or a.shape[-1] == 0:
        raise DimensionError("max over an empty axis")
    idx = a.data.argmax(axis=-1)
    onehot = np.zeros_like(a.data)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    data = a.data.max(axis=-1, keepdims=keepdims)

    def vjp(g, out):
        gk = g if keepdims else reshape(g, g.shape + (1,))
        return (hadamard(gk, constant(onehot, a)),)

    return _record("max_lastdim", data, (a,), vjp)


def sum_all(a: Tensor) -> Tensor:
    def vjp(g, out):
        return (hadamard(constant(np.ones(a.shape), a), g),)

    return _record("sum_all", np.asarray(a.data.sum(dtype=a.data.dtype)), (a,), vjp)


def mean_all(a: Tensor) -> Tensor:
    if a.size == 0:
        raise DimensionError("mean of an empty tensor")
    n = a.size

    def vjp(g, out):
        return (hadamard(constant(np.full(a.shape, 1.0 / n), a), g),)

    return _record("mean_all", np.asarray(a.data.mean(dtype=a.data.dtype)), (a,), vjp)


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum_axis(a: Tensor, axis, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g, out):
        kept = g if keepdims else reshape(g, np.expand_dims(g.data, axes).shape)
        return (hadamard(constant(np.ones(a.shape), a), kept),)

    return _record("sum_axis", data, (a,), vjp)


def mean_axis(a: Tensor, axis, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes]))
    if n == 0:
        raise DimensionError("mean over an empty axis")
    return scale(sum_axis(a, axes, keepdims), 1.0 / n)


def log(a: Tensor) -> Tensor:
    def vjp(g, out):
        return (hadamard(g, power(a, -1.0)),)

    with np.errstate(divide="ignore"):
        data = np.log(a.data)
    return _record("log", data, (a,), vjp)


def exp(a: Tensor) -> Tensor:
    def vjp(g, out):
        return (hadamard(g, out),)

    return _record("exp", np.exp(a.data), (a,), vjp)


def transpose_lastdims(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise DimensionError("transpose needs at least two axes")

    def vjp(g, out):
        return (transpose_lastdims(g),)

    return _record("transpose_lastdims", np.swapaxes(a.data, -1, -2), (a,), vjp)


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"bad permutation {axes} for {a.ndim} axes")
    inverse = tuple(np.argsort(axes))

    def vjp(g, out):
        return (permute(g, inverse),)

    return _record("permute", np.transpose(a.data, axes), (a,), vjp)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc

    def vjp(g, out):
        return (reshape(g, a.shape),)

    return _record("reshape", data, (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise DimensionError("concat of nothing")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    ax = axis % tensors[0].ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def vjp(g, out):
        grads = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                grads.append(None)
                continue
            index = [slice(None)] * g.ndim
            index[ax] = slice(int(lo), int(hi))
            grads.append(slice_(g, tuple(index)))
        return tuple(grads)

    return _record("concat", data, tensors, vjp)


def slice_(a: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing; the adjoint scatters into zeros."""
    if not isinstance(index, tuple):
        index = (index,)
    for ix in index:
        if not isinstance(ix, (int, slice, type(Ellipsis), type(None), np.integer)):
            raise DimensionError("slice supports basic indexing only")
    try:
        data = a.data[index]
    except IndexError as exc:
        raise DimensionError(str(exc)) from exc

    def vjp(g, out):
        return (_embed(g, a.shape, index),)

    return _record("slice", np.array(data), (a,), vjp)


def _embed(g: Tensor, shape: tuple[int, ...], index) -> Tensor:
    data = np.zeros(shape, dtype=g.data.dtype)
    data[index] = g.data.reshape(np.shape(data[index]))

    def vjp(gg, out):
        return (slice_(gg, index),)

    return _record("embed", data, (g,), vjp)


PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "hadamard": hadamard,
    "scale": scale,
    "softmax_lastdim": softmax_lastdim,
    "log_softmax_lastdim": log_softmax_lastdim,
    "layernorm": layernorm,
    "gelu": gelu,
    "tanh": tanh,
    "positive_part": positive_part,
    "max_lastdim": max_lastdim,
    "mean_all": mean_all,
    "sum_all": sum_all,
    "sum_axis": sum_axis,
    "mean_axis": mean_axis,
    "log": log,
    "exp": exp,
    "power": power,
    "transpose_lastdims": transpose_lastdims,
    "permute": permute,
    "reshape": reshape,
    "concat": concat,
    "slice": slice_,
}


def forward_primitive(kind: str, operands: Sequence[Tensor], *args, **kwargs) -> Tensor:
    """Apply a primitive by name. ``concat`` takes the operand list itself."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ContractError(f"unknown primitive {kind!r}") from None
    if kind == "concat":
        return fn(list(operands), *args, **kwargs)
    return fn(*operands, *args, **kwargs)


# ------------------------------------------------------------------ backward


@dataclass
class Tape:
    """Recorded primitive applications reachable from a root, oldest first."""

    nodes: list[Node] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Node] = []
        stack = [root]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node.inputs)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)


def _run_backward(root: Tensor, targets: Sequence[Tensor] | None, create_graph: bool):
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    tape = Tape.from_root(root)

    live: set[int] | None = None
    if targets is not None:
        # restrict the sweep to nodes lying on a path from a target to the root
        live = {id(t) for t in targets}
        for node in tape.nodes:
            if any(id(x) in live for x in node.inputs):
                out = node.output
                if out is not None:
                    live.add(id(out))

    grads: dict[int, Tensor] = {}
    keep: dict[int, Tensor] = {}
    seed = Tensor(np.ones(root.shape, dtype=root.data.dtype))
    grads[id(root)] = seed
    keep[id(root)] = root

    ctx = enable_grad() if create_graph else no_grad()
    with ctx:
        for node in reversed(tape.nodes):
            out = node.output
            if out is None or id(out) not in grads:
                continue
            if live is not None and id(out) not in live:
                continue
            g = grads[id(out)]
            in_grads = node.vjp(g, out)
            for x, gx in zip(node.inputs, in_grads):
                if gx is None or not x.requires_grad:
                    continue
                if live is not None and id(x) not in live:
                    continue
                key = id(x)
                if key in grads:
                    grads[key] = add(grads[key], gx)
                else:
                    grads[key] = gx
                    keep[key] = x
    return grads, keep


def backward(root: Tensor) -> None:
    """Accumulate d(root)/dt into ``t.grad`` for every reachable tensor that requires grad."""
    grads, keep = _run_backward(root, None, create_graph=False)
    for key, g in grads.items():
        t = keep[key]
        if not t.requires_grad:
            continue
        if t.grad is None:
            t.grad = g.data.copy()
        else:
            t.grad = t.grad + g.data


def grad(
    root: Tensor, inputs: Sequence[Tensor], create_graph: bool = False
) -> list[Tensor]:
    """Return d(root)/d(inputs) without touching ``.grad``.

    Inputs the root does not depend on get zero gradients. With
    ``create_graph`` the returned tensors are themselves differentiable.
    """
    inputs = list(inputs)
    grads, _ = _run_backward(root, inputs, create_graph)
    out = []
    for t in inputs:
        g = grads.get(id(t))
        out.append(g if g is not None else Tensor(np.zeros(t.shape, dtype=t.data.dtype)))
    return out


def grad_check(
    fn: Callable[[Tensor], Tensor], x: Tensor, epsilon: float = 1e-3
) -> float:
    """Max relative error between the analytic gradient and central differences.

    Both sides are evaluated on float64 copies of the input so that rounding
    noise stays well below the tolerances used with float32 models.
    """
    xa = Tensor(x.data.astype(np.float64), requires_grad=True, dtype=np.float64)
    y = fn(xa)
    if y.size != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    (analytic,) = grad(y, [xa])
    analytic = analytic.data.astype(np.float64).reshape(-1)

    base = x.data.astype(np.float64).reshape(-1)
    numeric = np.empty_like(base)
    # inputs keep requires_grad so functions that differentiate internally still work
    for i in range(base.size):
        xp = base.copy()
        xp[i] += epsilon
        xm = base.copy()
        xm[i] -= epsilon
        fp = fn(Tensor(xp.reshape(x.shape), requires_grad=True, dtype=np.float64)).item()
        fm = fn(Tensor(xm.reshape(x.shape), requires_grad=True, dtype=np.float64)).item()
        numeric[i] = (fp - fm) / (2 * epsilon)
    err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-8)
    return float(err.max()) if err.size else 0.0
