"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation records a node on the active :class:`Graph` (when one is
open and an input requires gradients). ``backward`` replays the tape in
reverse, visiting each node exactly once. All arithmetic is 64-bit and
deterministic: identical inputs and op sequence give bit-identical results.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import DimensionError, UsageError

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_CUBIC = 0.044715


class Tensor:
    """A dense n-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:  # ascontiguousarray would promote 0-d
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other) -> "Tensor":
        return add(self, _as_tensor(other))

    def __radd__(self, other) -> "Tensor":
        return add(_as_tensor(other), self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, _as_tensor(other))

    def __rmul__(self, other) -> "Tensor":
        return mul(_as_tensor(other), self)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Node:
    """One executed op: its inputs, its output, and the local backward rule."""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor,
                 backward_fn: Callable[[np.ndarray], tuple]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Graph:
    """Ordered tape of executed ops; inputs of a node always precede it."""

    _stack: list["Graph"] = []

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Graph":
        Graph._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Graph._stack.pop()

    @staticmethod
    def current() -> "Graph | None":
        return Graph._stack[-1] if Graph._stack else None


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend tape recording (inference / measurement blocks)."""
    Graph._stack.append(None)  # type: ignore[arg-type]
    try:
        yield
    finally:
        Graph._stack.pop()


# Optional multiply-accumulate tally; matmul adds to the innermost counter.
_mac_counters: list[list[int]] = []


@contextmanager
def mac_tally() -> Iterator[list[int]]:
    """Count multiply-accumulates of every matmul executed in the block."""
    counter = [0]
    _mac_counters.append(counter)
    try:
        yield counter
    finally:
        _mac_counters.pop()


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
            backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    out = Tensor(out_data)
    graph = Graph.current()
    if graph is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        graph.nodes.append(Node(op, inputs, out, backward_fn))
    return out


def backward(loss: Tensor, graph: Graph) -> None:
    """Accumulate gradients of ``loss`` into every contributing tensor."""
    if loss.data.size != 1:
        raise UsageError(f"backward requires a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        out_grad = node.output.grad
        if out_grad is None:
            continue
        grads = node.backward_fn(out_grad)
        for tensor, grad in zip(node.inputs, grads):
            if grad is None or not tensor.requires_grad:
                continue
            if tensor.grad is None:
                # Copy: backward rules may hand back views of the output grad.
                tensor.grad = np.array(grad)
            else:
                tensor.grad += grad


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitive ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def back(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _record("add", (a, b), out, back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def back(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", (a, b), out, back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(
            f"matmul requires >=2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul inner extents disagree: {a.data.shape} x {b.data.shape}")
    av, bv = a.data, b.data
    # Batched rows against one shared weight: a single flat gemm.
    flat = av.ndim > 2 and bv.ndim == 2
    if flat:
        out = (av.reshape(-1, av.shape[-1]) @ bv).reshape(av.shape[:-1]
                                                          + (bv.shape[-1],))
    else:
        out = av @ bv
    if _mac_counters:
        batch = int(np.prod(out.shape[:-2], dtype=np.int64)) if out.ndim > 2 else 1
        macs = batch * out.shape[-2] * av.shape[-1] * out.shape[-1]
        for counter in _mac_counters:
            counter[0] += macs

    def back(g):
        ga = gb = None
        if a.requires_grad:
            if flat:
                ga = (g.reshape(-1, g.shape[-1]) @ bv.T).reshape(av.shape)
            else:
                ga = _unbroadcast(g @ bv.swapaxes(-1, -2), av.shape)
        if b.requires_grad:
            if flat:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(av.swapaxes(-1, -2) @ g, bv.shape)
        return ga, gb

    return _record("matmul", (a, b), out, back)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(int(i) for i in np.argsort(axes))

    def back(g):
        return (g.transpose(inverse),) if a.requires_grad else (None,)

    return _record("transpose", (a,), a.data.transpose(axes), back)


def swap_last_axes(a: Tensor) -> Tensor:
    ndim = a.data.ndim
    axes = tuple(range(ndim - 2)) + (ndim - 1, ndim - 2)
    return transpose(a, axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def back(g):
        return (g.reshape(a.data.shape),) if a.requires_grad else (None,)

    return _record("reshape", (a,), out, back)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice ``[start, start+length)`` along ``axis``."""
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = a.data[index].copy()

    def back(g):
        if not a.requires_grad:
            return (None,)
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _record("narrow", (a,), out, back)


def take_columns(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather along the last axis. Indices must be unique."""
    idx = np.asarray(indices, dtype=np.intp)
    out = a.data[..., idx].copy()

    def back(g):
        if not a.requires_grad:
            return (None,)
        full = np.zeros_like(a.data)
        full[..., idx] = g
        return (full,)

    return _record("take_columns", (a,), out, back)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        grads = []
        index = [slice(None)] * g.ndim
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index[axis] = slice(int(start), int(stop))
                grads.append(g[tuple(index)].copy())
            else:
                grads.append(None)
        return tuple(grads)

    return _record("concat", tensors, out, back)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum())

    def back(g):
        return (np.full_like(a.data, float(g)),) if a.requires_grad else (None,)

    return _record("sum_all", (a,), out, back)


# ---------------------------------------------------------------------------
# fused neural-network ops


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    out = exp / exp.sum(axis=-1, keepdims=True)

    def back(g):
        if not a.requires_grad:
            return (None,)
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - dot) * out,)

    return _record("softmax_rows", (a,), out, back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(
            f"layer_norm affine shapes {gain.data.shape}/{bias.data.shape} "
            f"do not match feature width {d}")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    normed = centered * inv
    out = normed * gain.data + bias.data

    def back(g):
        gx = ggain = gbias = None
        lead = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            ggain = (g * normed).sum(axis=lead)
        if bias.requires_grad:
            gbias = g.sum(axis=lead)
        if x.requires_grad:
            gn = g * gain.data
            gx = inv * (gn - gn.mean(axis=-1, keepdims=True)
                        - normed * (gn * normed).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _record("layer_norm", (x, gain, bias), out, back)


def gelu(x: Tensor) -> Tensor:
    """GELU with the tanh approximation."""
    cube = x.data * x.data * x.data
    inner = _SQRT_2_OVER_PI * (x.data + _GELU_CUBIC * cube)
    tanh = np.tanh(inner)
    out = 0.5 * x.data * (1.0 + tanh)

    def back(g):
        if not x.requires_grad:
            return (None,)
        sech2 = 1.0 - tanh * tanh
        dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_CUBIC * x.data * x.data)
        return (g * (0.5 * (1.0 + tanh) + 0.5 * x.data * sech2 * dinner),)

    return _record("gelu", (x,), out, back)


def scale_columns(x: Tensor, a: Tensor) -> Tensor:
    """Multiply feature column ``j`` of ``x`` by ``a[j]``."""
    if a.data.ndim != 1 or x.data.shape[-1] != a.data.shape[0]:
        raise DimensionError(
            f"scale_columns: feature width {x.data.shape} does not match "
            f"gate length {a.data.shape}")
    out = x.data * a.data

    def back(g):
        gx = g * a.data if x.requires_grad else None
        ga = (g * x.data).sum(axis=tuple(range(g.ndim - 1))) if a.requires_grad else None
        return gx, ga

    return _record("scale_columns", (x, a), out, back)


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-softmax of the true class over a batch."""
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy expects 2-d logits, got {logits.shape}")
    y = np.asarray(labels, dtype=np.intp)
    b, c = logits.data.shape
    if y.shape != (b,):
        raise DimensionError(f"labels shape {y.shape} does not match batch {b}")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise UsageError(f"labels must lie in [0, {c}), got range "
                         f"[{y.min()}, {y.max()}]")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logprobs = shifted - logsumexp
    out = np.asarray(-logprobs[np.arange(b), y].mean())

    def back(g):
        if not logits.requires_grad:
            return (None,)
        grad = np.exp(logprobs)
        grad[np.arange(b), y] -= 1.0
        return (grad * (float(g) / b),)

    return _record("cross_entropy", (logits,), out, back)


def l1_penalty(gates: Sequence[Tensor], lam: float) -> Tensor:
    """``lam`` times the summed absolute value of every gate entry."""
    if lam < 0:
        raise UsageError(f"l1 coefficient must be >= 0, got {lam}")
    gates = tuple(gates)
    total = sum(float(np.abs(t.data).sum()) for t in gates)
    out = np.asarray(lam * total)

    def back(g):
        scale = lam * float(g)
        return tuple(scale * np.sign(t.data) if t.requires_grad else None
                     for t in gates)

    return _record("l1_penalty", gates, out, back)
