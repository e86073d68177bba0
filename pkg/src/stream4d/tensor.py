"""Dense float64 tensors with reverse-mode automatic differentiation.

A :class:`Tape` records every differentiable operation whose inputs
participate in it; :meth:`Tape.backward` replays the records in reverse to
accumulate gradients for every leaf. Tensors that never touch a tape are
plain immutable array wrappers and all operations on them reduce to the
equivalent numpy calls.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def layer_norm_np(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-6):
    """Row-wise layer normalization over the last axis (shared forward path)."""
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * gamma + beta, xhat, inv


def gelu_np(x: np.ndarray) -> np.ndarray:
    """tanh-approximated GELU (shared forward path)."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x**3)))


def softmax_rows_np(x: np.ndarray, visible: np.ndarray | None = None) -> np.ndarray:
    """Row softmax with optional boolean visibility; hidden entries are exactly 0.

    Raises ValueError when a row has no visible entry (degenerate row).
    """
    if visible is not None:
        if visible.shape != x.shape:
            raise ValueError(f"mask shape {visible.shape} does not match {x.shape}")
        if not visible.any(axis=-1).all():
            raise ValueError("softmax row has no visible entries")
        x = np.where(visible, x, -np.inf)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


class Tensor:
    """Immutable row-major float64 array, optionally attached to a tape node."""

    __slots__ = ("data", "requires_grad", "node_id", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.tape: "Tape | None" = None

    @staticmethod
    def _wrap(arr) -> "Tensor":
        # wraps freshly computed op outputs; no copy, immutable by convention
        t = Tensor.__new__(Tensor)
        t.data = np.asarray(arr, dtype=np.float64)
        t.requires_grad = False
        t.node_id = None
        t.tape = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __repr__(self):
        tag = "" if self.node_id is None else f", node={self.node_id}"
        return f"Tensor(shape={self.data.shape}{tag})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("op", "input_ids", "out_id", "backward")

    def __init__(self, op, input_ids, out_id, backward):
        self.op = op
        self.input_ids = input_ids
        self.out_id = out_id
        self.backward = backward


class Tape:
    """Ordered record of operations; inputs of a node are always recorded first.

    A tape has a single owner: building it and running backward must not be
    interleaved from multiple threads.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._leaf_shapes: dict[int, tuple] = {}

    def leaf(self, data) -> Tensor:
        """Register a gradient-carrying leaf holding a copy of ``data``."""
        t = Tensor(data, requires_grad=True)
        t.tape = self
        t.node_id = self._add(_Node("leaf", (), len(self._nodes), None))
        self._leaf_shapes[t.node_id] = t.data.shape
        return t

    def _add(self, node: _Node) -> int:
        self._nodes.append(node)
        return node.out_id

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        """Accumulate gradients of a scalar loss for every recorded node.

        Returns a map node_id -> gradient tensor containing every node that
        received a gradient plus a zero entry for each untouched leaf.
        Replaying the same tape gives bit-identical results.
        """
        if loss.tape is not self or loss.node_id is None:
            raise ValueError("loss tensor is not on this tape")
        if loss.data.size != 1:
            raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            g = grads.get(node.out_id)
            if g is None or node.backward is None:
                continue
            for iid, gi in zip(node.input_ids, node.backward(g)):
                if iid is None or gi is None:
                    continue
                acc = grads.get(iid)
                grads[iid] = gi if acc is None else acc + gi
        for lid, shape in self._leaf_shapes.items():
            if lid not in grads:
                grads[lid] = np.zeros(shape)
        out: dict[int, Tensor] = {}
        for nid, g in grads.items():
            out[nid] = Tensor._wrap(np.asarray(g, dtype=np.float64))
        return out

    def __len__(self):
        return len(self._nodes)


def asconst(x) -> Tensor:
    """Wrap a value as a constant tensor (no tape participation)."""
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def _tape_of(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ValueError("operands belong to different tapes")
    return tape


def _record(op: str, out_arr: np.ndarray, inputs: Sequence[Tensor],
            backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    out = Tensor._wrap(out_arr)
    tape = _tape_of(*inputs)
    if tape is not None:
        ids = tuple(t.node_id if t.tape is tape else None for t in inputs)
        out.tape = tape
        out.node_id = tape._add(_Node(op, ids, len(tape._nodes), backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = asconst(a), asconst(b)
    out = a.data + b.data
    return _record("add", out, (a, b), lambda g: (
        _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Tensor:
    a, b = asconst(a), asconst(b)
    out = a.data - b.data
    return _record("sub", out, (a, b), lambda g: (
        _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    a, b = asconst(a), asconst(b)
    out = a.data * b.data
    return _record("mul", out, (a, b), lambda g: (
        _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)))


def div(a, b) -> Tensor:
    a, b = asconst(a), asconst(b)
    out = a.data / b.data
    return _record("div", out, (a, b), lambda g: (
        _unbroadcast(g / b.data, a.data.shape),
        _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))


def neg(a) -> Tensor:
    a = asconst(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = asconst(a), asconst(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-d operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data
    return _record("matmul", out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a, axes=None) -> Tensor:
    a = asconst(a)
    out = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)
    return _record("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape) -> Tensor:
    a = asconst(a)
    orig = a.data.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def concat(parts, axis: int = 0) -> Tensor:
    parts = [asconst(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes[:-1])

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", out, parts, bwd)


def take(a, indices, axis: int = 0) -> Tensor:
    a = asconst(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, idx, axis=axis)
    shape = a.data.shape

    def bwd(g):
        gz = np.zeros(shape)
        sl: list = [slice(None)] * len(shape)
        sl[axis] = idx
        np.add.at(gz, tuple(sl), g)
        return (gz,)

    return _record("take", out, (a,), bwd)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = asconst(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", out, (a,), bwd)


def texp(a) -> Tensor:
    a = asconst(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def tlog(a) -> Tensor:
    a = asconst(a)
    return _record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def tsqrt(a) -> Tensor:
    a = asconst(a)
    out = np.sqrt(a.data)
    # subgradient 0 at the origin keeps norms of zero vectors NaN-free
    return _record("sqrt", out, (a,), lambda g: (
        np.where(a.data > 0.0, g / (2.0 * np.where(a.data > 0.0, out, 1.0)), 0.0),))


def softplus(a) -> Tensor:
    a = asconst(a)
    out = np.logaddexp(0.0, a.data)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    return _record("softplus", out, (a,), lambda g: (g * sig,))


def sigmoid(a) -> Tensor:
    a = asconst(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = asconst(a)
    return _record("relu", np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0.0),))


def gelu(a) -> Tensor:
    a = asconst(a)
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        return (g * d,)

    return _record("gelu", out, (a,), bwd)


def arccos(a) -> Tensor:
    a = asconst(a)
    out = np.arccos(a.data)
    return _record("arccos", out, (a,), lambda g: (-g / np.sqrt(1.0 - a.data * a.data),))


def clamp(a, lo: float, hi: float) -> Tensor:
    a = asconst(a)
    out = np.clip(a.data, lo, hi)
    return _record("clamp", out, (a,), lambda g: (g * ((a.data >= lo) & (a.data <= hi)),))


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Normalize each row of x over the last axis, then scale and shift."""
    x, gamma, beta = asconst(x), asconst(gamma), asconst(beta)
    out, xhat, inv = layer_norm_np(x.data, gamma.data, beta.data, eps)
    d = x.data.shape[-1]

    def bwd(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return (gx, (g * xhat).sum(axis=red), g.sum(axis=red))

    return _record("layer_norm", out, (x, gamma, beta), bwd)


def softmax_rows(x, mask=None) -> Tensor:
    """Row-stable softmax; positions hidden by the mask come out exactly 0.

    ``mask`` is a boolean visibility array matching x (or None for all
    visible). Every row must keep at least one visible entry.
    """
    x = asconst(x)
    visible = None if mask is None else np.asarray(getattr(mask, "visible", mask), dtype=bool)
    out = softmax_rows_np(x.data, visible)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _record("softmax_rows", out, (x,), bwd)


def stop_gradient(a) -> Tensor:
    """Identity in value; the backward pass propagates exactly zero through it."""
    a = asconst(a)
    return _record("stop_gradient", a.data.copy(), (a,), lambda g: (None,))


def finite_diff_check(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-5) -> float:
    """Max relative error between the taped gradient of f and central differences.

    ``f`` maps a tensor to a tensor; non-scalar outputs are reduced with sum
    before differentiation. The numeric side evaluates f off-tape.
    """
    x = np.asarray(x, dtype=np.float64)
    tape = Tape()
    xt = tape.leaf(x)
    y = f(xt)
    if y.data.size != 1:
        y = tsum(y)
    analytic = tape.backward(y)[xt.node_id].data.reshape(-1)

    def value_at(v: np.ndarray) -> float:
        out = f(asconst(v))
        return float(out.data.sum())

    numeric = np.empty(x.size)
    flat = x.reshape(-1)
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = eps
        numeric[i] = (value_at((flat + e).reshape(x.shape))
                      - value_at((flat - e).reshape(x.shape))) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float(np.max(np.abs(analytic - numeric) / denom))
