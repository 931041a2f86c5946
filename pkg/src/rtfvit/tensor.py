"""Dense tensors with tape-based reverse-mode differentiation.

Every op is a plain function taking and returning :class:`Tensor`. When a
:class:`Tape` is active and at least one input is tracked, the op appends a
node holding its backward rule. ``tape.backward(loss)`` then walks the nodes
in reverse and deposits gradients on tracked leaves.

Shapes never broadcast implicitly. The exceptions are scalar multiplication,
the row-vector gain/bias of :func:`layer_norm` and the bias of :func:`linear`.
"""

from __future__ import annotations

import struct
import threading
from typing import BinaryIO, Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf, expit

from .errors import ContractError, DimensionError, NumericalError, ValidationError

DEFAULT_DTYPE = np.float32

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """An n-dimensional array of reals, optionally tracked for gradients."""

    __slots__ = ("values", "grad", "tracked", "_node", "name", "__weakref__")

    def __init__(self, values, tracked: bool = False, dtype=None, name: str = ""):
        if dtype is None:
            keep = isinstance(values, np.ndarray) and values.dtype.kind == "f"
            dtype = values.dtype if keep else DEFAULT_DTYPE
        arr = np.asarray(values, dtype=dtype)
        if any(s <= 0 for s in arr.shape):
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.values = arr
        self.grad: Optional[np.ndarray] = None
        self.tracked = bool(tracked)
        self._node: Optional[_Node] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.values, tracked=False)

    def __repr__(self) -> str:
        flag = ", tracked" if self.tracked else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple, backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed ops.

    Use as a context manager; ops run inside the block are recorded. A tape
    supports exactly one :meth:`backward` call.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse of nested tapes
            stack.remove(self)

    def record(self, out: Tensor, inputs: tuple, backward: Callable) -> None:
        node = _Node(out, inputs, backward)
        out._node = node
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise ContractError("backward already ran on this tape; start a new Tape")
        if loss.values.size != 1 or loss.ndim > 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.tracked:
            raise ContractError("loss does not depend on any tracked tensor")
        self.consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
        leaves: dict[int, Tensor] = {}
        if loss.is_leaf:
            leaves[id(loss)] = loss
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.tracked:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                if inp.is_leaf:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        # release references held by closures
        for node in self.nodes:
            node.out._node = None
        self.nodes = []


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every tracked leaf that ``loss`` depends on."""
    tape.backward(loss)


def _make(values: np.ndarray, inputs: Sequence[Tensor], backward_rule: Callable) -> Tensor:
    if not np.all(np.isfinite(values)):
        raise NumericalError("op produced NaN or Inf")
    tracked = any(t.tracked for t in inputs)
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.tracked = tracked
    out._node = None
    out.name = ""
    if tracked:
        tape = active_tape()
        if tape is not None:
            tape.record(out, tuple(inputs), backward_rule)
        else:
            out.tracked = False
    return out


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of bounds for rank {ndim}")
    return axis % ndim


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# elementwise -----------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.values + b.values, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    av, bv = a.values, b.values
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av))


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)
    return _make(a.values * s, (a,), lambda g: (g * s,))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.values
    f = x.dtype.type
    cdf = f(0.5) * (f(1.0) + erf(x * f(1.0 / _SQRT2)))
    out = x * cdf

    def rule(g):
        pdf = f(_INV_SQRT_2PI) * np.exp(f(-0.5) * x * x)
        return (g * (cdf + x * pdf),)

    return _make(out, (a,), rule)


# reductions -------------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.values.sum(), dtype=a.dtype), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_over(a: Tensor, axis: int) -> Tensor:
    ax = _norm_axis(axis, a.ndim)
    n = a.shape[ax]
    if a.ndim == 1:
        out = np.asarray(a.values.mean(), dtype=a.dtype)
    else:
        out = a.values.mean(axis=ax)
    shape = a.shape

    def rule(g):
        g = np.expand_dims(np.asarray(g), ax) if len(shape) > 1 else np.asarray(g)
        return (np.broadcast_to(g / n, shape).astype(a.dtype),)

    return _make(out, (a,), rule)


# structural -------------------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.values.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
    orig = a.shape
    return _make(out, (a,), lambda g: (g.reshape(orig),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"{axes} is not a permutation of rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.values.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),))


def transpose_last2(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise DimensionError(f"transpose_last2 needs rank >= 2, got {a.ndim}")
    return _make(np.swapaxes(a.values, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def concat_along(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat_along needs at least one tensor")
    ax = _norm_axis(axis, tensors[0].ndim)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise DimensionError(f"concat_along axis {axis}: shapes {ref} and {t.shape} incompatible")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.values for t in tensors], axis=ax), tuple(tensors), rule)


def slice_along(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = _norm_axis(axis, a.ndim)
    n = a.shape[ax]
    if not 0 <= start < stop <= n:
        raise DimensionError(f"range [{start}, {stop}) out of bounds for extent {n}")
    index = [slice(None)] * a.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)

    def rule(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _make(a.values[index].copy(), (a,), rule)


def slice_tokens(a: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` along the token axis (second to last)."""
    return slice_along(a, -2, start, stop)


def expand_leading(a: Tensor, n: int) -> Tensor:
    """Stack ``n`` copies of ``a`` along a new leading axis."""
    if n < 1:
        raise DimensionError(f"expand_leading needs n >= 1, got {n}")
    out = np.broadcast_to(a.values, (n,) + a.shape).copy()
    return _make(out, (a,), lambda g: (g.sum(axis=0),))


def select_rows(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Row-wise choice: row ``i`` comes from ``a`` where ``mask[i]`` else from ``b``.

    ``mask`` covers every axis except the last one. Selection is exact, so
    each output row is bit-identical to the corresponding input row.
    """
    _same_shape(a, b, "select_rows")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape[:-1]:
        raise DimensionError(f"select_rows: mask shape {mask.shape} does not match rows {a.shape[:-1]}")
    m = mask[..., None]

    def rule(g):
        zero = np.zeros((), dtype=g.dtype)
        return np.where(m, g, zero), np.where(m, zero, g)

    return _make(np.where(m, a.values, b.values), (a, b), rule)


# linear algebra -----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not compose")
    av, bv = a.values, b.values

    def rule(g):
        return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g

    return _make(av @ bv, (a, b), rule)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` applied over the last axis of ``x``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} and weight {w.shape} do not compose")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match weight {w.shape}")
    xv, wv = x.values, w.values
    out = xv @ wv
    if b is not None:
        out = out + b.values
    k = w.shape[0]

    def rule(g):
        g2 = g.reshape(-1, g.shape[-1])
        dw = xv.reshape(-1, k).T @ g2
        dx = g @ wv.T
        if b is None:
            return dx, dw
        return dx, dw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _make(out, inputs, rule)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis with max-subtraction."""
    x = a.values
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (a,), rule)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be positive, got {eps}")
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape}/bias {bias.shape} vs width {d}")
    x = a.values
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + a.dtype.type(eps))
    xhat = xc * inv
    gv = gain.values
    out = xhat * gv + bias.values

    def rule(g):
        dxhat = g * gv
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        g2 = g.reshape(-1, d)
        return dx, (g2 * xhat.reshape(-1, d)).sum(axis=0), g2.sum(axis=0)

    return _make(out, (a, gain, bias), rule)


# loss ----------------------------------------------------------------------------


def bce_with_logits(logit: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross-entropy, evaluated in log-space."""
    _same_shape(logit, target, "bce_with_logits")
    y = target.values
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("bce_with_logits targets must be 0 or 1")
    z = logit.values
    n = z.size
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(per.mean(), dtype=z.dtype)

    def rule(g):
        return ((g * (expit(z) - y) / n).astype(z.dtype), None)

    return _make(out, (logit, target), rule)


# serialization ------------------------------------------------------------------


def write_tensor(f: BinaryIO, t) -> int:
    """Write rank, extents (u64 LE) and float32 LE values; return bytes written."""
    arr = np.asarray(t.values if isinstance(t, Tensor) else t, dtype="<f4")
    header = struct.pack(f"<Q{arr.ndim}Q", arr.ndim, *arr.shape)
    f.write(header)
    data = np.ascontiguousarray(arr).tobytes()
    f.write(data)
    return len(header) + len(data)


def read_tensor(f: BinaryIO) -> np.ndarray:
    head = f.read(8)
    if len(head) != 8:
        raise EOFError("truncated tensor header")
    (rank,) = struct.unpack("<Q", head)
    dims = struct.unpack(f"<{rank}Q", f.read(8 * rank)) if rank else ()
    count = int(np.prod(dims)) if dims else 1
    raw = f.read(4 * count)
    if len(raw) != 4 * count:
        raise EOFError("truncated tensor payload")
    return np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
