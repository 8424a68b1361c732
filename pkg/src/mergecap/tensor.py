"""Dense tensors with tape-based reverse-mode differentiation.

Only the handful of primitives the captioner needs are provided. Shapes must
match exactly except for adding a 1-D bias to every row of a 2-D tensor.

Every differentiable op executed while grad mode is on (and with at least one
input that requires grad) is appended to the calling thread's current
:class:`Tape`. :func:`backward` replays that tape in reverse and then discards
it, so each forward pass owns a fresh tape.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shapes."""


def _shape_error(op: str, a, b) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            keep = isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64)
            dtype = data.dtype if keep else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Node] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("kind", "inputs", "out", "grad_fn")

    def __init__(self, kind: str, inputs: tuple, out: Tensor, grad_fn: Callable):
        self.kind = kind
        self.inputs = inputs
        self.out = out
        self.grad_fn = grad_fn


class Tape:
    """Ordered record of the ops executed during one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: _Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node.out._node = None
        self.nodes.clear()


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.grad_enabled = True


_state = _State()


def current_tape() -> Tape:
    return _state.tape


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def fresh_tape():
    """Run the block against a new, empty tape."""
    prev = _state.tape
    _state.tape = Tape()
    try:
        yield _state.tape
    finally:
        _state.tape = prev


def _make(kind: str, data: np.ndarray, inputs: tuple, grad_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._node = None
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = _Node(kind, inputs, out, grad_fn)
        out._node = node
        _state.tape.record(node)
    else:
        out.requires_grad = False
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    A, B = a.data, b.data

    def grad_fn(g):
        return g @ B.T, A.T @ g

    return _make("matmul", A @ B, (a, b), grad_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        return _make("add", a.data + b.data, (a, b), lambda g: (g, g))
    # row-wise bias addition is the only broadcast allowed
    if a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]:
        return _make("add", a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    raise _shape_error("add", a.shape, b.shape)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _shape_error("mul", a.shape, b.shape)
    A, B = a.data, b.data
    return _make("mul", A * B, (a, b), lambda g: (g * B, g * A))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scalar_mul", a.data * c, (a,), lambda g: (g * c,))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    first = tensors[0].shape
    ax = axis % len(first) if first else 0
    for t in tensors[1:]:
        s = t.shape
        if len(s) != len(first) or any(x != y for i, (x, y) in enumerate(zip(s, first)) if i != ax):
            raise _shape_error("concat", first, s)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, grad_fn)


def slice(a: Tensor, start: int, stop: int | None = None, axis: int = -1) -> Tensor:
    """Contiguous slice ``[start:stop]`` along one axis (the other axes kept whole)."""
    nd = a.data.ndim
    if nd == 0:
        raise ShapeError("slice: cannot slice a 0-d tensor")
    ax = axis % nd
    extent = a.shape[ax]
    stop = extent if stop is None else stop
    if not (0 <= start < stop <= extent):
        raise ShapeError(f"slice: range [{start}:{stop}] invalid for axis {ax} of shape {a.shape}")
    index = [np.s_[:]] * nd
    index[ax] = np.s_[start:stop]
    index = tuple(index)
    shape, dtype = a.shape, a.data.dtype

    def grad_fn(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _make("slice", a.data[index], (a,), grad_fn)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a 2-d tensor, got shape {a.shape}")
    return _make("transpose", a.data.T, (a,), lambda g: (g.T,))


def mean_rows(a: Tensor) -> Tensor:
    """Average over the rows of an ``[n, d]`` tensor, giving ``[1, d]``."""
    if a.data.ndim != 2 or a.shape[0] == 0:
        raise ShapeError(f"mean_rows: expected a non-empty 2-d tensor, got shape {a.shape}")
    n = a.shape[0]
    return _make("mean_rows", a.data.mean(axis=0, keepdims=True), (a,),
                 lambda g: (np.repeat(g, n, axis=0) / n,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _make("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make("relu", a.data * mask, (a,), lambda g: (g * mask,))


def softmax_lastdim(a: Tensor) -> Tensor:
    x = a.data
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"softmax_lastdim: need a non-empty last axis, got shape {a.shape}")
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    y = z / z.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make("softmax_lastdim", y, (a,), grad_fn)


def log(a: Tensor) -> Tensor:
    x = a.data
    with np.errstate(divide="ignore"):
        y = np.log(x)
    return _make("log", y, (a,), lambda g: (g / x,))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors the op name
    shape, dtype = a.shape, a.data.dtype
    return _make("sum", np.asarray(a.data.sum(), dtype=dtype), (a,),
                 lambda g: (np.full(shape, g, dtype=dtype),))


OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "slice": slice,
    "transpose": transpose,
    "mean_rows": mean_rows,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "softmax_lastdim": softmax_lastdim,
    "log": log,
    "sum": sum,
    "scalar_mul": scalar_mul,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name, e.g. ``forward_op("matmul", a, b)``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op {kind!r}; expected one of {sorted(OPS)}") from None
    return fn(*inputs, **kwargs)


# --------------------------------------------------------------------------
# differentiation


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    The tape holding the graph is cleared afterwards.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    node = loss._node
    if node is None:
        if loss.requires_grad:
            _accumulate(loss, np.ones_like(loss.data))
            return
        raise ValueError("backward: loss was not produced by recorded ops")
    tape = _state.tape
    try:
        stop = _index_of(tape, node)
    except ValueError:
        raise ValueError("backward: loss does not belong to this thread's current tape") from None

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for nd in reversed(tape.nodes[: stop + 1]):
        g = grads.pop(id(nd.out), None)
        if g is None:
            continue
        for inp, gi in zip(nd.inputs, nd.grad_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                _accumulate(inp, gi)
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
    tape.clear()


def _index_of(tape: Tape, node: _Node) -> int:
    # the loss is almost always the last node recorded
    for k in range(len(tape.nodes) - 1, -1, -1):
        if tape.nodes[k] is node:
            return k
    raise ValueError


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.shape)
    if leaf.grad is None:
        leaf.grad = g.copy()
    else:
        leaf.grad += g


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None


def _scalar(t: "Tensor") -> float:
    return float(np.asarray(t.data).reshape(-1)[0])


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    ``f`` is called with ``x`` and must rebuild its graph on every call. Returns
    ``max |analytic - numeric| / max(1, |analytic|)`` over the elements of ``x``.
    """
    if eps <= 0:
        raise ValueError("finite_difference_check: eps must be positive")
    if not x.requires_grad:
        raise ValueError("finite_difference_check: x must require grad")
    with no_grad():
        f0 = _scalar(f(x))
        f1 = _scalar(f(x))
    if f0 != f1:
        raise ValueError(f"finite_difference_check: f is not deterministic ({f0!r} != {f1!r})")

    saved = x.grad
    x.grad = None
    with fresh_tape():
        loss = f(x)
        if loss.size != 1:
            raise ValueError(f"finite_difference_check: f must be scalar, got shape {loss.shape}")
        backward(loss)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad
    x.grad = saved

    flat = x.data.reshape(-1)
    numeric = np.empty(flat.size)
    with no_grad():
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            fp = _scalar(f(x))
            flat[k] = orig - eps
            fm = _scalar(f(x))
            flat[k] = orig
            numeric[k] = (fp - fm) / (2.0 * eps)
    a = analytic.reshape(-1)
    return float(np.max(np.abs(a - numeric) / np.maximum(1.0, np.abs(a)))) if a.size else 0.0
