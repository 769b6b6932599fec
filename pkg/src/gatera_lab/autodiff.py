"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations are recorded on the innermost active :class:`Tape`.  Nothing is
recorded when no tape is active or when no input requires a gradient, so
evaluation code simply runs outside a ``with Tape():`` block.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape():
    ...     loss = (x * x).sum()
    ...     backward(loss)
    >>> x.grad
    array([2., 4.])
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "finite_difference_grad",
    "relative_error",
    "matmul",
    "hadamard",
    "add",
    "sub",
    "scalar_mul",
    "add_scalar",
    "neg",
    "sigmoid",
    "log",
    "exp",
    "relu",
    "softmax",
    "log_softmax",
    "tsum",
    "mean",
    "transpose",
    "permute",
    "reshape",
    "clip",
    "layer_norm",
    "embedding",
    "detach",
]

_TAPES: list["Tape"] = []


class Node:
    __slots__ = ("inputs", "output", "backward_fn", "index", "tape")

    def __init__(self, inputs, output, backward_fn, index, tape):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.index = index
        self.tape = tape


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; tapes nest, and ops record on the innermost one.
    A tape (and the tensors recorded on it) belongs to one thread of execution.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPES.pop()
        assert popped is self, "tapes must be exited in LIFO order"

    def record(self, inputs: Sequence["Tensor"], output: "Tensor", backward_fn) -> Node:
        node = Node(tuple(inputs), output, backward_fn, len(self.nodes), self)
        self.nodes.append(node)
        output.tape_node = node
        return node

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """A float64 array plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "tape_node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.tape_node: Optional[Node] = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data if data.dtype == np.float64 else data.astype(np.float64)
        t.requires_grad = requires_grad
        t.grad = None
        t.tape_node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # operator sugar
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return hadamard(self, other) if isinstance(other, Tensor) else scalar_mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; divide by a float")
        return scalar_mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires_grad=needs)
    if needs:
        tape.record(inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# ---------------------------------------------------------------------------
# binary ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible") from None

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with broadcasting."""
    _broadcast_shape(a, b, "hadamard")
    out = a.data * b.data

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


# ---------------------------------------------------------------------------
# unary ops


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + float(c), (a,), lambda g: (g,))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # exp(-|z|) never overflows; both branches are exact to rounding
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def log(a: Tensor) -> Tensor:
    """Natural log. Callers clamp; a non-positive input raises."""
    if np.any(a.data <= 0) or np.any(np.isnan(a.data)):
        raise DomainError(f"log: input has non-positive entries (min {np.nanmin(a.data)!r})")
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis."""
    s = _softmax(a.data)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (a,), bw)


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    return scalar_mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes (copying)."""
    if a.ndim < 2:
        raise DimensionError(f"transpose: need at least 2 axes, got shape {a.shape}")
    out = np.ascontiguousarray(np.swapaxes(a.data, -1, -2))
    return _make(out, (a,), lambda g: (np.swapaxes(g, -1, -2),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return _make(out, (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is zero where clamping is active."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def detach(a: Tensor) -> Tensor:
    """Copy of the value that is not connected to any tape."""
    return Tensor._wrap(a.data.copy(), requires_grad=False)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalisation over the last axis with affine gain and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        gg = _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        gb = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        return gx, gg, gb

    return _make(out, (x, gamma, beta), bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; ids is an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def bw(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (acc,)

    return _make(out, (table,), bw)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``.

    Gradients accumulate across calls; reset with ``zero_grad``.  Intermediate
    tensors recorded on the tape receive their (complete) gradient as well,
    which the analysis code uses to read dL/dy and dL/d(AB).
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    node = loss.tape_node
    if node is None:
        if not loss.requires_grad:
            raise ContractError("backward: loss was not recorded on a tape and requires no grad")
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return

    pending: dict[int, np.ndarray] = {id(loss): seed}
    for n in reversed(node.tape.nodes[: node.index + 1]):
        g = pending.pop(id(n.output), None)
        if g is None:
            continue
        out = n.output
        out.grad = g.copy() if out.grad is None else out.grad + g
        for inp, gi in zip(n.inputs, n.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.tape_node is None or inp.tape_node.tape is not node.tape:
                inp.grad = np.array(gi, dtype=np.float64) if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                pending[key] = gi if key not in pending else pending[key] + gi


# ---------------------------------------------------------------------------
# numerical oracle


def finite_difference_grad(
    f: Callable[[Tensor], object],
    at: Tensor,
    eps: float = 1e-5,
    indices: Optional[Sequence[int]] = None,
) -> Tensor:
    """Central-difference gradient of a scalar function of one tensor.

    ``f`` may return a Tensor or a float.  ``indices`` restricts evaluation to
    the given flat coordinates (others are reported as 0).
    """
    if eps <= 0:
        raise ContractError("finite_difference_grad: eps must be positive")
    base = np.array(at.data, dtype=np.float64)
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)
    coords = range(flat.size) if indices is None else indices

    def value(x: np.ndarray) -> float:
        r = f(Tensor._wrap(x.reshape(base.shape)))
        return r.item() if isinstance(r, Tensor) else float(r)

    for i in coords:
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += eps
        xm[i] -= eps
        grad[i] = (value(xp) - value(xm)) / (2.0 * eps)
    return Tensor._wrap(grad.reshape(base.shape))


def relative_error(analytic, numeric, floor: float = 1e-12) -> float:
    """max |a - n| scaled by the larger of the two tensors' max magnitudes."""
    a = np.asarray(analytic.data if isinstance(analytic, Tensor) else analytic, dtype=np.float64)
    n = np.asarray(numeric.data if isinstance(numeric, Tensor) else numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    return float(np.abs(a - n).max(initial=0.0) / scale)
