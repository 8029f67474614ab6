"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every primitive builds a new :class:`Tensor` that remembers its parents and a
closure mapping the output adjoint to parent adjoints.  :func:`backward`
collects the graph reachable from a scalar loss into a :class:`Tape` (a
topologically ordered node list), sweeps it once in reverse, and returns the
gradient of the loss with respect to every leaf that requires one.

Broadcasting is limited to the leading-batch case: two operands must have the
same shape, one must be a scalar, or the shape of one must be a suffix of the
other's (``(N, D) + (D,)``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "DomainError",
    "Tensor",
    "Tape",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "exp",
    "log",
    "sqrt",
    "abs",
    "relu",
    "sigmoid",
    "log_sigmoid",
    "log_softmax",
    "softmax",
    "sum",
    "mean",
    "sum_list",
    "max_with_index",
    "reshape",
    "transpose",
    "getitem",
    "pick",
    "backward",
    "numerical_gradient",
]


class AutodiffError(RuntimeError):
    """Base class for errors raised by the autodiff engine."""


class ShapeError(AutodiffError, ValueError):
    """Operand shapes do not conform for a primitive."""

    def __init__(self, primitive: str, left: tuple, right: tuple | None = None):
        self.primitive = primitive
        self.left = tuple(left)
        self.right = None if right is None else tuple(right)
        if right is None:
            msg = f"{primitive}: invalid operand shape {self.left}"
        else:
            msg = f"{primitive}: shapes {self.left} and {self.right} do not conform"
        super().__init__(msg)


class DomainError(AutodiffError, ValueError):
    """A primitive was evaluated outside its mathematical domain."""


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A dense real array that can take part in gradient recording.

    Leaves are created directly (``Tensor(values, requires_grad=True)``);
    interior nodes are produced by the primitives in this module.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else _default_dtype(data))
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.op == "leaf"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # Operators.  Comparison operators are deliberately left alone so tensors
    # stay hashable by identity (gradient maps are keyed by leaf).
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _default_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data.dtype
    if isinstance(data, (np.floating,)) and data.dtype in (np.float32, np.float64):
        return data.dtype
    return np.float64


def as_tensor(value, dtype=None) -> Tensor:
    """Wrap ``value`` as a constant tensor unless it already is one."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def _node(data: np.ndarray, op: str, parents: tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    elif not isinstance(a, Tensor):
        a, b = Tensor(a), Tensor(b)
    return a, b


def _check_broadcast(op: str, sa: tuple, sb: tuple) -> None:
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) > len(sb) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeError(op, sa, sb)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)))


# ---------------------------------------------------------------------------
# Elementwise binary primitives


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def fn(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _node(a.data + b.data, "add", (a, b), fn)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def fn(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _node(a.data - b.data, "sub", (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast("mul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _node(ad * bd, "mul", (a, b), fn)


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_broadcast("div", a.shape, b.shape)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise DomainError("div: division by zero")
    out = ad / bd

    def fn(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _node(out, "div", (a, b), fn)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, "neg", (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Matrix product for operands of rank 1 or 2."""
    a, b = _coerce_pair(a, b)
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2) or ad.shape[-1] != bd.shape[0]:
        raise ShapeError("matmul", ad.shape, bd.shape)
    out = ad @ bd

    def fn(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 2:  # (N, D) @ (D,)
            return np.outer(g, bd), ad.T @ g
        if bd.ndim == 2:  # (D,) @ (D, M)
            return bd @ g, np.outer(ad, g)
        return g * bd, g * ad

    return _node(out, "matmul", (a, b), fn)


# ---------------------------------------------------------------------------
# Elementwise unary primitives


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if np.any(x <= 0):
        raise DomainError(f"log: non-positive input (min {np.min(x)!r})")
    return _node(np.log(x), "log", (a,), lambda g: (g / x,))


def sqrt(a) -> Tensor:
    """Square root; the gradient at exactly zero is taken as zero."""
    a = as_tensor(a)
    x = a.data
    if np.any(x < 0):
        raise DomainError(f"sqrt: negative input (min {np.min(x)!r})")
    out = np.sqrt(x)

    def fn(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return _node(out, "sqrt", (a,), fn)


def abs(a) -> Tensor:  # noqa: A001 - mirrors the primitive's name
    a = as_tensor(a)
    x = a.data
    return _node(np.abs(x), "abs", (a,), lambda g: (g * np.sign(x),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # Split by sign so exp never overflows.
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(a.dtype)
    return _node(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a) -> Tensor:
    """``log(sigmoid(a))`` without underflow for very negative inputs."""
    a = as_tensor(a)
    x = a.data
    out = (np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))).astype(a.dtype)

    def fn(g):
        # d/dx log sigmoid(x) = 1 - sigmoid(x) = sigmoid(-x)
        z = np.exp(-np.abs(x))
        s_neg = np.where(x >= 0, z / (1.0 + z), 1.0 / (1.0 + z))
        return (g * s_neg,)

    return _node(out, "log_sigmoid", (a,), fn)


def log_softmax(a) -> Tensor:
    """Log-softmax along the last axis with max subtraction."""
    a = as_tensor(a)
    x = a.data
    if x.ndim == 0:
        raise ShapeError("log_softmax", x.shape)
    shifted = x - x.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)

    def fn(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _node(out, "log_softmax", (a,), fn)


def softmax(a) -> Tensor:
    """Softmax along the last axis, computed as ``exp(log_softmax(a))``."""
    return exp(log_softmax(a))


# ---------------------------------------------------------------------------
# Reductions and structural primitives


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    if axis is not None and not -len(shape) <= axis < len(shape):
        raise ShapeError("sum", shape)
    out = np.asarray(a.data.sum(axis=axis))

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _node(out, "sum", (a,), fn)


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    if count == 0:
        raise ShapeError("mean", a.shape)
    return div(sum(a, axis), float(count))


def sum_list(tensors: Sequence) -> Tensor:
    """Left-to-right sum of a non-empty sequence of tensors."""
    if not tensors:
        raise AutodiffError("sum_list needs at least one operand")
    total = as_tensor(tensors[0])
    for t in tensors[1:]:
        total = add(total, t)
    return total


def max_with_index(a) -> tuple[Tensor, np.ndarray]:
    """Maximum over the last axis and its index (lowest index on ties).

    Only the selected entry receives gradient.
    """
    a = as_tensor(a)
    x = a.data
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError("max_with_index", x.shape)
    idx = np.argmax(x, axis=-1)
    out = np.take_along_axis(x, idx[..., None], axis=-1)[..., 0]

    def fn(g):
        grad = np.zeros_like(x)
        np.put_along_axis(grad, idx[..., None], g[..., None], axis=-1)
        return (grad,)

    return _node(out, "max", (a,), fn), idx


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    old = a.shape
    return _node(out, "reshape", (a,), lambda g: (g.reshape(old),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _node(a.data.T, "transpose", (a,), lambda g: (g.T,))


def getitem(a, index) -> Tensor:
    """Basic or integer-array indexing; gradients scatter-add back."""
    a = as_tensor(a)
    out = a.data[index]
    shape, dtype = a.shape, a.dtype

    basic = _is_basic_index(index)

    def fn(g):
        grad = np.zeros(shape, dtype=dtype)
        if basic:
            grad[index] += g
        else:
            np.add.at(grad, index, g)
        return (grad,)

    return _node(np.array(out), "getitem", (a,), fn)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis for i in items)


def pick(a, labels) -> Tensor:
    """Select ``a[i, labels[i]]`` for each row of a 2-D tensor."""
    a = as_tensor(a)
    labels = np.asarray(labels, dtype=np.int64)
    if a.ndim != 2 or labels.shape != (a.shape[0],):
        raise ShapeError("pick", a.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= a.shape[1]):
        raise ShapeError("pick", a.shape, labels.shape)
    rows = np.arange(a.shape[0])
    out = a.data[rows, labels]
    shape, dtype = a.shape, a.dtype

    def fn(g):
        grad = np.zeros(shape, dtype=dtype)
        grad[rows, labels] = g
        return (grad,)

    return _node(out, "pick", (a,), fn)


# ---------------------------------------------------------------------------
# Backward pass


@dataclass
class Tape:
    """Topologically ordered record of the nodes reachable from a loss."""

    nodes: list[Tensor]
    adjoints: dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def record(cls, loss: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def run(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        self.adjoints = {id(loss): np.ones_like(loss.data)}
        grads: dict[Tensor, np.ndarray] = {}
        for node in reversed(self.nodes):
            g = self.adjoints.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                grads[node] = g
                continue
            if node._backward is None:
                raise AutodiffError("tape already consumed; rebuild the loss before calling backward again")
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = self.adjoints.get(key)
                self.adjoints[key] = pg if prev is None else prev + pg
        return grads

    def consume(self) -> None:
        for node in self.nodes:
            if not node.is_leaf:
                node._backward = None
                node._parents = ()


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to its leaves.

    Each leaf's ``.grad`` is set as a side effect.  The graph is consumed.

    Raises:
        AutodiffError: if the loss is not scalar or was already differentiated.
    """
    if not isinstance(loss, Tensor):
        raise AutodiffError("backward expects a Tensor")
    if loss.data.size != 1:
        raise AutodiffError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    if not loss.is_leaf and loss._backward is None:
        raise AutodiffError("tape already consumed; rebuild the loss before calling backward again")
    tape = Tape.record(loss)
    grads = tape.run(loss)
    tape.consume()
    for leaf, g in grads.items():
        leaf.grad = g
    return grads


def numerical_gradient(
    fn: Callable[[np.ndarray], float],
    x: np.ndarray,
    indices: Iterable[int] | None = None,
    step: float = 1e-6,
) -> np.ndarray:
    """Central finite differences of a scalar function of a flat array.

    Returns an array aligned with ``indices`` (all coordinates by default).
    """
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else list(indices)
    out = []
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        up = fn(x)
        flat[i] = orig - step
        down = fn(x)
        flat[i] = orig
        out.append((up - down) / (2.0 * step))
    return np.asarray(out)
