"""
Minimal reverse-mode automatic differentiation over numpy arrays.

Only the operation vocabulary the bound needs is covered: elementwise
arithmetic with broadcasting, exp/log/sqrt, sigmoid/tanh/softplus, sums,
log-sum-exp and softmax, cumulative sums, gathers, clipping, stacking and
two-operand einsum contractions.

A ``Tensor`` built only from constants records no graph, so the same model
code serves both gradient evaluation and plain sampling. The module-level
functions (``exp``, ``log``, ...) accept either numpy arrays or Tensors and
dispatch accordingly.
"""

from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, logsumexp as _np_logsumexp

from src.errors import InvalidArgumentError

ArrayLike = Union[np.ndarray, float, int]
Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """A float64 array that remembers how it was computed."""

    __slots__ = ("value", "grad", "op", "name", "requires_grad", "_parents", "_backward")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, value: ArrayLike, op: str = "const", name: Optional[str] = None,
                 requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.op = op
        self.name = name
        self.requires_grad = requires_grad
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Backward] = None

    # -- bookkeeping ---------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def label(self) -> str:
        return self.name or self.op

    def named(self, name: str) -> "Tensor":
        """Attach a label used in non-finite diagnostics."""
        self.name = name
        return self

    def __repr__(self) -> str:
        return f"Tensor(op={self.label!r}, shape={self.shape})"

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every variable leaf."""
        grads = {id(self): np.ones_like(self.value)}
        for node in reversed(self.topological_order()):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(pg, parent.value.shape)
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    def topological_order(self) -> List["Tensor"]:
        """Recorded nodes, parents before children (iterative, no recursion limit)."""
        order: List[Tensor] = []
        seen = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
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
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        return _node(self.value + other.value, (self, other), "add", lambda g: (g, g))

    __radd__ = __add__

    def __sub__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        return _node(self.value - other.value, (self, other), "sub", lambda g: (g, -g))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        a, b = self.value, other.value
        return _node(a * b, (self, other), "mul", lambda g: (g * b, g * a))

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        other = as_tensor(other)
        a, b = self.value, other.value
        return _node(a / b, (self, other), "div", lambda g: (g / b, -g * a / (b * b)))

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return as_tensor(other) / self

    def __neg__(self) -> "Tensor":
        return _node(-self.value, (self,), "neg", lambda g: (-g,))

    def __pow__(self, power: float) -> "Tensor":
        a = self.value
        return _node(a ** power, (self,), "pow", lambda g: (g * power * a ** (power - 1),))

    def __getitem__(self, key) -> "Tensor":
        shape = self.value.shape

        def backward(g):
            out = np.zeros(shape)
            np.add.at(out, key, g)
            return (out,)

        return _node(self.value[key], (self,), "getitem", backward)

    # -- elementwise functions -----------------------------------------

    def exp(self) -> "Tensor":
        out = np.exp(self.value)
        return _node(out, (self,), "exp", lambda g: (g * out,))

    def log(self) -> "Tensor":
        a = self.value
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(a)
        return _node(out, (self,), "log", lambda g: (g / a,))

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.value)
        return _node(out, (self,), "sqrt", lambda g: (0.5 * g / out,))

    def sigmoid(self) -> "Tensor":
        out = expit(self.value)
        return _node(out, (self,), "sigmoid", lambda g: (g * out * (1.0 - out),))

    def tanh(self) -> "Tensor":
        out = np.tanh(self.value)
        return _node(out, (self,), "tanh", lambda g: (g * (1.0 - out * out),))

    def softplus(self) -> "Tensor":
        a = self.value
        return _node(np.logaddexp(0.0, a), (self,), "softplus", lambda g: (g * expit(a),))

    def clip(self, lo: Optional[float], hi: Optional[float]) -> "Tensor":
        a = self.value
        inside = np.ones_like(a, dtype=bool)
        if lo is not None:
            inside &= a >= lo
        if hi is not None:
            inside &= a <= hi
        return _node(np.clip(a, lo, hi), (self,), "clip", lambda g: (g * inside,))

    # -- shape and reductions ------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.value.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return _node(self.value.sum(axis=axis, keepdims=keepdims), (self,), "sum", backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.value.size if axis is None else np.prod([self.value.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) / float(count)

    def reshape(self, *shape) -> "Tensor":
        orig = self.value.shape
        return _node(self.value.reshape(*shape), (self,), "reshape", lambda g: (g.reshape(orig),))

    def take(self, indices: np.ndarray, axis: int = 0) -> "Tensor":
        """Gather along ``axis``; repeated indices accumulate in the backward pass."""
        indices = np.asarray(indices)
        shape = self.value.shape
        axis = axis % len(shape)
        # gathered output: shape[:axis] + indices.shape + shape[axis + 1:]
        index_axes = list(range(axis, axis + indices.ndim))

        def backward(g):
            out = np.zeros(shape)
            moved = np.moveaxis(out, axis, 0)
            np.add.at(moved, indices, np.moveaxis(g, index_axes, list(range(indices.ndim))))
            return (out,)

        return _node(np.take(self.value, indices, axis=axis), (self,), "take", backward)

    def cumsum(self, axis: int = 0) -> "Tensor":
        def backward(g):
            return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

        return _node(np.cumsum(self.value, axis=axis), (self,), "cumsum", backward)

    def logsumexp(self, axis=-1, keepdims: bool = False) -> "Tensor":
        a = self.value
        out = _np_logsumexp(a, axis=axis, keepdims=True)

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (g * np.exp(a - out),)

        value = out if keepdims else np.squeeze(out, axis=axis)
        return _node(value, (self,), "logsumexp", backward)


def _node(value: np.ndarray, parents: Tuple[Tensor, ...], op: str, backward: Backward) -> Tensor:
    out = Tensor(value, op=op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def as_tensor(x: Union[Tensor, ArrayLike]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def variable(value: ArrayLike, name: Optional[str] = None) -> Tensor:
    """A leaf whose gradient is collected by ``Tensor.backward``."""
    return Tensor(np.array(value, dtype=np.float64), op="param", name=name, requires_grad=True)


def value_of(x: Union[Tensor, ArrayLike]) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# -- dispatching functions (ndarray in -> ndarray out, Tensor in -> Tensor out) --

def exp(x):
    return x.exp() if isinstance(x, Tensor) else np.exp(x)


def log(x):
    return x.log() if isinstance(x, Tensor) else np.log(x)


def sqrt(x):
    return x.sqrt() if isinstance(x, Tensor) else np.sqrt(x)


def sigmoid(x):
    return x.sigmoid() if isinstance(x, Tensor) else expit(x)


def tanh(x):
    return x.tanh() if isinstance(x, Tensor) else np.tanh(x)


def softplus(x):
    return x.softplus() if isinstance(x, Tensor) else np.logaddexp(0.0, x)


def clip(x, lo: Optional[float], hi: Optional[float]):
    return x.clip(lo, hi) if isinstance(x, Tensor) else np.clip(x, lo, hi)


def logit(x):
    return log(x) - log(1.0 - x)


def reduce_sum(x, axis=None, keepdims: bool = False):
    return x.sum(axis=axis, keepdims=keepdims) if isinstance(x, Tensor) else np.sum(x, axis=axis, keepdims=keepdims)


def cumsum(x, axis: int = 0):
    return x.cumsum(axis=axis) if isinstance(x, Tensor) else np.cumsum(x, axis=axis)


def take(x, indices, axis: int = 0):
    return x.take(indices, axis=axis) if isinstance(x, Tensor) else np.take(x, indices, axis=axis)


def logsumexp(x, axis=-1, keepdims: bool = False):
    if isinstance(x, Tensor):
        return x.logsumexp(axis=axis, keepdims=keepdims)
    return _np_logsumexp(x, axis=axis, keepdims=keepdims)


def softmax(x, axis: int = -1):
    return exp(x - logsumexp(x, axis=axis, keepdims=True))


def stack(items: Iterable, axis: int = 0):
    items = list(items)
    if not any(isinstance(item, Tensor) for item in items):
        return np.stack([np.asarray(item, dtype=np.float64) for item in items], axis=axis)
    tensors = [as_tensor(item) for item in items]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(np.stack([t.value for t in tensors], axis=axis), tuple(tensors), "stack", backward)


def einsum(subscripts: str, a, b):
    """
    Two-operand einsum with reverse-mode support.

    Every index of an operand must appear in the other operand or in the
    output, which covers the affine maps used by the reverse models.
    """
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        return np.einsum(subscripts, a, b)
    inputs, out = subscripts.replace(" ", "").split("->")
    left, right = inputs.split(",")
    for operand, other in ((left, right), (right, left)):
        if any(c not in out and c not in other for c in operand):
            raise InvalidArgumentError(f"einsum {subscripts!r}: operand-only summed index is not supported")
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value

    def backward(g):
        return (
            np.einsum(f"{out},{right}->{left}", g, bv),
            np.einsum(f"{left},{out}->{right}", av, g),
        )

    return _node(np.einsum(subscripts, av, bv), (a, b), "einsum", backward)


def first_nonfinite(root: Tensor) -> Optional[Tensor]:
    """First recorded node (parents before children) holding NaN or infinity."""
    for node in root.topological_order():
        if not np.all(np.isfinite(node.value)):
            return node
    return None
