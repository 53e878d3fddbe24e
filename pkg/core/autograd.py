"""Dense-tensor reverse-mode automatic differentiation.

A ``Tensor`` produced by an operation remembers its input tensors and a
closure that maps the upstream gradient to gradients for each input.
``Tensor.backward`` walks that record in reverse topological order.
"""

import contextlib
import itertools
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.exceptions import ContractError, InvalidArgumentError

ArrayLike = Union["Tensor", np.ndarray, float, int]

_DEFAULT_DTYPE = np.float32
_STRAIGHT_THROUGH_IDENTITY = False
_NODE_IDS = itertools.count(1)


def get_default_dtype() -> type:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    resolved = np.dtype(dtype)
    if resolved not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise InvalidArgumentError(f"unsupported precision {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = resolved.type


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the precision of newly created tensors"""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def straight_through_as_identity() -> Iterator[None]:
    """Make straight-through nodes forward as the identity.

    Inside this context the forward pass follows the surrogate path, so
    finite differences and analytic gradients describe the same function.
    """
    global _STRAIGHT_THROUGH_IDENTITY
    previous = _STRAIGHT_THROUGH_IDENTITY
    _STRAIGHT_THROUGH_IDENTITY = True
    try:
        yield
    finally:
        _STRAIGHT_THROUGH_IDENTITY = previous


class Tensor:
    """Dense real array that can take part in a gradient tape"""

    __array_priority__ = 100

    def __init__(self,
                 data: ArrayLike,
                 requires_grad: bool = False,
                 name: Optional[str] = None,
                 _parents: Tuple["Tensor", ...] = (),
                 _backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None):
        array = np.asarray(data)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(_DEFAULT_DTYPE)
        self.data: np.ndarray = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self.node_id: Optional[int] = next(_NODE_IDS) if _parents else None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{label})"

    # Operator sugar
    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: float) -> "Tensor":
        if isinstance(other, Tensor):
            raise InvalidArgumentError("division is only supported by constants")
        return mul(self, 1.0 / other)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # Reverse pass
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Populate ``.grad`` on every tensor of the tape that requires it.

        Gradients are recomputed from scratch on each call, so two passes
        from the same forward produce identical results.
        """
        if not self.requires_grad:
            raise ContractError("backward() called on a tensor that does not require gradients")
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a seed gradient for non-scalar shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.shape:
                raise InvalidArgumentError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        pending = {id(self): grad}
        for node in reversed(self._topological_order()):
            node_grad = pending.pop(id(node), None)
            if node_grad is None:
                continue
            node.grad = node_grad
            if node._backward is None:
                continue
            for parent, parent_grad in zip(node._parents, node._backward(node_grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad

    def _topological_order(self) -> List["Tensor"]:
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=_DEFAULT_DTYPE))


def _record(data: np.ndarray,
            parents: Sequence[Tensor],
            backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# Elementwise arithmetic
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _record(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                           _unbroadcast(g * a.data, b.shape)))


def square(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return _record(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise InvalidArgumentError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return _record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Fully connected layer ``y = x W + b`` for ``x`` of shape (batch, fan_in)"""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise InvalidArgumentError(f"fc shape mismatch: input {x.shape}, weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise InvalidArgumentError(f"fc bias shape {bias.shape} != ({weight.shape[1]},)")
    out = x.data @ weight.data + bias.data

    def backward(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return _record(out, (x, weight, bias), backward)


# Reductions and shape manipulation
def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(np.asarray(out), (x,), backward)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def take(x: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing"""
    x = as_tensor(x)
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _record(np.array(out), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _record(out, tensors, backward)


# Activations
def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    x = as_tensor(x)
    slope = np.where(x.data >= 0, 1.0, alpha).astype(x.data.dtype)
    return _record(x.data * slope, (x,), lambda g: (g * slope,))


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _record(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    positive = x.data >= 0
    z = np.exp(-np.abs(x.data))
    out = np.where(positive, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.data.dtype)
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """Train-mode batch normalization over axis 0 with the full backward pass.

    Returns the output tensor plus the batch mean and (biased) variance.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 2:
        raise InvalidArgumentError(f"batch norm expects (batch, features), got {x.shape}")
    n = x.shape[0]
    mean = x.data.mean(axis=0)
    centered = x.data - mean
    var = (centered * centered).mean(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    out = gamma.data * x_hat + beta.data

    def backward(g):
        grad_gamma = (g * x_hat).sum(axis=0)
        grad_beta = g.sum(axis=0)
        g_hat = g * gamma.data
        grad_x = (inv_std / n) * (n * g_hat - g_hat.sum(axis=0) - x_hat * (g_hat * x_hat).sum(axis=0))
        return grad_x, grad_gamma, grad_beta

    return _record(out, (x, gamma, beta), backward), mean, var


# Straight-through nodes
def straight_through(x: Tensor, forward: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    """Apply a non-differentiable ``forward`` with an identity gradient"""
    x = as_tensor(x)
    if _STRAIGHT_THROUGH_IDENTITY:
        out = x.data.copy()
    else:
        out = np.asarray(forward(x.data), dtype=x.data.dtype)
        if out.shape != x.shape:
            raise ContractError(f"straight-through forward changed shape {x.shape} -> {out.shape}")
    return _record(out, (x,), lambda g: (g,))
