"""
Dense tensor engine with reverse-mode automatic differentiation.

A Tensor wraps a numpy array. Every differentiable operation is a Function
subclass with a numpy forward and a backward that maps the output gradient to
one gradient per parent. Calling Tensor.backward() walks the recorded graph in
reverse topological order and accumulates gradients into the leaves.

Data is float32 unless float64 arrays are passed in (gradient checks run in
float64). Reductions accumulate in float64.
"""

import contextlib
import logging
from typing import Callable, List, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block"""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None):
        array = np.asarray(data)
        if dtype is not None:
            array = array.astype(dtype, copy=False)
        elif not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float32)
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._ctx: Optional["Function"] = None

    def __repr__(self):
        return f"<Tensor shape={self.shape} dtype={self.dtype} requires_grad={self.requires_grad}>"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    # Arithmetic
    def __add__(self, other): return Add.apply(self, self._lift(other))
    def __radd__(self, other): return Add.apply(self._lift(other), self)
    def __sub__(self, other): return Sub.apply(self, self._lift(other))
    def __rsub__(self, other): return Sub.apply(self._lift(other), self)
    def __mul__(self, other): return Mul.apply(self, self._lift(other))
    def __rmul__(self, other): return Mul.apply(self._lift(other), self)
    def __truediv__(self, other): return Div.apply(self, self._lift(other))
    def __rtruediv__(self, other): return Div.apply(self._lift(other), self)
    def __neg__(self): return Neg.apply(self)
    def __matmul__(self, other): return MatMul.apply(self, self._lift(other))

    def square(self) -> "Tensor":
        return Mul.apply(self, self)

    def sqrt(self) -> "Tensor":
        return Sqrt.apply(self)

    def relu(self) -> "Tensor":
        return Relu.apply(self)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def backward(self, grad: Optional[np.ndarray] = None):
        """Accumulate d(self)/d(leaf) into every leaf that requires grad"""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)

        order = _toposort(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._ctx is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._ctx.backward(g)
            for parent, pg in zip(node._ctx.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(np.asarray(pg), parent.shape)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


def _toposort(root: Tensor) -> List[Tensor]:
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx.parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


class Function:
    """One recorded operation; subclasses implement forward/backward on arrays"""

    def __init__(self, *parents: Tensor):
        self.parents = parents

    @classmethod
    def apply(cls, *parents: Tensor, **kwargs) -> Tensor:
        ctx = cls(*parents)
        out = Tensor(ctx.forward(*[p.data for p in parents], **kwargs))
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._ctx = ctx
        return out

    def forward(self, *args, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError


class Add(Function):
    def forward(self, x, y):
        return x + y

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    def forward(self, x, y):
        return x - y

    def backward(self, grad):
        return grad, -grad


class Mul(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x * y

    def backward(self, grad):
        return grad * self.y, grad * self.x


class Div(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x / y

    def backward(self, grad):
        return grad / self.y, -grad * self.x / (self.y * self.y)


class Neg(Function):
    def forward(self, x):
        return -x

    def backward(self, grad):
        return (-grad,)


class Sqrt(Function):
    # gradient is taken as 0 where the value is exactly 0
    def forward(self, x):
        self.out = np.sqrt(np.maximum(x, 0))
        return self.out

    def backward(self, grad):
        safe = np.where(self.out > 0, self.out, 1)
        return (np.where(self.out > 0, 0.5 * grad / safe, 0),)


class Relu(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0).astype(x.dtype)

    def backward(self, grad):
        return (grad * self.mask,)


class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return np.sum(x, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def _expand(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return np.broadcast_to(grad, self.shape)

    def backward(self, grad):
        return (self._expand(grad),)


class Mean(Sum):
    def forward(self, x, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        out = np.mean(x, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.dtype)
        self.count = x.size // max(np.size(out), 1)
        return out

    def backward(self, grad):
        return (self._expand(grad) / self.count,)


class Reshape(Function):
    def forward(self, x, shape=()):
        self.in_shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class MatMul(Function):
    def forward(self, x, y):
        self.x, self.y = x, y
        return x @ y

    def backward(self, grad):
        return grad @ self.y.T, self.x.T @ grad


class Where(Function):
    """Select a where mask is true, b elsewhere (mask is a constant)"""

    def forward(self, a, b, mask=None):
        self.mask = np.asarray(mask, dtype=bool)
        return np.where(self.mask, a, b)

    def backward(self, grad):
        return grad * self.mask, grad * ~self.mask


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    return Where.apply(a, b, mask=mask)


class Take(Function):
    """Gather along the batch axis: out[i] = x[indices[i]]"""

    def forward(self, x, indices=None):
        self.indices = np.asarray(indices)
        self.shape = x.shape
        return x[self.indices]

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(out, self.indices, grad)
        return (out,)


def take(x: Tensor, indices: np.ndarray) -> Tensor:
    return Take.apply(x, indices=indices)


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-3,
              max_checks: int = 64, seed: int = 0) -> float:
    """
    Compare autodiff gradients of `fn` against central finite differences.

    The output is projected onto a fixed random direction so vector outputs reduce
    to a scalar. At most `max_checks` coordinates per input are probed. Returns
    the largest |analytic - numeric| divided by the largest gradient magnitude seen.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    projection = rng.standard_normal(out.shape)
    out.backward(projection)

    def scalar(values):
        with no_grad():
            return float(np.sum(fn(*[Tensor(v) for v in values]).data * projection))

    worst, scale = 0.0, 1e-12
    for i, (array, tensor) in enumerate(zip(arrays, tensors)):
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(array)
        flat_size = array.size
        if flat_size <= max_checks:
            picks = np.arange(flat_size)
        else:
            picks = rng.choice(flat_size, size=max_checks, replace=False)
        for flat in picks:
            index = np.unravel_index(flat, array.shape)
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i][index] += eps
            minus[i][index] -= eps
            numeric = (scalar(plus) - scalar(minus)) / (2 * eps)
            worst = max(worst, abs(numeric - analytic[index]))
            scale = max(scale, abs(numeric), abs(analytic[index]))
    return worst / scale
