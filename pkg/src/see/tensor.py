"""Reverse-mode automatic differentiation over numpy arrays.

Every operation applied to a :class:`Tensor` that requires gradients records a
:class:`Function` node stamped with a monotonically increasing sequence
number.  :meth:`Tensor.backward` replays the recorded nodes reachable from the
loss in strict reverse order of recording, which is exactly the behaviour of an
explicit tape but without holding on to unrelated graphs.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Any, Iterable, Sequence

import numpy as np

_SCALAR_MODES = {"f32": np.float32, "f64": np.float64}
_state = threading.local()
_counter = itertools.count()


def _default_dtype():
    return getattr(_state, "dtype", np.float32)


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def get_default_dtype():
    return _default_dtype()


@contextlib.contextmanager
def precision(mode: str):
    """Temporarily switch the dtype used for newly created tensors ("f32"/"f64")."""
    if mode not in _SCALAR_MODES:
        raise ValueError(f"unknown scalar mode {mode!r}, expected one of {sorted(_SCALAR_MODES)}")
    prev = _default_dtype()
    _state.dtype = _SCALAR_MODES[mode]
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """An n-d array that can participate in reverse-mode differentiation.

    Leaves created with ``requires_grad=True`` accumulate into ``.grad``;
    intermediate results only carry gradients transiently during ``backward``.
    """

    __array_priority__ = 100

    def __init__(self, data: Any, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _default_dtype()
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._ctx: Function | None = None
        self._seq = -1

    # -- basic properties -------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    @property
    def scalar_mode(self) -> str:
        return "f64" if self.data.dtype == np.float64 else "f32"

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, mode={self.scalar_mode}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- differentiation --------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        if self._ctx is None:
            self._accumulate(np.ones_like(self.data))
            return

        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if t._ctx is None or id(t) in nodes:
                continue
            nodes[id(t)] = t
            stack.extend(p for p in t._ctx.parents if p.requires_grad)

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for t in sorted(nodes.values(), key=lambda n: n._seq, reverse=True):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            ctx = t._ctx
            pgrads = ctx.backward(g)
            if not isinstance(pgrads, tuple):
                pgrads = (pgrads,)
            for parent, pg in zip(ctx.parents, pgrads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._ctx is None:
                    parent._accumulate(pg)
                else:
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg

    def _accumulate(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=self.data.dtype)
        if g.shape != self.data.shape:
            g = g.reshape(self.data.shape)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    # -- operator overloads -----------------------------------------------
    def __add__(self, other):
        return Add.apply(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return Add.apply(self, Neg.apply(other))

    def __rsub__(self, other):
        return Add.apply(other, Neg.apply(self))

    def __mul__(self, other):
        return Mul.apply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent: float):
        return Pow.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return MatMul.apply(self, other)

    def __rmatmul__(self, other):
        return MatMul.apply(other, self)

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    # -- method-style ops -------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return Sum.apply(self, axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)

    def tanh(self):
        return Tanh.apply(self)

    def sigmoid(self):
        return Sigmoid.apply(self)

    def relu(self):
        return ReLU.apply(self)

    def abs(self):
        return Abs.apply(self)

    def sqrt(self):
        return Sqrt.apply(self)


def as_tensor(x: Any) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def unbroadcast(grad: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    shape = tuple(shape)
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Function:
    """A recorded differentiable operation.

    Subclasses implement ``forward`` on raw arrays and ``backward`` returning
    one gradient (or ``None``) per tensor input.
    """

    def __init__(self, *parents: Tensor):
        self.parents = parents

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError

    def backward(self, grad: np.ndarray):  # pragma: no cover
        raise NotImplementedError

    @property
    def needs(self) -> tuple[bool, ...]:
        return tuple(p.requires_grad for p in self.parents)

    @classmethod
    def apply(cls, *inputs: Any, **kwargs) -> Tensor:
        tensors = [as_tensor(x) for x in inputs]
        fn = cls(*tensors)
        out = fn.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = _grad_enabled() and any(t.requires_grad for t in tensors)
        result = Tensor(out, dtype=out.dtype if isinstance(out, np.ndarray) else None)
        if requires_grad:
            result.requires_grad = True
            result._ctx = fn
            result._seq = next(_counter)
        return result


# ---------------------------------------------------------------------------
# elementwise and structural primitives


def _dtype_of(*arrays):
    return np.result_type(*[a.dtype for a in arrays])


class Add(Function):
    def forward(self, a, b):
        self.sa, self.sb = a.shape, b.shape
        return (a + b).astype(_dtype_of(a, b), copy=False)

    def backward(self, g):
        return unbroadcast(g, self.sa), unbroadcast(g, self.sb)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return -g


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        ga = unbroadcast(g * self.b, self.a.shape) if self.needs[0] else None
        gb = unbroadcast(g * self.a, self.b.shape) if self.needs[1] else None
        return ga, gb


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, g):
        ga = unbroadcast(g / self.b, self.a.shape) if self.needs[0] else None
        gb = unbroadcast(-g * self.a / (self.b * self.b), self.b.shape) if self.needs[1] else None
        return ga, gb


class Pow(Function):
    def forward(self, a, exponent):
        self.a, self.p = a, exponent
        return a**exponent

    def backward(self, g):
        return g * self.p * self.a ** (self.p - 1)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, g):
        return g * self.out


class Log(Function):
    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, g):
        return g / self.a


class Tanh(Function):
    def forward(self, a):
        self.out = np.tanh(a)
        return self.out

    def backward(self, g):
        return g * (1.0 - self.out * self.out)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Sigmoid(Function):
    def forward(self, a):
        self.out = _sigmoid(a)
        return self.out

    def backward(self, g):
        return g * self.out * (1.0 - self.out)


class ReLU(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0).astype(a.dtype, copy=False)

    def backward(self, g):
        return g * self.mask


class Abs(Function):
    def forward(self, a):
        self.sign = np.sign(a)
        return np.abs(a)

    def backward(self, g):
        return g * self.sign


class Sqrt(Function):
    """Square root whose gradient at exactly zero is defined as 0."""

    def forward(self, a):
        self.out = np.sqrt(a)
        return self.out

    def backward(self, g):
        safe = np.where(self.out > 0, self.out, 1.0)
        return np.where(self.out > 0, g / (2.0 * safe), 0.0).astype(g.dtype, copy=False)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
            raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, g):
        a, b = self.a, self.b
        if a.ndim == 1 or b.ndim == 1:
            a2 = a[None, :] if a.ndim == 1 else a
            b2 = b[:, None] if b.ndim == 1 else b
            g2 = g.reshape(a2.shape[:-1] + b2.shape[-1:])
            ga = (g2 @ np.swapaxes(b2, -1, -2)).reshape(a.shape) if self.needs[0] else None
            gb = unbroadcast(np.swapaxes(a2, -1, -2) @ g2, b2.shape).reshape(b.shape) if self.needs[1] else None
            return ga, gb
        ga = unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape) if self.needs[0] else None
        gb = unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape) if self.needs[1] else None
        return ga, gb


class Sum(Function):
    def forward(self, a, axis, keepdims):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, g):
        if self.axis is not None and not self.keepdims:
            axes = tuple(ax % len(self.shape) for ax in np.atleast_1d(self.axis))
            g = np.expand_dims(g, axes)
        return np.broadcast_to(g, self.shape).copy()


class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, g):
        return g.reshape(self.shape)


class Transpose(Function):
    def forward(self, a, axes):
        self.axes = axes
        return np.transpose(a, axes)

    def backward(self, g):
        if self.axes is None:
            return np.transpose(g)
        return np.transpose(g, np.argsort(self.axes))


class GetItem(Function):
    def forward(self, a, index):
        self.shape, self.dtype, self.index = a.shape, a.dtype, index
        return np.array(a[index])

    def backward(self, g):
        out = np.zeros(self.shape, dtype=self.dtype)
        if _is_basic_index(self.index):
            out[self.index] += g
        else:
            np.add.at(out, self.index, g)
        return out


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


class Concat(Function):
    def forward(self, *arrays, axis):
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, g):
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(g, splits, axis=self.axis))


class Stack(Function):
    def forward(self, *arrays, axis):
        self.axis = axis
        return np.stack(arrays, axis=axis)

    def backward(self, g):
        return tuple(np.moveaxis(g, self.axis, 0))


def concatenate(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    return Stack.apply(*tensors, axis=axis)


def relu(x) -> Tensor:
    return ReLU.apply(x)


def sigmoid(x) -> Tensor:
    return Sigmoid.apply(x)


def tanh(x) -> Tensor:
    return Tanh.apply(x)
