"""Parameter containers built on the tensor kernels."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor, get_default_dtype, relu


class Module:
    """Minimal parameter/buffer registry.

    Parameters are attributes holding a ``Tensor`` with ``requires_grad``;
    buffers are plain arrays listed in ``_buffer_names``.  Submodules and
    lists of submodules are discovered from attributes, in definition order.
    """

    training: bool = True
    _buffer_names: tuple[str, ...] = ()

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (Tensor, Module)):
                yield name, value
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in self._children():
            if isinstance(value, Tensor) and value.requires_grad:
                out[prefix + name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(prefix + name + "."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + name: getattr(self, name) for name in self._buffer_names}
        for name, value in self._children():
            if isinstance(value, Module):
                out.update(value.named_buffers(prefix + name + "."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, value in self._children():
            if isinstance(value, Module):
                value.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        """Convert parameters and buffers in place (used for f64 gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        self._cast_buffers(dtype)
        return self

    def _cast_buffers(self, dtype) -> None:
        for name in self._buffer_names:
            setattr(self, name, getattr(self, name).astype(dtype))
        for _, value in self._children():
            if isinstance(value, Module):
                value._cast_buffers(dtype)


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return Tensor(w.astype(get_default_dtype()), requires_grad=True)


def zeros(shape, requires_grad: bool = True) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_default_dtype()), requires_grad=requires_grad)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, pad: int = 0, bias: bool = True):
        self.weight = he_normal(rng, (cout, cin, k, k), cin * k * k)
        self.bias = zeros(cout) if bias else None
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, pad=self.pad)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int):
        dtype = get_default_dtype()
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = zeros(channels)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.training)


class ConvBN(Module):
    """3x3 convolution followed by batch normalization (conv bias is redundant)."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.conv = Conv2d(cin, cout, 3, rng, pad=1, bias=False)
        self.bn = BatchNorm2d(cout)

    def __call__(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(x))


class ResidualBlock(Module):
    """Two conv+BN stages with an identity skip (1x1 projection if channels change)."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.a = ConvBN(cin, cout, rng)
        self.b = ConvBN(cout, cout, rng)
        self.proj = Conv2d(cin, cout, 1, rng) if cin != cout else None

    def __call__(self, x: Tensor) -> Tensor:
        y = self.b(relu(self.a(x)))
        skip = x if self.proj is None else self.proj(x)
        return relu(y + skip)


class Linear(Module):
    def __init__(self, fin: int, fout: int, rng: np.random.Generator | None):
        if rng is None:
            self.weight = zeros((fout, fin))
        else:
            self.weight = he_normal(rng, (fout, fin), fin)
        self.bias = zeros(fout)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LSTMCell(Module):
    """LSTM cell with forget-gate bias 1.0.

    Weights are scaled normals (std ``1/sqrt(fan_in)``); pass ``zero=True``
    to start with all weights at zero.
    """

    def __init__(self, fin: int, hidden: int, rng: np.random.Generator | None, zero: bool = False):
        dtype = get_default_dtype()
        if zero or rng is None:
            w_x = np.zeros((4 * hidden, fin))
            w_h = np.zeros((4 * hidden, hidden))
        else:
            w_x = rng.standard_normal((4 * hidden, fin)) / np.sqrt(fin)
            w_h = rng.standard_normal((4 * hidden, hidden)) / np.sqrt(hidden)
        bias = np.zeros(4 * hidden)
        bias[hidden : 2 * hidden] = 1.0
        self.w_x = Tensor(w_x.astype(dtype), requires_grad=True)
        self.w_h = Tensor(w_h.astype(dtype), requires_grad=True)
        self.bias = Tensor(bias.astype(dtype), requires_grad=True)
        self.hidden = hidden

    @property
    def params(self) -> ops.LSTMParams:
        return ops.LSTMParams(self.w_x, self.w_h, self.bias)

    def initial_state(self, batch: int, dtype) -> tuple[Tensor, Tensor]:
        z = np.zeros((batch, self.hidden), dtype=dtype)
        return Tensor(z), Tensor(z.copy())

    def __call__(self, x: Tensor, state: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
        return ops.lstm_step(x, state, self.params)
