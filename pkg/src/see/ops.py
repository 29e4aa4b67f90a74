"""Neural-network kernels with analytic backward passes.

All kernels operate on NCHW float arrays and are deterministic: reductions
run in a fixed order and scatter-style gradients are accumulated slice by
slice rather than through unordered atomics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Function, ShapeError, Tensor, as_tensor, sigmoid, tanh

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


class Conv2dFn(Function):
    # im2col runs channels-last: the gathered patches and the col2im scatter
    # then touch contiguous channel runs, which is ~2x faster than NCHW order.
    def forward(self, x, w, b=None, stride=1, pad=0):
        B, C, H, W = x.shape
        O, Cw, kh, kw = w.shape
        if C != Cw:
            raise ShapeError(f"conv2d: input has {C} channels but weight expects Cin={Cw}")
        if H + 2 * pad < kh or W + 2 * pad < kw:
            raise ShapeError(
                f"conv2d: padded input {H + 2 * pad}x{W + 2 * pad} smaller than kernel {kh}x{kw}"
            )
        if b is not None and b.shape != (O,):
            raise ShapeError(f"conv2d: bias shape {b.shape} does not match Cout={O}")
        Ho, Wo = _out_size(H, kh, stride, pad), _out_size(W, kw, stride, pad)
        xp = np.zeros((B, H + 2 * pad, W + 2 * pad, C), dtype=x.dtype)
        xp[:, pad : pad + H, pad : pad + W] = x.transpose(0, 2, 3, 1)
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :Ho, :Wo]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B * Ho * Wo, kh * kw * C)
        w2 = w.transpose(0, 2, 3, 1).reshape(O, kh * kw * C)
        out = cols @ w2.T
        if b is not None:
            out += b
        self.cols, self.w2, self.has_bias = cols, w2, b is not None
        self.geom = (B, C, H, W, O, kh, kw, Ho, Wo, stride, pad)
        return np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))

    def backward(self, g):
        B, C, H, W, O, kh, kw, Ho, Wo, s, pad = self.geom
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, O)
        gw = (g2.T @ self.cols).reshape(O, kh, kw, C).transpose(0, 3, 1, 2) if self.needs[1] else None
        gb = g2.sum(axis=0) if self.has_bias and self.needs[2] else None
        gx = None
        if self.needs[0]:
            dcols = (g2 @ self.w2).reshape(B, Ho, Wo, kh, kw, C)
            dxp = np.zeros((B, H + 2 * pad, W + 2 * pad, C), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + s * Ho : s, j : j + s * Wo : s] += dcols[:, :, :, i, j]
            gx = dxp[:, pad : pad + H, pad : pad + W].transpose(0, 3, 1, 2)
        if self.has_bias:
            return gx, gw, gb
        return gx, gw


def conv2d(x, weight, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x[B,Cin,H,W]`` with ``weight[Cout,Cin,kh,kw]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    if weight.shape[2] < 1 or weight.shape[3] < 1 or pad < 0 or stride < 1:
        raise ShapeError("conv2d: kernel dims and stride must be >= 1, pad >= 0")
    if bias is None:
        return Conv2dFn.apply(x, weight, stride=stride, pad=pad)
    return Conv2dFn.apply(x, weight, bias, stride=stride, pad=pad)


class MaxPoolFn(Function):
    def forward(self, x, k, stride):
        B, C, H, W = x.shape
        Ho, Wo = _out_size(H, k, stride, 0), _out_size(W, k, stride, 0)
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
        win = win.reshape(B, C, Ho, Wo, k * k)
        # np.argmax returns the first maximum in row-major window order
        self.arg = win.argmax(axis=-1)
        self.geom = (x.shape, k, stride, Ho, Wo)
        return np.take_along_axis(win, self.arg[..., None], axis=-1)[..., 0]

    def backward(self, g):
        shape, k, s, Ho, Wo = self.geom
        gx = np.zeros(shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gx[:, :, i : i + s * Ho : s, j : j + s * Wo : s] += g * (self.arg == i * k + j)
        return gx


class AvgPoolFn(Function):
    def forward(self, x, k, stride):
        B, C, H, W = x.shape
        Ho, Wo = _out_size(H, k, stride, 0), _out_size(W, k, stride, 0)
        self.geom = (x.shape, k, stride, Ho, Wo)
        out = np.zeros((B, C, Ho, Wo), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                out += x[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
        return out * x.dtype.type(1.0 / (k * k))

    def backward(self, g):
        shape, k, s, Ho, Wo = self.geom
        gx = np.zeros(shape, dtype=g.dtype)
        gk = g * g.dtype.type(1.0 / (k * k))
        for i in range(k):
            for j in range(k):
                gx[:, :, i : i + s * Ho : s, j : j + s * Wo : s] += gk
        return gx


def pool2d(x, kind: str, k: int, stride: int | None = None) -> Tensor:
    """Max or average pooling with a square ``k`` window and no padding."""
    x = as_tensor(x)
    stride = k if stride is None else stride
    if x.ndim != 4:
        raise ShapeError(f"pool2d expects a 4-d input, got {x.shape}")
    if k < 1 or stride < 1:
        raise ShapeError("pool2d: window and stride must be >= 1")
    if k > x.shape[2] or k > x.shape[3]:
        raise ShapeError(f"pool2d: window {k} exceeds spatial extent {x.shape[2]}x{x.shape[3]}")
    if kind == "max":
        return MaxPoolFn.apply(x, k=k, stride=stride)
    if kind == "avg":
        return AvgPoolFn.apply(x, k=k, stride=stride)
    raise ValueError(f"pool2d: unknown kind {kind!r}")


def _adaptive_matrix(size: int, out: int, dtype) -> np.ndarray:
    m = np.zeros((out, size), dtype=dtype)
    for i in range(out):
        lo = (i * size) // out
        hi = -((-(i + 1) * size) // out)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


class AdaptiveAvgPoolFn(Function):
    def forward(self, x, out_hw):
        _, _, H, W = x.shape
        self.ph = _adaptive_matrix(H, out_hw[0], x.dtype)
        self.pw = _adaptive_matrix(W, out_hw[1], x.dtype)
        return np.einsum("ih,bchw,jw->bcij", self.ph, x, self.pw, optimize=True)

    def backward(self, g):
        return np.einsum("ih,bcij,jw->bchw", self.ph, g, self.pw, optimize=True)


def adaptive_avg_pool2d(x, out_hw: tuple[int, int]) -> Tensor:
    """Average pooling onto a fixed ``out_hw`` grid of (possibly overlapping) bins."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool2d expects a 4-d input, got {x.shape}")
    if out_hw[0] > x.shape[2] or out_hw[1] > x.shape[3]:
        raise ShapeError(f"adaptive_avg_pool2d: output {out_hw} larger than input {x.shape[2:]}")
    return AdaptiveAvgPoolFn.apply(x, out_hw=tuple(out_hw))


class BatchNormFn(Function):
    def forward(self, x, gamma, beta, running_mean, running_var, training, momentum, eps):
        axes = (0, 2, 3)
        C = x.shape[1]
        if gamma.shape != (C,) or beta.shape != (C,):
            raise ShapeError(f"batch_norm: gamma/beta must have shape ({C},)")
        if training:
            n = x.shape[0] * x.shape[2] * x.shape[3]
            if n < 2:
                raise ValueError("batch_norm: need B*H*W >= 2 in train mode, variance is undefined")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            if running_mean is not None:
                running_mean *= momentum
                running_mean += (1 - momentum) * mean
                running_var *= momentum
                running_var += (1 - momentum) * var * (n / (n - 1))
        else:
            mean, var = running_mean, running_var
        inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
        xhat = (x - mean.reshape(1, C, 1, 1)) * inv_std.reshape(1, C, 1, 1)
        self.xhat, self.inv_std, self.gamma, self.training = xhat, inv_std, gamma, training
        return (xhat * gamma.reshape(1, C, 1, 1) + beta.reshape(1, C, 1, 1)).astype(x.dtype, copy=False)

    def backward(self, g):
        axes = (0, 2, 3)
        C = g.shape[1]
        xhat = self.xhat
        ggamma = (g * xhat).sum(axis=axes) if self.needs[1] else None
        gbeta = g.sum(axis=axes) if self.needs[2] else None
        gx = None
        if self.needs[0]:
            scale = (self.gamma * self.inv_std).reshape(1, C, 1, 1)
            if self.training:
                mean_g = g.mean(axis=axes).reshape(1, C, 1, 1)
                mean_gx = (g * xhat).mean(axis=axes).reshape(1, C, 1, 1)
                gx = scale * (g - mean_g - xhat * mean_gx)
            else:
                gx = g * scale
        return gx, ggamma, gbeta


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray | None,
    running_var: np.ndarray | None,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization; running statistics are updated in place."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects a 4-d input, got {x.shape}")
    if not training and (running_mean is None or running_var is None):
        raise ValueError("batch_norm: inference mode needs running statistics")
    return BatchNormFn.apply(
        x, gamma, beta,
        running_mean=running_mean, running_var=running_var,
        training=training, momentum=momentum, eps=eps,
    )


class LinearFn(Function):
    def forward(self, x, w, b=None):
        if x.ndim != 2 or w.ndim != 2:
            raise ShapeError(f"linear expects x[B,F] and weight[O,F], got {x.shape} and {w.shape}")
        if x.shape[1] != w.shape[1]:
            raise ShapeError(f"linear: input features {x.shape[1]} != weight in-features {w.shape[1]}")
        if b is not None and b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias shape {b.shape} does not match out-features {w.shape[0]}")
        self.x, self.w, self.has_bias = x, w, b is not None
        out = x @ w.T
        if b is not None:
            out = out + b
        return out

    def backward(self, g):
        gx = g @ self.w if self.needs[0] else None
        gw = g.T @ self.x if self.needs[1] else None
        if self.has_bias:
            return gx, gw, (g.sum(axis=0) if self.needs[2] else None)
        return gx, gw


def linear(x, weight, bias=None) -> Tensor:
    """``y = x @ weight.T + bias``."""
    if bias is None:
        return LinearFn.apply(x, weight)
    return LinearFn.apply(x, weight, bias)


@dataclass
class LSTMParams:
    """Weights of one LSTM cell; gate order along the 4H axis is i, f, g, o."""

    w_x: Tensor
    w_h: Tensor
    bias: Tensor

    @property
    def hidden(self) -> int:
        return self.w_h.shape[1]


def lstm_step(x, state: tuple, params: LSTMParams) -> tuple[Tensor, Tensor]:
    h, c = state
    H = params.hidden
    if h.shape[-1] != H or c.shape[-1] != H:
        raise ShapeError(f"lstm_step: state sizes {h.shape[-1]}/{c.shape[-1]} != hidden size {H}")
    z = linear(x, params.w_x, params.bias) + linear(h, params.w_h)
    i = sigmoid(z[:, :H])
    f = sigmoid(z[:, H : 2 * H])
    g = tanh(z[:, 2 * H : 3 * H])
    o = sigmoid(z[:, 3 * H :])
    c_new = f * c + i * g
    h_new = o * tanh(c_new)
    return h_new, c_new


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


class SoftmaxCrossEntropyFn(Function):
    def forward(self, logits, target):
        B, K = logits.shape
        self.target = target
        logp = log_softmax_np(logits)
        self.prob = np.exp(logp)
        return np.asarray(-logp[np.arange(B), target].mean(), dtype=logits.dtype)

    def backward(self, g):
        B = self.prob.shape[0]
        grad = self.prob.copy()
        grad[np.arange(B), self.target] -= 1.0
        return grad * (g / B)


def softmax_cross_entropy(logits, target) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``."""
    logits = as_tensor(logits)
    target = np.asarray(target)
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects logits[B,K], got {logits.shape}")
    if target.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: {target.shape[0] if target.ndim else 0} targets for {logits.shape[0]} rows")
    K = logits.shape[1]
    if target.size and (target.min() < 0 or target.max() >= K):
        raise ValueError(f"softmax_cross_entropy: target class outside [0, {K})")
    return SoftmaxCrossEntropyFn.apply(logits, target=target.astype(np.int64))
