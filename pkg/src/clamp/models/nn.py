"""Numpy neural-net layers with hand-derived backprop.

Every layer exposes forward(x, train) / backward(dy) and owns its
parameters; convolutions run as chunked im2col + GEMM so the heavy work
stays inside BLAS. Padding supports "zeros" and "circular"; circular
padding on every conv and pool makes the global-average-pooled features
exactly invariant to circular time shifts, which the tests exploit.

Gradients are exact, not approximated: batch norm backpropagates through
the batch statistics and the finite-difference checker at the bottom is
the referee.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

PAD_MODES = ("zeros", "circular")


class Param:
    """A trainable tensor with an accumulated gradient."""

    __slots__ = ("data", "grad", "name")

    def __init__(self, data: np.ndarray, name: str = "") -> None:
        self.data = np.ascontiguousarray(data)
        self.grad = np.zeros_like(self.data)
        self.name = name


class Layer:
    """Base layer: stateless ones only override forward/backward."""

    def params(self) -> list[Param]:
        return []

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def _check_pad_mode(pad_mode: str) -> None:
    if pad_mode not in PAD_MODES:
        raise ValueError(f"pad_mode must be one of {PAD_MODES}, got {pad_mode!r}")


def _pad_time(x: np.ndarray, left: int, right: int, pad_mode: str) -> np.ndarray:
    """Pad the last axis; circular mode wraps values instead of zeros."""
    if left == 0 and right == 0:
        return x
    if pad_mode == "zeros":
        return np.pad(x, ((0, 0), (0, 0), (left, right)))
    n = x.shape[-1]
    if left > n or right > n:
        raise ValueError("circular padding wider than the sequence")
    parts = []
    if left:
        parts.append(x[..., n - left :])
    parts.append(x)
    if right:
        parts.append(x[..., :right])
    return np.concatenate(parts, axis=-1)


def _unpad_time(
    dxp: np.ndarray, left: int, right: int, n: int, pad_mode: str
) -> np.ndarray:
    """Adjoint of _pad_time: slice off pads, folding them back if circular."""
    dx = dxp[..., left : left + n].copy()
    if pad_mode == "circular":
        if left:
            dx[..., n - left :] += dxp[..., :left]
        if right:
            dx[..., :right] += dxp[..., left + n :]
    return dx


def _im2col_chunks(
    xp: np.ndarray, kernel: int, chunk_bytes: int = 1 << 28
) -> Iterable[tuple[slice, np.ndarray]]:
    """Yield (batch slice, (b*T, C*K) window matrix) chunks of bounded size."""
    b, c, t_pad = xp.shape
    t_out = t_pad - kernel + 1
    per_item = c * kernel * t_out * xp.itemsize
    step = max(1, chunk_bytes // max(per_item, 1))
    for i in range(0, b, step):
        sl = slice(i, min(i + step, b))
        win = np.lib.stride_tricks.sliding_window_view(xp[sl], kernel, axis=2)
        nb = win.shape[0]
        cols = win.transpose(0, 2, 1, 3).reshape(nb * t_out, c * kernel)
        yield sl, cols


def _conv_valid(xp: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Valid cross-correlation of (B, C, Tp) with (O, C, K) -> (B, O, Tp-K+1)."""
    b, c, t_pad = xp.shape
    o, _, k = weight.shape
    t_out = t_pad - k + 1
    w2 = weight.reshape(o, c * k).T
    y = np.empty((b, o, t_out), dtype=xp.dtype)
    for sl, cols in _im2col_chunks(xp, k):
        nb = sl.stop - sl.start
        y[sl] = (cols @ w2).reshape(nb, t_out, o).transpose(0, 2, 1)
    return y


class Conv1d(Layer):
    """Same-length 1-D convolution; even kernels pad one extra on the right."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        pad_mode: str = "zeros",
        bias: bool = True,
        rng: np.random.Generator | None = None,
        dtype: np.dtype | type = np.float32,
        name: str = "conv",
    ) -> None:
        if kernel_size < 1:
            raise ValueError("kernel_size must be >= 1")
        _check_pad_mode(pad_mode)
        rng = rng or np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.pad_left = (kernel_size - 1) // 2
        self.pad_right = kernel_size // 2
        self.pad_mode = pad_mode
        bound = math.sqrt(6.0 / (in_channels * kernel_size))
        self.weight = Param(
            rng.uniform(-bound, bound, (out_channels, in_channels, kernel_size)).astype(
                dtype
            ),
            name=f"{name}.weight",
        )
        self.bias = (
            Param(np.zeros(out_channels, dtype=dtype), name=f"{name}.bias")
            if bias
            else None
        )
        self._xp: np.ndarray | None = None
        self._n: int = 0

    def params(self) -> list[Param]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        if x.ndim != 3 or x.shape[1] != self.in_channels:
            raise ValueError(
                f"expected (B, {self.in_channels}, T) input, got {x.shape}"
            )
        self._n = x.shape[2]
        xp = _pad_time(x, self.pad_left, self.pad_right, self.pad_mode)
        self._xp = xp if train else None
        y = _conv_valid(xp, self.weight.data)
        if self.bias is not None:
            y += self.bias.data[None, :, None]
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._xp is None:
            raise RuntimeError("backward before a train-mode forward")
        xp, k = self._xp, self.kernel_size
        o, c = self.out_channels, self.in_channels
        b, _, t_out = dy.shape

        dw2 = np.zeros((o, c * k), dtype=self.weight.data.dtype)
        dy_bt = dy.transpose(0, 2, 1)
        for sl, cols in _im2col_chunks(xp, k):
            nb = sl.stop - sl.start
            dw2 += dy_bt[sl].reshape(nb * t_out, o).T @ cols
        self.weight.grad += dw2.reshape(o, c, k)
        if self.bias is not None:
            self.bias.grad += dy.sum(axis=(0, 2))

        # dx: full correlation of dy with the kernel flipped in time and
        # transposed in channels, then the pad adjoint.
        w_rev = self.weight.data[:, :, ::-1].transpose(1, 0, 2)
        dyp = _pad_time(dy, k - 1, k - 1, "zeros")
        dxp = _conv_valid(dyp, np.ascontiguousarray(w_rev))
        return _unpad_time(dxp, self.pad_left, self.pad_right, self._n, self.pad_mode)


class BatchNorm1d(Layer):
    """Per-channel batch norm over (batch, time); full backward through stats."""

    def __init__(
        self,
        channels: int,
        momentum: float = 0.1,
        eps: float = 1e-5,
        dtype: np.dtype | type = np.float32,
        name: str = "bn",
    ) -> None:
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Param(np.ones(channels, dtype=dtype), name=f"{name}.gamma")
        self.beta = Param(np.zeros(channels, dtype=dtype), name=f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)
        self._cache: tuple | None = None

    def params(self) -> list[Param]:
        return [self.gamma, self.beta]

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        if x.ndim != 3 or x.shape[1] != self.channels:
            raise ValueError(f"expected (B, {self.channels}, T), got {x.shape}")
        if train:
            mu = x.mean(axis=(0, 2))
            var = x.var(axis=(0, 2))
            self.running_mean += self.momentum * (mu.astype(np.float64) - self.running_mean)
            self.running_var += self.momentum * (var.astype(np.float64) - self.running_var)
        else:
            mu = self.running_mean.astype(x.dtype)
            var = self.running_var.astype(x.dtype)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu[None, :, None]) * inv_std[None, :, None]
        self._cache = (xhat, inv_std) if train else None
        return self.gamma.data[None, :, None] * xhat + self.beta.data[None, :, None]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward before a train-mode forward")
        xhat, inv_std = self._cache
        n = dy.shape[0] * dy.shape[2]
        self.gamma.grad += (dy * xhat).sum(axis=(0, 2))
        self.beta.grad += dy.sum(axis=(0, 2))
        dxhat = dy * self.gamma.data[None, :, None]
        sum_dxhat = dxhat.sum(axis=(0, 2), keepdims=True)
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
        return (
            inv_std[None, :, None]
            * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n)
        )


class ReLU(Layer):
    def __init__(self) -> None:
        self._mask: np.ndarray | None = None

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        mask = x > 0
        self._mask = mask if train else None
        return x * mask

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._mask is None:
            raise RuntimeError("backward before a train-mode forward")
        return dy * self._mask


class MaxPool1d(Layer):
    """Stride-1, same-length max pool; zeros mode pads with -inf."""

    def __init__(self, window: int = 3, pad_mode: str = "zeros") -> None:
        if window < 1:
            raise ValueError("window must be >= 1")
        _check_pad_mode(pad_mode)
        self.window = window
        self.pad_left = (window - 1) // 2
        self.pad_right = window // 2
        self.pad_mode = pad_mode
        self._cache: tuple | None = None

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        if x.ndim != 3:
            raise ValueError(f"expected (B, C, T), got {x.shape}")
        if self.pad_mode == "zeros":
            xp = np.pad(
                x,
                ((0, 0), (0, 0), (self.pad_left, self.pad_right)),
                constant_values=-np.inf,
            )
        else:
            xp = _pad_time(x, self.pad_left, self.pad_right, "circular")
        win = np.lib.stride_tricks.sliding_window_view(xp, self.window, axis=2)
        amax = win.argmax(axis=3)
        y = np.take_along_axis(win, amax[..., None], axis=3)[..., 0]
        self._cache = (amax, x.shape, xp.shape[2]) if train else None
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward before a train-mode forward")
        amax, x_shape, t_pad = self._cache
        b, c, t = x_shape
        base = np.arange(t, dtype=np.intp)[None, None, :]
        pos_in_pad = base + amax  # window start == output index (stride 1)
        row = (np.arange(b, dtype=np.intp)[:, None, None] * c
               + np.arange(c, dtype=np.intp)[None, :, None])
        flat = (row * t_pad + pos_in_pad).ravel()
        dxp = np.bincount(
            flat, weights=dy.ravel().astype(np.float64), minlength=b * c * t_pad
        ).reshape(b, c, t_pad).astype(dy.dtype)
        return _unpad_time(dxp, self.pad_left, self.pad_right, t, self.pad_mode)


class GlobalAvgPool1d(Layer):
    """(B, C, T) -> (B, C) time average."""

    def __init__(self) -> None:
        self._t = 0

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        if x.ndim != 3:
            raise ValueError(f"expected (B, C, T), got {x.shape}")
        self._t = x.shape[2]
        return x.mean(axis=2)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return np.repeat(dy[:, :, None] / self._t, self._t, axis=2)


class Dense(Layer):
    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator | None = None,
        dtype: np.dtype | type = np.float32,
        name: str = "dense",
    ) -> None:
        rng = rng or np.random.default_rng(0)
        bound = math.sqrt(6.0 / in_features)
        self.weight = Param(
            rng.uniform(-bound, bound, (in_features, out_features)).astype(dtype),
            name=f"{name}.weight",
        )
        self.bias = Param(np.zeros(out_features, dtype=dtype), name=f"{name}.bias")
        self._x: np.ndarray | None = None

    def params(self) -> list[Param]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.weight.data.shape[0]:
            raise ValueError(
                f"expected (B, {self.weight.data.shape[0]}), got {x.shape}"
            )
        self._x = x if train else None
        return x @ self.weight.data + self.bias.data

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise RuntimeError("backward before a train-mode forward")
        self.weight.grad += self._x.T @ dy
        self.bias.grad += dy.sum(axis=0)
        return dy @ self.weight.data.T


class ChannelStandardize(Layer):
    """Fixed per-channel (x - mean) / std for (B, C, T) inputs.

    The statistics are buffers, not parameters: they come from the
    training set and are frozen into checkpoints.
    """

    def __init__(self, mean: np.ndarray, std: np.ndarray) -> None:
        mean = np.asarray(mean, dtype=np.float64).ravel()
        std = np.asarray(std, dtype=np.float64).ravel()
        if mean.shape != std.shape:
            raise ValueError("mean and std must have equal length")
        if np.any(std <= 0):
            raise ValueError("std entries must be > 0")
        self.mean = mean
        self.std = std

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        if x.ndim != 3 or x.shape[1] != self.mean.size:
            raise ValueError(f"expected (B, {self.mean.size}, T), got {x.shape}")
        m = self.mean.astype(x.dtype)[None, :, None]
        s = self.std.astype(x.dtype)[None, :, None]
        return (x - m) / s

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return dy / self.std.astype(dy.dtype)[None, :, None]


class Sequential(Layer):
    def __init__(self, layers: Sequence[Layer]) -> None:
        self.layers = list(layers)

    def params(self) -> list[Param]:
        out: list[Param] = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


# --------------------------------------------------------------------------
# Losses and optimization


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def weighted_cross_entropy(
    logits: np.ndarray,
    labels: np.ndarray,
    class_weights: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Mean over the batch of w[y] * (-log p[y]); returns (loss, dlogits)."""
    if logits.ndim != 2:
        raise ValueError(f"expected (B, C) logits, got {logits.shape}")
    b, c = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise ValueError("labels must be (B,) ints")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError("label out of range")
    w = (
        np.ones(c, dtype=np.float64)
        if class_weights is None
        else np.asarray(class_weights, dtype=np.float64)
    )
    if w.shape != (c,):
        raise ValueError("class_weights must be (C,)")
    logp = log_softmax(logits.astype(np.float64))
    wy = w[labels]
    loss = float(np.mean(-wy * logp[np.arange(b), labels]))
    d = softmax(logits.astype(np.float64))
    d[np.arange(b), labels] -= 1.0
    d *= (wy / b)[:, None]
    return loss, d.astype(logits.dtype)


class Adam:
    def __init__(
        self,
        params: Sequence[Param],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ) -> None:
        if lr <= 0:
            raise ValueError("lr must be > 0")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self._v = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad[...] = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad.astype(np.float64)
            if self.weight_decay:
                g = g + self.weight_decay * p.data.astype(np.float64)
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data -= (self.lr * update).astype(p.data.dtype)


# --------------------------------------------------------------------------
# Gradient verification


def finite_difference_check(
    loss_fn: Callable[[], float],
    params: Sequence[Param],
    rng: np.random.Generator,
    n_coords: int = 200,
    h: float = 1e-5,
) -> float:
    """Max relative error between stored grads and central differences.

    Backpropagate once (filling param.grad) before calling; loss_fn must
    recompute the same scalar loss from the current parameter values.
    Parameters should be float64 or h swamps the arithmetic.
    """
    sizes = [p.data.size for p in params]
    total = sum(sizes)
    if total == 0:
        raise ValueError("no parameters to check")
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    bounds = np.cumsum([0] + sizes)
    worst = 0.0
    for flat in sorted(int(i) for i in picks):
        pi = int(np.searchsorted(bounds, flat, side="right") - 1)
        j = flat - bounds[pi]
        p = params[pi]
        orig = p.data.flat[j]
        p.data.flat[j] = orig + h
        lp = loss_fn()
        p.data.flat[j] = orig - h
        lm = loss_fn()
        p.data.flat[j] = orig
        fd = (lp - lm) / (2.0 * h)
        bp = float(p.grad.flat[j])
        rel = abs(fd - bp) / max(abs(fd), abs(bp), 1e-8)
        worst = max(worst, rel)
    return worst
