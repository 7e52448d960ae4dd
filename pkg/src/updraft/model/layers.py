"""Layers with hand-written backward passes.

Arrays are channels-first, ``(N, C, *spatial)`` with 2 or 3 spatial axes.
Each layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``self.grads`` on ``backward``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = ["Conv", "BatchNorm", "ReLU", "MaxPool", "Upsample", "glorot_uniform"]


def glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    params: dict
    grads: dict

    def __init__(self):
        self.params = {}
        self.grads = {}

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)


class Conv(Layer):
    """Stride-1 'same' convolution (cross-correlation) with odd kernels."""

    def __init__(self, c_in, c_out, kernel, ndim, rng, dtype=np.float64):
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        self.ndim = ndim
        self.kernel = (kernel,) * ndim
        k_elems = kernel**ndim
        self.params["W"] = glorot_uniform(
            rng, (c_out, c_in) + self.kernel, c_in * k_elems, c_out * k_elems, dtype
        )
        self.params["b"] = np.zeros(c_out, dtype=dtype)
        self.zero_grad()
        self._pad = kernel // 2
        self._cache = None

    def _windows(self, x):
        p = self._pad
        xp = np.pad(x, [(0, 0), (0, 0)] + [(p, p)] * self.ndim) if p else x
        axes = tuple(range(2, 2 + self.ndim))
        return sliding_window_view(xp, self.kernel, axis=axes)

    def forward(self, x, train=False):
        nd = self.ndim
        win = self._windows(x)  # (N, C, *S, *K)
        k_axes = list(range(2 + nd, 2 + 2 * nd))
        out = np.tensordot(win, self.params["W"], axes=([1] + k_axes, [1] + list(range(2, 2 + nd))))
        out = np.moveaxis(out, -1, 1)  # (N, O, *S)
        out += self.params["b"].reshape((1, -1) + (1,) * nd)
        self._cache = x
        return out

    def backward(self, dout):
        nd = self.ndim
        x = self._cache
        s_axes = list(range(2, 2 + nd))
        win = self._windows(x)
        self.grads["W"] += np.tensordot(dout, win, axes=([0] + s_axes, [0] + s_axes))
        self.grads["b"] += dout.sum(axis=tuple([0] + s_axes))
        wflip = np.flip(self.params["W"], axis=tuple(range(2, 2 + nd)))
        dwin = self._windows(dout)  # (N, O, *S, *K)
        k_axes = list(range(2 + nd, 2 + 2 * nd))
        dx = np.tensordot(dwin, wflip, axes=([1] + k_axes, [0] + list(range(2, 2 + nd))))
        return np.moveaxis(dx, -1, 1)


class BatchNorm(Layer):
    """Per-channel normalization over batch and spatial axes."""

    def __init__(self, channels, ndim, dtype=np.float64, momentum=0.9, eps=1e-3):
        super().__init__()
        self.ndim = ndim
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.zero_grad()
        self._cache = None

    def _shape(self):
        return (1, -1) + (1,) * self.ndim

    def forward(self, x, train=False):
        axes = (0,) + tuple(range(2, 2 + self.ndim))
        g = self.params["gamma"].reshape(self._shape())
        b = self.params["beta"].reshape(self._shape())
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.running_mean = m * self.running_mean + (1 - m) * mean
            self.running_var = m * self.running_var + (1 - m) * var
        else:
            mean, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(self._shape())) * inv.reshape(self._shape())
        self._cache = (xhat, inv, train)
        return g * xhat + b

    def backward(self, dout):
        xhat, inv, train = self._cache
        axes = (0,) + tuple(range(2, 2 + self.ndim))
        self.grads["gamma"] += (dout * xhat).sum(axis=axes)
        self.grads["beta"] += dout.sum(axis=axes)
        g = self.params["gamma"].reshape(self._shape())
        dxhat = dout * g
        inv = inv.reshape(self._shape())
        if not train:
            return dxhat * inv
        m = dout.size / dout.shape[1]
        return (inv / m) * (
            m * dxhat
            - dxhat.sum(axis=axes, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
        )


class ReLU(Layer):
    def forward(self, x, train=False):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask


def _blocked(x, f, nd):
    """View ``(N, C, [D,] H, W)`` as ``(N, C, [D,] H/f, f, W/f, f)``."""
    *lead, h, w = x.shape
    return x.reshape(*lead, h // f, f, w // f, f)


class MaxPool(Layer):
    """Max over non-overlapping ``f x f`` horizontal blocks (last two axes)."""

    def __init__(self, factor, ndim):
        super().__init__()
        self.f = factor
        self.ndim = ndim

    def forward(self, x, train=False):
        f = self.f
        if f == 1:
            self._shape = None
            return x
        b = _blocked(x, f, self.ndim)
        b = np.moveaxis(b, -3, -2)  # (..., H/f, W/f, f, f)
        flat = b.reshape(*b.shape[:-2], f * f)
        arg = flat.argmax(axis=-1)
        self._arg = arg
        self._shape = x.shape
        return np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        f = self.f
        if f == 1:
            return dout
        flat = np.zeros(dout.shape + (f * f,), dtype=dout.dtype)
        np.put_along_axis(flat, self._arg[..., None], dout[..., None], axis=-1)
        b = flat.reshape(*dout.shape, f, f)
        b = np.moveaxis(b, -2, -3)  # (..., H/f, f, W/f, f)
        return b.reshape(self._shape)


class Upsample(Layer):
    """Nearest-neighbour repeat by ``f`` along the last two axes."""

    def __init__(self, factor, ndim):
        super().__init__()
        self.f = factor
        self.ndim = ndim

    def forward(self, x, train=False):
        f = self.f
        if f == 1:
            return x
        return x.repeat(f, axis=-2).repeat(f, axis=-1)

    def backward(self, dout):
        f = self.f
        if f == 1:
            return dout
        return _blocked(dout, f, self.ndim).sum(axis=(-3, -1))
