"""Numpy layers with explicit backward passes.

Every tensor is laid out NCHW. A layer caches what it needs during
``forward`` and consumes that cache in ``backward``, which returns the
gradient w.r.t. the layer input and writes parameter gradients into
``self.grads`` (overwriting, not accumulating).
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x, train=True):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError


class Conv2d(Layer):
    """k×k convolution, zero padding ``k // 2``, optional stride and bias."""

    def __init__(self, cin, cout, k=3, stride=1, bias=False):
        super().__init__()
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        self.pad = k // 2
        self.params["weight"] = np.zeros((cout, cin, k, k))
        if bias:
            self.params["bias"] = np.zeros(cout)
        self._cache = None

    def init(self, rng: np.random.Generator):
        fan_in = self.cin * self.k * self.k
        w = rng.standard_normal(self.params["weight"].shape) * np.sqrt(2.0 / fan_in)
        self.params["weight"] = w.astype(self.params["weight"].dtype)
        if "bias" in self.params:
            self.params["bias"][...] = 0.0

    def _cols(self, x):
        p, s, k = self.pad, self.stride, self.k
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        # (N, C, Ho, Wo, k, k)
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        return xp.shape, win

    def forward(self, x, train=True):
        if x.shape[1] != self.cin:
            raise ValueError(f"conv expects {self.cin} input channels, got {x.shape[1]}")
        xp_shape, win = self._cols(x)
        w = self.params["weight"]
        out = np.einsum("nchwij,ocij->nohw", win, w, optimize=True)
        if "bias" in self.params:
            out = out + self.params["bias"][None, :, None, None]
        self._cache = (x.shape, xp_shape, win)
        return out

    def backward(self, dout):
        x_shape, xp_shape, win = self._cache
        w = self.params["weight"]
        self.grads["weight"] = np.einsum("nchwij,nohw->ocij", win, dout, optimize=True)
        if "bias" in self.params:
            self.grads["bias"] = dout.sum(axis=(0, 2, 3))
        s, p, k = self.stride, self.pad, self.k
        ho, wo = dout.shape[2], dout.shape[3]
        dxp = np.zeros(xp_shape, dtype=dout.dtype)
        # (N, C, Ho, Wo, k, k) contribution of every output cell to every tap
        dwin = np.einsum("nohw,ocij->nchwij", dout, w, optimize=True)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dwin[..., i, j]
        if p:
            dxp = dxp[:, :, p:-p, p:-p]
        return dxp


class BatchNorm2d(Layer):
    """Per-channel batch norm: batch statistics in train mode, running in eval."""

    def __init__(self, c):
        super().__init__()
        self.params["gamma"] = np.ones(c)
        self.params["beta"] = np.zeros(c)
        self.buffers["running_mean"] = np.zeros(c)
        self.buffers["running_var"] = np.ones(c)
        self._cache = None

    def forward(self, x, train=True):
        g = self.params["gamma"][None, :, None, None]
        b = self.params["beta"][None, :, None, None]
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * m / max(m - 1, 1)
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm *= 1 - BN_MOMENTUM
            rm += BN_MOMENTUM * mean
            rv *= 1 - BN_MOMENTUM
            rv += BN_MOMENTUM * unbiased
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        self._cache = (xhat, inv_std, train)
        return g * xhat + b

    def backward(self, dout):
        xhat, inv_std, train = self._cache
        gamma = self.params["gamma"]
        self.grads["gamma"] = (dout * xhat).sum(axis=(0, 2, 3))
        self.grads["beta"] = dout.sum(axis=(0, 2, 3))
        dxhat = dout * gamma[None, :, None, None]
        scale = inv_std[None, :, None, None]
        if not train:
            return dxhat * scale
        m = dout.shape[0] * dout.shape[2] * dout.shape[3]
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        return scale / m * (m * dxhat - s1 - xhat * s2)


class ReLU(Layer):
    def forward(self, x, train=True):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask


def sigmoid(x):
    # split on sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class ConvBNReLU(Layer):
    """conv3×3 → BN → ReLU, the unit used by both the trunk and the EAM."""

    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv = Conv2d(cin, cout, 3, stride=stride)
        self.bn = BatchNorm2d(cout)
        self.relu = ReLU()

    def children(self):
        return {"conv": self.conv, "bn": self.bn}

    def forward(self, x, train=True):
        return self.relu.forward(self.bn.forward(self.conv.forward(x, train), train))

    def backward(self, dout):
        return self.conv.backward(self.bn.backward(self.relu.backward(dout)))


@lru_cache(maxsize=64)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D linear interpolation matrix, half-pixel centres (no corner alignment)."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    m.setflags(write=False)
    return m


def upsample_bilinear(x: np.ndarray, factor: int) -> np.ndarray:
    """Bilinear upsampling of the last two axes by an integer factor."""
    h, w = x.shape[-2:]
    mh = _interp_matrix(h, h * factor)
    mw = _interp_matrix(w, w * factor)
    return (mh @ x @ mw.T).astype(x.dtype, copy=False)


def upsample_bilinear_backward(dout: np.ndarray, factor: int) -> np.ndarray:
    H, W = dout.shape[-2:]
    mh = _interp_matrix(H // factor, H)
    mw = _interp_matrix(W // factor, W)
    return (mh.T @ dout @ mw).astype(dout.dtype, copy=False)


def collect(prefix: str, layer) -> list[tuple[str, Layer]]:
    """Flatten a layer tree into ``(dotted.name, leaf)`` pairs."""
    kids = layer.children() if hasattr(layer, "children") else None
    if not kids:
        return [(prefix, layer)]
    out = []
    for name, child in kids.items():
        out.extend(collect(f"{prefix}.{name}" if prefix else name, child))
    return out
