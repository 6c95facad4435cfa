"""Differentiable building blocks on channel-last ``(N, H, W, C)`` arrays.

Each layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients into ``grads`` during ``backward``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


class Conv2d:
    """Stride-1 convolution with zero "same" padding."""

    def __init__(self, name, cin, cout, k, rng, dtype, bias=True):
        self.name, self.cin, self.cout, self.k = name, cin, cout, k
        fan_in = k * k * cin
        self.W = (rng.standard_normal((k, k, cin, cout)) * np.sqrt(2.0 / fan_in)).astype(dtype)
        self.b = np.zeros(cout, dtype=dtype) if bias else None

    def params(self):
        out = [(f"{self.name}.W", self, "W")]
        if self.b is not None:
            out.append((f"{self.name}.b", self, "b"))
        return out

    def forward(self, x):
        n, h, w, c = x.shape
        k = self.k
        if k == 1:
            cols = x.reshape(n * h * w, c)
        else:
            p = k // 2
            xp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
            xp[:, p:p + h, p:p + w, :] = x
            s0, s1, s2, s3 = xp.strides
            win = as_strided(xp, (n, h, w, k, k, c), (s0, s1, s2, s1, s2, s3), writeable=False)
            cols = win.reshape(n * h * w, k * k * c)
        out = cols @ self.W.reshape(k * k * c, self.cout)
        if self.b is not None:
            out += self.b
        self._cache = (cols, x.shape)
        return out.reshape(n, h, w, self.cout)

    def backward(self, dout, grads):
        cols, (n, h, w, c) = self._cache
        k = self.k
        d = dout.reshape(-1, self.cout)
        grads[f"{self.name}.W"] += (cols.T @ d).reshape(self.W.shape)
        if self.b is not None:
            grads[f"{self.name}.b"] += d.sum(axis=0)
        dcols = d @ self.W.reshape(k * k * c, self.cout).T
        if k == 1:
            return dcols.reshape(n, h, w, c)
        p = k // 2
        dcols = dcols.reshape(n, h, w, k, k, c)
        dxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=dout.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + h, j:j + w, :] += dcols[:, :, :, i, j, :]
        return dxp[:, p:p + h, p:p + w, :]


class BatchNorm:
    """Per-channel normalization; batch statistics in training mode."""

    def __init__(self, name, c, dtype, momentum=0.1, eps=1e-5):
        self.name, self.momentum, self.eps = name, momentum, eps
        self.gamma = np.ones(c, dtype=dtype)
        self.beta = np.zeros(c, dtype=dtype)
        self.mean = np.zeros(c, dtype=dtype)
        self.var = np.ones(c, dtype=dtype)

    def params(self):
        return [(f"{self.name}.gamma", self, "gamma"), (f"{self.name}.beta", self, "beta")]

    def buffers(self):
        return [(f"{self.name}.mean", self, "mean"), (f"{self.name}.var", self, "var")]

    def forward(self, x, train):
        if train:
            x2 = x.reshape(-1, x.shape[-1])
            mu = x2.mean(axis=0)
            d = x2 - mu
            var = np.einsum("ij,ij->j", d, d) / len(x2)
            m = self.momentum
            self.mean = ((1 - m) * self.mean + m * mu).astype(self.mean.dtype)
            self.var = ((1 - m) * self.var + m * var).astype(self.var.dtype)
        else:
            mu, var = self.mean, self.var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        self._cache = (xhat, inv, train)
        return xhat * self.gamma + self.beta

    def backward(self, dy, grads):
        xhat, inv, train = self._cache
        grads[f"{self.name}.gamma"] += (dy * xhat).sum(axis=(0, 1, 2))
        grads[f"{self.name}.beta"] += dy.sum(axis=(0, 1, 2))
        dxhat = dy * self.gamma
        if not train:
            return dxhat * inv
        m = dy.shape[0] * dy.shape[1] * dy.shape[2]
        s1 = dxhat.sum(axis=(0, 1, 2))
        s2 = (dxhat * xhat).sum(axis=(0, 1, 2))
        return (inv / m) * (m * dxhat - s1 - xhat * s2)


class ConvBlock:
    """3x3 convolution (no bias), batch norm, ReLU, then dropout in training."""

    def __init__(self, name, cin, cout, rng, dtype, dropout=0.0):
        self.conv = Conv2d(f"{name}.conv", cin, cout, 3, rng, dtype, bias=False)
        self.bn = BatchNorm(f"{name}.bn", cout, dtype)
        self.dropout = dropout

    def params(self):
        return self.conv.params() + self.bn.params()

    def buffers(self):
        return self.bn.buffers()

    def forward(self, x, train, rng=None):
        z = self.bn.forward(self.conv.forward(x), train)
        self._active = z > 0
        a = z * self._active
        self._mask = None
        if train and self.dropout > 0 and rng is not None:
            keep = 1.0 - self.dropout
            self._mask = (rng.random(a.shape) < keep).astype(a.dtype) / keep
            a = a * self._mask
        return a

    def backward(self, da, grads):
        if self._mask is not None:
            da = da * self._mask
        dz = da * self._active
        return self.conv.backward(self.bn.backward(dz, grads), grads)


def maxpool2_forward(x):
    n, h, w, c = x.shape
    blocks = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(n, h // 2, w // 2, c, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape)


def maxpool2_backward(dout, cache):
    arg, (n, h, w, c) = cache
    d = np.zeros((n, h // 2, w // 2, c, 4), dtype=dout.dtype)
    np.put_along_axis(d, arg[..., None], dout[..., None], axis=-1)
    d = d.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return d.reshape(n, h, w, c)


def upsample2_forward(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample2_backward(dout):
    n, h, w, c = dout.shape
    return dout.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def sigmoid(z):
    z = np.clip(z, -40.0, 40.0)
    return 1.0 / (1.0 + np.exp(-z))
