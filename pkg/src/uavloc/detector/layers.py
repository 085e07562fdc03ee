"""Differentiable operators for the pillar network.

Every layer caches what it needs in ``forward`` and returns the input gradient
from ``backward``, accumulating parameter gradients into ``self.grads``.
Parameters live in ``self.params`` keyed by short names.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..validation import ContractError


class Layer:
    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}
        self._cache = None

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def _acc(self, name, g):
        if name in self.grads:
            self.grads[name] += g
        else:
            self.grads[name] = g


class Linear(Layer):
    def __init__(self, n_in, n_out, bias=True, dtype=np.float32):
        super().__init__()
        self.params["weight"] = np.zeros((n_in, n_out), dtype=dtype)
        if bias:
            self.params["bias"] = np.zeros(n_out, dtype=dtype)

    def forward(self, x, train=False):
        self._cache = x
        y = x @ self.params["weight"]
        if "bias" in self.params:
            y = y + self.params["bias"]
        return y

    def backward(self, dy, need_input_grad=True):
        x = self._cache
        self._acc("weight", x.T @ dy)
        if "bias" in self.params:
            self._acc("bias", dy.sum(axis=0, dtype=np.float64).astype(dy.dtype))
        return dy @ self.params["weight"].T if need_input_grad else None


class BatchNorm(Layer):
    """Batch normalization over every axis except the channel axis (axis 1)."""

    def __init__(self, n_channels, momentum=0.01, eps=1e-3, dtype=np.float32):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = np.ones(n_channels, dtype=dtype)
        self.params["beta"] = np.zeros(n_channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(n_channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(n_channels, dtype=dtype)

    @staticmethod
    def _flat(x):
        if x.ndim == 2:
            return x
        return np.moveaxis(x, 1, -1).reshape(-1, x.shape[1])

    @staticmethod
    def _unflat(y, shape):
        if len(shape) == 2:
            return y
        moved = (shape[0],) + tuple(shape[2:]) + (shape[1],)
        return np.moveaxis(y.reshape(moved), -1, 1)

    def forward(self, x, train=False):
        xf = self._flat(x)
        m = xf.shape[0]
        if train:
            if m < 1:
                raise ContractError("batch norm needs at least one sample in train mode")
            mean = xf.mean(axis=0, dtype=np.float64)
            var = xf.var(axis=0, dtype=np.float64)
            mom = self.momentum
            unbiased = var * m / (m - 1) if m > 1 else var
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            self.buffers["running_mean"] = ((1 - mom) * rm + mom * mean).astype(rm.dtype)
            self.buffers["running_var"] = ((1 - mom) * rv + mom * unbiased).astype(rv.dtype)
        else:
            mean = self.buffers["running_mean"].astype(np.float64)
            var = self.buffers["running_var"].astype(np.float64)
        inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = (xf - mean.astype(x.dtype)) * inv_std
        y = xhat * self.params["gamma"] + self.params["beta"]
        self._cache = (xhat, inv_std, train, x.shape)
        return self._unflat(y, x.shape)

    def backward(self, dy):
        xhat, inv_std, train, shape = self._cache
        dyf = self._flat(dy)
        self._acc("gamma", np.sum(dyf * xhat, axis=0, dtype=np.float64).astype(dy.dtype))
        self._acc("beta", np.sum(dyf, axis=0, dtype=np.float64).astype(dy.dtype))
        dxhat = dyf * self.params["gamma"]
        if train:
            m = dyf.shape[0]
            s1 = dxhat.sum(axis=0, dtype=np.float64).astype(dy.dtype)
            s2 = np.sum(dxhat * xhat, axis=0, dtype=np.float64).astype(dy.dtype)
            dx = inv_std * (dxhat - s1 / m - xhat * (s2 / m))
        else:
            dx = dxhat * inv_std
        return self._unflat(dx, shape)


class ReLU(Layer):
    def forward(self, x, train=False):
        self._cache = x > 0
        return np.where(self._cache, x, 0).astype(x.dtype, copy=False)

    def backward(self, dy):
        return np.where(self._cache, dy, 0).astype(dy.dtype, copy=False)


class Conv2d(Layer):
    """Square-kernel 2D convolution with zero padding ``kernel // 2``, NCHW."""

    def __init__(self, n_in, n_out, kernel=3, stride=1, bias=False, dtype=np.float32):
        super().__init__()
        self.kernel = kernel
        self.stride = stride
        self.pad = kernel // 2
        self.params["weight"] = np.zeros((n_out, n_in, kernel, kernel), dtype=dtype)
        if bias:
            self.params["bias"] = np.zeros(n_out, dtype=dtype)

    def out_shape(self, h, w):
        k, s, p = self.kernel, self.stride, self.pad
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, x, train=False):
        B, C, H, W = x.shape
        k, s, p = self.kernel, self.stride, self.pad
        Ho, Wo = self.out_shape(H, W)
        w = self.params["weight"]
        if k == 1 and s == 1:
            cols = np.moveaxis(x, 1, -1).reshape(-1, C)
        else:
            xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
            win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :Ho, :Wo]
            cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
        y = cols @ w.reshape(w.shape[0], -1).T
        if "bias" in self.params:
            y = y + self.params["bias"]
        self._cache = (cols, x.shape, Ho, Wo)
        return np.ascontiguousarray(y.reshape(B, Ho, Wo, -1).transpose(0, 3, 1, 2))

    def backward(self, dy, need_input_grad=True):
        cols, (B, C, H, W), Ho, Wo = self._cache
        k, s, p = self.kernel, self.stride, self.pad
        w = self.params["weight"]
        dyf = dy.transpose(0, 2, 3, 1).reshape(-1, w.shape[0])
        self._acc("weight", (dyf.T @ cols).reshape(w.shape))
        if "bias" in self.params:
            self._acc("bias", dyf.sum(axis=0, dtype=np.float64).astype(dy.dtype))
        if not need_input_grad:
            return None
        dcols = dyf @ w.reshape(w.shape[0], -1)
        if k == 1 and s == 1:
            return np.ascontiguousarray(dcols.reshape(B, H, W, C).transpose(0, 3, 1, 2))
        dcols = dcols.reshape(B, Ho, Wo, C, k, k)
        dxp = np.zeros((B, C, H + 2 * p, W + 2 * p), dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, p:p + H, p:p + W]


class ConvTranspose2d(Layer):
    """Transposed convolution with kernel size equal to stride (non-overlapping)."""

    def __init__(self, n_in, n_out, stride, bias=False, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.params["weight"] = np.zeros((n_in, n_out, stride, stride), dtype=dtype)
        if bias:
            self.params["bias"] = np.zeros(n_out, dtype=dtype)

    def forward(self, x, train=False):
        B, C, H, W = x.shape
        f = self.stride
        w = self.params["weight"]
        n_out = w.shape[1]
        xm = np.moveaxis(x, 1, -1).reshape(-1, C)
        y = (xm @ w.reshape(C, -1)).reshape(B, H, W, n_out, f, f)
        y = y.transpose(0, 3, 1, 4, 2, 5).reshape(B, n_out, H * f, W * f)
        if "bias" in self.params:
            y = y + self.params["bias"][None, :, None, None]
        self._cache = (xm, x.shape)
        return y

    def backward(self, dy):
        xm, (B, C, H, W) = self._cache
        f = self.stride
        w = self.params["weight"]
        n_out = w.shape[1]
        g = dy.reshape(B, n_out, H, f, W, f).transpose(0, 2, 4, 1, 3, 5).reshape(-1, n_out * f * f)
        self._acc("weight", (xm.T @ g).reshape(w.shape))
        if "bias" in self.params:
            self._acc("bias", dy.sum(axis=(0, 2, 3), dtype=np.float64).astype(dy.dtype))
        dx = g @ w.reshape(C, -1).T
        return np.ascontiguousarray(dx.reshape(B, H, W, C).transpose(0, 3, 1, 2))


class MaskedMax(Layer):
    """Max over axis 1 of a (P, N, C) array, ignoring slots where ``mask`` is False."""

    def forward(self, x, mask):
        filled = np.where(mask[:, :, None], x, -np.inf)
        arg = np.argmax(filled, axis=1)
        self._cache = (arg, x.shape)
        out = np.take_along_axis(x, arg[:, None, :], axis=1)[:, 0, :]
        # pillars without real points (never produced by the encoder) stay zero
        return np.where(mask.any(axis=1)[:, None], out, 0).astype(x.dtype)

    def backward(self, dy):
        arg, shape = self._cache
        dx = np.zeros(shape, dtype=dy.dtype)
        np.put_along_axis(dx, arg[:, None, :], dy[:, None, :], axis=1)
        return dx


def sigmoid(x):
    return np.where(x >= 0, 1 / (1 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1 + np.exp(-np.abs(x))))


def _softplus(x):
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def focal_loss(logits, targets, weights, alpha=0.25, gamma=2.0):
    """Sigmoid focal loss summed over anchors, and its gradient w.r.t. the logits.

    ``targets`` is 0/1, ``weights`` zeroes out ignored anchors.
    """
    x = logits.astype(np.float64)
    p = sigmoid(x)
    log_p = -_softplus(-x)
    log_1mp = -_softplus(x)
    pos = targets > 0.5
    loss = np.where(
        pos,
        -alpha * (1 - p) ** gamma * log_p,
        -(1 - alpha) * p ** gamma * log_1mp,
    )
    grad = np.where(
        pos,
        alpha * (1 - p) ** gamma * (gamma * p * log_p - (1 - p)),
        (1 - alpha) * p ** gamma * (p - gamma * (1 - p) * log_1mp),
    )
    return float(np.sum(loss * weights)), (grad * weights).astype(logits.dtype)


def bce_loss(logits, targets, weights):
    x = logits.astype(np.float64)
    loss = _softplus(x) - x * targets
    grad = sigmoid(x) - targets
    return float(np.sum(loss * weights)), (grad * weights).astype(logits.dtype)


def smooth_l1_loss(pred, target, weights, beta=1.0 / 9.0):
    """Smooth-L1 summed over elements; ``weights`` broadcasts over the last axis."""
    d = pred.astype(np.float64) - target
    ad = np.abs(d)
    small = ad < beta
    loss = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta)
    grad = np.where(small, d / beta, np.sign(d))
    return float(np.sum(loss * weights)), (grad * weights).astype(pred.dtype)
