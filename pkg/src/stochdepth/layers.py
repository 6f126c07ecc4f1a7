"""Layer vocabulary with explicit forward and backward passes.

Every ``forward`` returns ``(y, cache)`` and the matching ``backward`` takes
that cache plus the upstream gradient. Parametric layers return their
parameter gradients alongside ``dx`` rather than storing them; the network
decides where gradients live.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import RngStream

__all__ = [
    "Dense",
    "Conv2D",
    "BatchNorm",
    "relu_fwd",
    "relu_bwd",
    "avgpool2d_fwd",
    "avgpool2d_bwd",
    "softmax_xent",
    "init_params",
]


class Dense:
    """Fully connected layer ``y = x W^T + b`` on ``B x in`` inputs."""

    kind = "dense"

    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        self.in_features = in_features
        self.out_features = out_features
        self.params = {"weight": np.zeros((out_features, in_features))}
        if bias:
            self.params["bias"] = np.zeros(out_features)

    @property
    def weight(self) -> np.ndarray:
        return self.params["weight"]

    @property
    def bias(self) -> np.ndarray | None:
        return self.params.get("bias")

    def fan_in(self) -> int:
        return self.in_features

    def forward(self, x: np.ndarray):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ValueError(f"dense expects B x {self.in_features}, got {x.shape}")
        y = x @ self.weight.T
        if self.bias is not None:
            y = y + self.bias
        return y, x

    def backward(self, cache, dy: np.ndarray):
        x = cache
        dx = dy @ self.weight
        dw = dy.T @ x
        db = dy.sum(axis=0) if self.bias is not None else None
        return dx, dw, db

    def flops(self, x_shape) -> int:
        return 2 * x_shape[0] * self.in_features * self.out_features


class Conv2D:
    """3x3 cross-correlation with zero padding 1 and stride 1 or 2."""

    kind = "conv"

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1, bias: bool = True):
        if stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {stride}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.padding = 1
        self.params = {"kernel": np.zeros((out_channels, in_channels, 3, 3))}
        if bias:
            self.params["bias"] = np.zeros(out_channels)

    @property
    def kernel(self) -> np.ndarray:
        return self.params["kernel"]

    @property
    def bias(self) -> np.ndarray | None:
        return self.params.get("bias")

    def fan_in(self) -> int:
        return self.in_channels * 9

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        s = self.stride
        return -(-h // s), -(-w // s)

    def forward(self, x: np.ndarray):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"conv expects B x {self.in_channels} x H x W, got {x.shape}")
        b, c, h, w = x.shape
        s = self.stride
        ho, wo = self.out_hw(h, w)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        # windows: B x C x H x W x 3 x 3
        win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::s, ::s]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * 9)
        y = cols @ self.kernel.reshape(self.out_channels, -1).T
        if self.bias is not None:
            y = y + self.bias
        y = y.reshape(b, ho, wo, self.out_channels).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(y), (x.shape, cols)

    def backward(self, cache, dy: np.ndarray):
        (b, c, h, w), cols = cache
        s = self.stride
        ho, wo = dy.shape[2], dy.shape[3]
        dy2 = dy.transpose(0, 2, 3, 1).reshape(b * ho * wo, self.out_channels)
        dk = (dy2.T @ cols).reshape(self.kernel.shape)
        db = dy2.sum(axis=0) if self.bias is not None else None
        dcols = (dy2 @ self.kernel.reshape(self.out_channels, -1)).reshape(b, ho, wo, c, 3, 3)
        dxp = np.zeros((b, c, h + 2, w + 2))
        for i in range(3):
            for j in range(3):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[..., i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, 1:-1, 1:-1], dk, db

    def flops(self, x_shape) -> int:
        ho, wo = self.out_hw(x_shape[2], x_shape[3])
        return 2 * x_shape[0] * ho * wo * self.out_channels * self.in_channels * 9


class BatchNorm:
    """Per-channel batch normalization for ``B x C`` or ``B x C x H x W`` inputs.

    Training mode normalizes by the batch mean and biased variance and
    updates the running statistics; eval mode uses the running statistics.
    """

    kind = "bn"

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        if not 0 < momentum <= 1:
            raise ValueError("momentum must be in (0, 1]")
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.params = {"gamma": np.ones(channels), "beta": np.zeros(channels)}
        self.buffers = {"running_mean": np.zeros(channels), "running_var": np.ones(channels)}

    @property
    def gamma(self) -> np.ndarray:
        return self.params["gamma"]

    @property
    def beta(self) -> np.ndarray:
        return self.params["beta"]

    @property
    def running_mean(self) -> np.ndarray:
        return self.buffers["running_mean"]

    @property
    def running_var(self) -> np.ndarray:
        return self.buffers["running_var"]

    def _axes(self, x: np.ndarray):
        if x.ndim == 2:
            return (0,), _same
        if x.ndim == 4:
            return (0, 2, 3), _as_channels
        raise ValueError(f"batchnorm expects rank 2 or 4 input, got {x.shape}")

    def forward(self, x: np.ndarray, train: bool = True):
        if x.shape[1] != self.channels:
            raise ValueError(f"batchnorm expects {self.channels} channels, got {x.shape}")
        axes, r = self._axes(x)
        if train:
            if x.shape[0] < 2:
                raise ValueError("batchnorm needs batch size >= 2 in train mode")
            n = x.size // self.channels
            mean = x.sum(axis=axes) / n
            xc = x - r(mean)
            var = (xc * xc).sum(axis=axes) / n
            m = self.momentum
            # in-place keeps any views held by the owning network valid
            self.running_mean[...] = (1 - m) * self.running_mean + m * mean
            self.running_var[...] = (1 - m) * self.running_var + m * var
        else:
            xc = x - r(self.running_mean)
            var = self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * r(inv)
        y = xhat * r(self.gamma) + r(self.beta)
        return y, (xhat, inv, train)

    def backward(self, cache, dy: np.ndarray):
        xhat, inv, train = cache
        axes, r = self._axes(dy)
        dgamma = (dy * xhat).sum(axis=axes)
        dbeta = dy.sum(axis=axes)
        if not train:
            return dy * r(self.gamma * inv), dgamma, dbeta
        n = dy.size // self.channels
        # dx = gamma * inv / n * (n dy - sum(dy) - xhat * sum(dy xhat))
        dx = (dy - r(dbeta / n) - xhat * r(dgamma / n)) * r(self.gamma * inv)
        return dx, dgamma, dbeta

    def flops(self, x_shape) -> int:
        return 8 * math.prod(x_shape)


def _same(a):
    return a


def _as_channels(a):
    return a.reshape(1, -1, 1, 1)


def relu_fwd(x: np.ndarray):
    y = np.maximum(x, 0.0)
    return y, y > 0


def relu_bwd(mask: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * mask


def avgpool2d_fwd(x: np.ndarray, window: int = 2):
    b, c, h, w = x.shape
    if h % window or w % window:
        raise ValueError(f"spatial dims {h}x{w} not divisible by window {window}")
    y = x.reshape(b, c, h // window, window, w // window, window).mean(axis=(3, 5))
    return y, (x.shape, window)


def avgpool2d_bwd(cache, dy: np.ndarray) -> np.ndarray:
    shape, k = cache
    dx = np.repeat(np.repeat(dy, k, axis=2), k, axis=3) / (k * k)
    return dx.reshape(shape)


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy of ``logits`` (B x K) against integer ``labels``.

    Returns ``(loss, dlogits)`` with ``dlogits = (softmax - onehot) / B``.
    """
    labels = np.asarray(labels)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"expected {b} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = float(np.mean(logsumexp - z[rows, labels]))
    probs = np.exp(z - logsumexp[:, None])
    probs[rows, labels] -= 1.0
    return loss, probs / b


def init_params(layer, rng: RngStream):
    """He-normal weights, zero biases, identity batch-norm."""
    if isinstance(layer, BatchNorm):
        layer.gamma[...] = 1.0
        layer.beta[...] = 0.0
        layer.running_mean[...] = 0.0
        layer.running_var[...] = 1.0
        return layer
    name = "kernel" if isinstance(layer, Conv2D) else "weight"
    w = layer.params[name]
    w[...] = rng.normal(math.sqrt(2.0 / layer.fan_in()), w.shape)
    if "bias" in layer.params:
        layer.params["bias"][...] = 0.0
    return layer
