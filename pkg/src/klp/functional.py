"""Differentiable layer operations on NCHW tensors.

Convolution is cross-correlation (no kernel flip) evaluated through a strided
window view, so the forward pass is a single tensordot per layer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, make_result


class ShapeError(ValueError):
    pass


@dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 1

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ShapeError(f"conv weight must be (out, in, kh, kw), got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"conv bias shape {self.bias.shape} does not match weight {self.weight.shape}")
        kh, kw = self.weight.shape[2:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"kernel size must be odd, got {kh}x{kw}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be positive and padding non-negative")

    @classmethod
    def init(cls, in_channels: int, out_channels: int, rng: np.random.Generator,
             kernel: int = 3, stride: int = 1, padding: Optional[int] = None) -> "ConvParams":
        """He-normal initialisation for a ReLU network."""
        fan_in = in_channels * kernel * kernel
        w = rng.standard_normal((out_channels, in_channels, kernel, kernel)) * np.sqrt(2.0 / fan_in)
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros(out_channels), requires_grad=True),
                   stride=stride, padding=kernel // 2 if padding is None else padding)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5
    mode: str = "train"

    @classmethod
    def init(cls, channels: int, momentum: float = 0.1, epsilon: float = 1e-5) -> "BatchNormState":
        return cls(Tensor(np.ones(channels), requires_grad=True),
                   Tensor(np.zeros(channels), requires_grad=True),
                   np.zeros(channels), np.ones(channels), momentum, epsilon)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    if x.ndim != 4 or x.shape[1] != params.in_channels:
        raise ShapeError(f"conv2d input shape {x.shape} incompatible with weight shape {params.weight.shape}")
    w, b = params.weight, params.bias
    s, p = params.stride, params.padding
    n, c, h, wd = x.shape
    kh, kw = w.shape[2:]
    ho, wo = conv_output_size(h, kh, s, p), conv_output_size(wd, kw, s, p)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d input shape {x.shape} too small for weight shape {w.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    # (N, C, Ho, Wo, kh, kw)
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, O
    out = out.transpose(0, 3, 1, 2) + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))  # O, C, kh, kw
        gb = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            gcols = np.tensordot(g, w.data, axes=([1], [0]))  # N, Ho, Wo, C, kh, kw
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
        return gx, gw, gb

    return make_result(out, (x, w, b), backward)


def maxpool2d(x: Tensor, window: int = 2, stride: Optional[int] = None) -> Tensor:
    stride = window if stride is None else stride
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects NCHW input, got {x.shape}")
    n, c, h, wd = x.shape
    if window > h or window > wd:
        raise ShapeError(f"pool window {window} larger than spatial size {h}x{wd}")
    ho, wo = (h - window) // stride + 1, (wd - window) // stride + 1
    win = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        for k in range(window * window):
            i, j = divmod(k, window)
            gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.where(arg == k, g, 0.0)
        return (gx,)

    return make_result(out, (x,), backward)


def avgpool2d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping average pooling; spatial size must be divisible by ``window``."""
    n, c, h, wd = x.shape
    if h % window or wd % window:
        raise ShapeError(f"avgpool2d window {window} does not divide {h}x{wd}")
    out = x.data.reshape(n, c, h // window, window, wd // window, window).mean(axis=(3, 5))

    def backward(g):
        gx = np.repeat(np.repeat(g, window, axis=2), window, axis=3) / (window * window)
        return (gx,)

    return make_result(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over H and W: (N, C, H, W) -> (N, C)."""
    n, c, h, wd = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * wd), x.shape).copy(),)

    return make_result(out, (x,), backward)


def batchnorm2d(x: Tensor, state: BatchNormState) -> Tensor:
    """Per-channel batch normalisation.

    Train mode normalises with biased batch statistics over (N, H, W) and
    folds them into the running buffers (running variance uses the unbiased
    estimate). Eval mode uses the frozen buffers.
    """
    if x.ndim != 4 or x.shape[1] != state.channels:
        raise ShapeError(f"batchnorm2d input shape {x.shape} does not match {state.channels} channels")
    gamma, beta, eps = state.gamma, state.beta, state.epsilon
    g4 = gamma.data[None, :, None, None]
    if state.mode == "train":
        n, c, h, wd = x.shape
        if n < 2:
            raise ShapeError("batchnorm2d in train mode needs a batch of at least 2")
        m = n * h * wd
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
        mom = state.momentum
        state.running_mean = (1 - mom) * state.running_mean + mom * mean
        state.running_var = (1 - mom) * state.running_var + mom * var * m / (m - 1)

        def backward(g):
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
            gbeta = g.sum(axis=(0, 2, 3))
            gxhat = g * g4
            gx = (inv_std[None, :, None, None] / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            )
            return gx, ggamma, gbeta
    elif state.mode == "eval":
        inv_std = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (x.data - state.running_mean[None, :, None, None]) * inv_std[None, :, None, None]

        def backward(g):
            return (g * g4 * inv_std[None, :, None, None], (g * xhat).sum(axis=(0, 2, 3)),
                    g.sum(axis=(0, 2, 3)))
    else:
        raise ValueError(f"unknown batchnorm mode {state.mode!r}")
    out = xhat * g4 + beta.data[None, :, None, None]
    return make_result(out, (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return make_result(np.where(mask, x.data, 0.0), (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return make_result(out, (x,), backward)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear input shape {x.shape} incompatible with weight shape {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear bias shape {bias.shape} does not match weight shape {weight.shape}")
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return make_result(out, (x, weight, bias), backward)


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


def channel_concat(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate channels of {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward(g):
        return g[:, :ca], g[:, ca:]

    return make_result(out, (a, b), backward)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits) -> np.ndarray:
    """Row-wise softmax of raw logits (no graph)."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    z = data - data.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under the row softmax of ``logits``."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.int64)
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        return (grad * (g / n),)

    return make_result(np.array(loss), (logits,), backward)


def bce_with_logits(logits: Tensor, targets: np.ndarray, reduction: str = "sum") -> Tensor:
    """Binary cross-entropy on raw logits; ``reduction`` is ``sum`` or ``mean``."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"targets shape {t.shape} does not match logits {logits.shape}")
    z = logits.data
    # log(1 + exp(-|z|)) + max(z, 0) - z t
    per = np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0) - z * t
    scale = 1.0 if reduction == "sum" else 1.0 / z.size

    def backward(g):
        return ((_sigmoid(z) - t) * (g * scale),)

    return make_result(np.array(per.sum() * scale), (logits,), backward)


def masked_squared_error(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Sum of squared errors over entries where ``mask`` is set."""
    t = np.asarray(target, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    diff = (pred.data - t) * m

    def backward(g):
        return (2.0 * diff * g,)

    return make_result(np.array((diff * diff).sum()), (pred,), backward)
