"""Dense layers with explicit reverse-mode backward passes.

Every layer caches what it needs during a training-mode forward and
implements ``backward(grad_out) -> grad_in``, writing parameter gradients
into its ``Param`` slots.  Weight-quantized layers (conv, fully connected)
re-quantize their latent weights on every forward; the backward pass routes
the gradient to the latent weights through a straight-through window
(identity inside ``|W| <= alpha1``, zero outside).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .packing import pack, packed_conv2d, packed_matmul
from .quant import (
    QuantKind,
    QuantScheme,
    QuantTensor,
    broadcast_scale,
    dequantize,
    quantize,
)


class Param:
    """A trainable array plus its gradient slot."""

    __slots__ = ("name", "data", "grad")

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.data = np.ascontiguousarray(data)
        self.grad: np.ndarray | None = None


@dataclass(frozen=True)
class ForwardCtx:
    """Per-call forward settings shared by all layers."""

    train: bool = True
    scheme: QuantScheme | None = None
    packed: bool = False


def ste_window(latent: np.ndarray, alpha1: np.ndarray) -> np.ndarray:
    """Straight-through mask: 1 where |W| <= alpha1 (per scale group)."""
    return (np.abs(latent) <= broadcast_scale(np.asarray(alpha1), latent.ndim)).astype(
        latent.dtype
    )


class Layer:
    quantized = False

    def params(self) -> list[Param]:
        return []

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return []

    def forward(self, x: np.ndarray, ctx: ForwardCtx) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _take_cache(self):
        cache = getattr(self, "_cache", None)
        if cache is None:
            raise RuntimeError(
                f"{type(self).__name__}.backward called without a training forward"
            )
        self._cache = None
        return cache


class _QuantizedWeightLayer(Layer):
    """Common machinery for layers whose weight matrix may be quantized.

    ``frozen_quant`` holds pre-packed weights loaded from a quantized model
    file; when set, no re-quantization happens (the latent weights are the
    dequantized values) and the packed path uses the stored planes directly.
    """

    def __init__(self, quantized: bool):
        self.quantized = quantized
        self._cache = None
        self.last_quant: QuantTensor | None = None
        self.frozen_quant = None  # PackedQuantTensor | None

    @property
    def weight(self) -> Param:
        return self._weight

    def _effective_weight(self, ctx: ForwardCtx) -> tuple[np.ndarray, QuantTensor | None]:
        apply = (
            self.quantized
            and self.frozen_quant is None
            and ctx.scheme is not None
            and ctx.scheme.kind is not QuantKind.FULL
        )
        if not apply:
            self.last_quant = None
            return self._weight.data, None
        q = quantize(self._weight.data, ctx.scheme)
        self.last_quant = q
        return dequantize(q), q

    def _packed_weight(self, q: QuantTensor | None):
        if self.frozen_quant is not None:
            return self.frozen_quant
        if q is not None:
            return pack(q)
        return None

    def _latent_grad(self, grad_eff: np.ndarray, q: QuantTensor | None) -> np.ndarray:
        if q is None:
            return grad_eff
        return grad_eff * ste_window(self._weight.data, q.stage_alphas[0])


class Conv3x3(_QuantizedWeightLayer):
    """3x3 convolution, stride 1, zero padding 1 (shape preserving)."""

    def __init__(self, in_ch: int, out_ch: int, quantized: bool, rng: np.random.Generator):
        super().__init__(quantized)
        std = np.sqrt(2.0 / (in_ch * 9))
        w = rng.normal(0.0, std, size=(out_ch, in_ch, 3, 3)).astype(np.float32)
        self._weight = Param("weight", w)
        self.bias = Param("bias", np.zeros(out_ch, dtype=np.float32))
        self.in_ch, self.out_ch = in_ch, out_ch

    def params(self):
        return [self._weight, self.bias]

    def forward(self, x, ctx):
        # accumulate one matmul per kernel offset on a channels-last view:
        # cheaper than materializing the 9x im2col patch matrix
        n, c, h, w = x.shape
        if c != self.in_ch:
            raise ValueError(f"conv expects {self.in_ch} channels, got {c}")
        w_eff, q = self._effective_weight(ctx)
        if ctx.packed:
            pq = self._packed_weight(q)
            if pq is not None:
                out = packed_conv2d(pq, x, stride=1, padding=1)
                return out + self.bias.data[np.newaxis, :, np.newaxis, np.newaxis]
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        xs = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))  # (N, H+2, W+2, C)
        acc = np.zeros((n, h, w, self.out_ch), dtype=np.result_type(x, w_eff))
        for i in range(3):
            for j in range(3):
                acc += xs[:, i : i + h, j : j + w, :] @ np.ascontiguousarray(
                    w_eff[:, :, i, j].T
                )
        out = np.ascontiguousarray((acc + self.bias.data).transpose(0, 3, 1, 2))
        if ctx.train:
            self._cache = (xs, w_eff, q, (n, c, h, w))
        return out

    def backward(self, grad_out):
        xs, w_eff, q, (n, c, h, w) = self._take_cache()
        g_nhwf = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1))
        g_flat = g_nhwf.reshape(-1, self.out_ch)
        grad_w = np.empty_like(w_eff)
        dx_pad = np.zeros((n, h + 2, w + 2, c), dtype=grad_out.dtype)
        for i in range(3):
            for j in range(3):
                x_slice = np.ascontiguousarray(xs[:, i : i + h, j : j + w, :])
                grad_w[:, :, i, j] = g_flat.T @ x_slice.reshape(-1, c)
                dx_pad[:, i : i + h, j : j + w, :] += g_nhwf @ np.ascontiguousarray(
                    w_eff[:, :, i, j]
                )
        self._weight.grad = self._latent_grad(grad_w, q)
        self.bias.grad = g_flat.sum(axis=0)
        return np.ascontiguousarray(
            dx_pad[:, 1 : h + 1, 1 : w + 1, :].transpose(0, 3, 1, 2)
        )


class FullyConnected(_QuantizedWeightLayer):
    """Linear layer; flattens any trailing input dimensions."""

    def __init__(self, in_dim: int, out_dim: int, quantized: bool, rng: np.random.Generator):
        super().__init__(quantized)
        std = np.sqrt(2.0 / in_dim)
        w = rng.normal(0.0, std, size=(out_dim, in_dim)).astype(np.float32)
        self._weight = Param("weight", w)
        self.bias = Param("bias", np.zeros(out_dim, dtype=np.float32))
        self.in_dim, self.out_dim = in_dim, out_dim

    def params(self):
        return [self._weight, self.bias]

    def forward(self, x, ctx):
        orig_shape = x.shape
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.in_dim:
            raise ValueError(f"fc expects {self.in_dim} inputs, got {flat.shape[1]}")
        w_eff, q = self._effective_weight(ctx)
        if ctx.packed:
            pq = self._packed_weight(q)
            if pq is not None:
                return packed_matmul(pq, flat) + self.bias.data
        out = flat @ w_eff.T + self.bias.data
        if ctx.train:
            self._cache = (flat, w_eff, q, orig_shape)
        return out

    def backward(self, grad_out):
        flat, w_eff, q, orig_shape = self._take_cache()
        grad_w = grad_out.T @ flat
        self._weight.grad = self._latent_grad(grad_w, q)
        self.bias.grad = grad_out.sum(axis=0)
        return (grad_out @ w_eff).reshape(orig_shape)


class MaxPool2(Layer):
    """2x2 max pooling, stride 2; odd trailing rows/cols are dropped."""

    def __init__(self):
        self._cache = None

    def forward(self, x, ctx):
        n, c, h, w = x.shape
        he, we = (h // 2) * 2, (w // 2) * 2
        ho, wo = he // 2, we // 2
        tiles = (
            x[:, :, :he, :we]
            .reshape(n, c, ho, 2, wo, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, ho, wo, 4)
        )
        idx = tiles.argmax(axis=-1)
        out = np.take_along_axis(tiles, idx[..., np.newaxis], axis=-1)[..., 0]
        if ctx.train:
            self._cache = (idx, (n, c, h, w))
        return out

    def backward(self, grad_out):
        idx, (n, c, h, w) = self._take_cache()
        ho, wo = grad_out.shape[2], grad_out.shape[3]
        dtile = np.zeros((n, c, ho, wo, 4), dtype=grad_out.dtype)
        np.put_along_axis(dtile, idx[..., np.newaxis], grad_out[..., np.newaxis], axis=-1)
        dx = np.zeros((n, c, h, w), dtype=grad_out.dtype)
        dx[:, :, : ho * 2, : wo * 2] = (
            dtile.reshape(n, c, ho, wo, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, ho * 2, wo * 2)
        )
        return dx


class BatchNorm(Layer):
    """Per-channel batch normalization (channel axis 1)."""

    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Param("gamma", np.ones(num_features, dtype=np.float32))
        self.beta = Param("beta", np.zeros(num_features, dtype=np.float32))
        self.running_mean = np.zeros(num_features, dtype=np.float32)
        self.running_var = np.ones(num_features, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps
        self.num_features = num_features
        self._cache = None

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def _shape_for(self, x):
        return (1, -1) + (1,) * (x.ndim - 2)

    def forward(self, x, ctx):
        shape = self._shape_for(x)
        axes = (0,) + tuple(range(2, x.ndim))
        if ctx.train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.running_mean += self.momentum * (
                mean.astype(np.float32) - self.running_mean
            )
            self.running_var += self.momentum * (var.astype(np.float32) - self.running_var)
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
        out = self.gamma.data.reshape(shape) * xhat + self.beta.data.reshape(shape)
        if ctx.train:
            count = x.size // x.shape[1]
            self._cache = (xhat, inv_std, axes, shape, count)
        return out

    def backward(self, grad_out):
        xhat, inv_std, axes, shape, count = self._take_cache()
        self.gamma.grad = (grad_out * xhat).sum(axis=axes)
        self.beta.grad = grad_out.sum(axis=axes)
        dxhat = grad_out * self.gamma.data.reshape(shape)
        term = (
            dxhat
            - dxhat.mean(axis=axes, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
        )
        return term * inv_std.reshape(shape)


class ReLU(Layer):
    def __init__(self):
        self._cache = None

    def forward(self, x, ctx):
        if ctx.train:
            self._cache = x > 0
        return np.maximum(x, 0)

    def backward(self, grad_out):
        mask = self._take_cache()
        return grad_out * mask


class SubPixel(Layer):
    """Rearranges C*s^2 channels into an s-times upscaled map (pixel shuffle)."""

    def __init__(self, scale: int):
        if scale not in (2, 3, 4):
            raise ValueError(f"subpixel scale must be 2, 3 or 4, got {scale}")
        self.scale = scale
        self._cache = None

    def forward(self, x, ctx):
        n, c, h, w = x.shape
        s = self.scale
        if c % (s * s) != 0:
            raise ValueError(f"{c} channels not divisible by {s * s}")
        co = c // (s * s)
        out = (
            x.reshape(n, co, s, s, h, w)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(n, co, h * s, w * s)
        )
        if ctx.train:
            self._cache = (n, c, h, w)
        return np.ascontiguousarray(out)

    def backward(self, grad_out):
        n, c, h, w = self._take_cache()
        s = self.scale
        co = c // (s * s)
        return (
            grad_out.reshape(n, co, h, s, w, s)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(n, c, h, w)
        )


class Softmax(Layer):
    """Softmax over axis 1; keeps log-probabilities for stable losses."""

    def __init__(self):
        self._cache = None
        self.last_log_probs: np.ndarray | None = None

    def forward(self, x, ctx):
        shifted = x - x.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_probs = shifted - lse
        probs = np.exp(log_probs)
        self.last_log_probs = log_probs
        if ctx.train:
            self._cache = probs
        return probs

    def backward(self, grad_out):
        probs = self._take_cache()
        inner = (grad_out * probs).sum(axis=1, keepdims=True)
        return probs * (grad_out - inner)
