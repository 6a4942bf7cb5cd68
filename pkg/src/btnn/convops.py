"""Shared im2col-style helpers for convolution kernels."""

from __future__ import annotations

import numpy as np


def conv_output_hw(
    h: int, w: int, kh: int, kw: int, stride: int, padding: int
) -> tuple[int, int]:
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(
            f"kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}"
        )
    return ho, wo


def im2col(
    x: np.ndarray, kh: int, kw: int, stride: int = 1, padding: int = 0
) -> tuple[np.ndarray, int, int]:
    """Extract sliding patches from NCHW input.

    Returns ``(patches, ho, wo)`` where patches has shape
    ``(N*ho*wo, C*kh*kw)`` with the channel-major (c, i, j) column order that
    matches a row-major flattened ``(F, C, kh, kw)`` filter bank.
    """
    n, c, h, w = x.shape
    ho, wo = conv_output_hw(h, w, kh, kw, stride, padding)
    if padding > 0:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, :, :]
    # (N, C, ho, wo, kh, kw) -> (N, ho, wo, C, kh, kw)
    patches = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(patches), ho, wo


def dense_conv2d(
    weights: np.ndarray, x: np.ndarray, stride: int = 1, padding: int = 0
) -> np.ndarray:
    """Reference dense convolution: im2col then one matrix multiply."""
    f, c, kh, kw = weights.shape
    if x.shape[1] != c:
        raise ValueError(f"channel mismatch: filters want {c}, input has {x.shape[1]}")
    patches, ho, wo = im2col(x, kh, kw, stride, padding)
    out = patches @ weights.reshape(f, -1).T
    return np.ascontiguousarray(
        out.reshape(x.shape[0], ho, wo, f).transpose(0, 3, 1, 2)
    )
