"""Binary, ternary, and two-stage residual (BT) weight quantizers.

All quantizers map a full-precision weight tensor to one or two integer code
planes (values in {-1, 0, 1}) plus a scale factor per scale group.  The BT
quantizer applies a binary stage to the weights and a ternary stage to the
remaining error, combining both planes under a single optimal scale.

Everything here is a pure function of its inputs: no globals, no hidden RNG,
safe to call concurrently.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_TERNARY_DELTA_COEFF = 0.66


class QuantKind(Enum):
    FULL = "full"
    BINARY = "binary"
    TERNARY = "ternary"
    BT = "bt"


class Granularity(Enum):
    PER_TENSOR = "per_tensor"
    PER_CHANNEL = "per_channel"


@dataclass(frozen=True)
class QuantScheme:
    """Quantization scheme selector.

    ``ternary_alpha_nonzero`` switches the ternary scale to the mean of
    ``|W|`` over nonzero-coded entries only (off by default: the scale is
    the plain mean of ``|W|`` over the whole scale group).
    """

    kind: QuantKind = QuantKind.FULL
    ternary_delta_coeff: float = DEFAULT_TERNARY_DELTA_COEFF
    granularity: Granularity = Granularity.PER_TENSOR
    ternary_alpha_nonzero: bool = False

    def __post_init__(self) -> None:
        if self.ternary_delta_coeff <= 0:
            raise ValueError(
                f"ternary_delta_coeff must be > 0, got {self.ternary_delta_coeff}"
            )


@dataclass
class QuantTensor:
    """A quantized weight tensor: integer code plane(s) plus scale factor(s).

    ``alpha`` has shape ``()`` for per-tensor scaling or ``(shape[0],)`` for
    per-output-channel scaling.  ``stage_alphas`` keeps the per-stage mean
    absolute scales (one entry for single-plane schemes, two for BT); the
    training rules need the first-stage scale even when ``alpha`` is the
    combined optimum.
    """

    shape: tuple[int, ...]
    planes: list[np.ndarray]
    alpha: np.ndarray
    scheme: QuantScheme
    stage_alphas: tuple[np.ndarray, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


@dataclass(frozen=True)
class QuantDiagnostics:
    """Approximation-error report for a (weights, quantized) pair."""

    mse: float
    l2: float
    sparsity: float
    level_histogram: dict[int, int]


def _check_weights(W) -> np.ndarray:
    W = np.asarray(W, dtype=np.float32)
    if W.size == 0:
        raise ValueError("cannot quantize an empty tensor")
    if not np.all(np.isfinite(W)):
        raise ValueError("weights contain NaN or Inf entries")
    return W


def _group_axes(W: np.ndarray, granularity: Granularity) -> tuple[int, ...] | None:
    """Reduction axes for one scale group; None means reduce everything."""
    if granularity is Granularity.PER_TENSOR:
        return None
    if W.ndim < 1:
        raise ValueError("per-channel scaling needs at least one dimension")
    if W.size == 0 or int(np.prod(W.shape[1:])) == 0:
        raise ValueError("per-channel scaling produced an empty scale group")
    return tuple(range(1, W.ndim))


def group_mean_abs(W: np.ndarray, granularity: Granularity) -> np.ndarray:
    """Mean of |W| per scale group, accumulated in float64, stored as float32.

    Returns shape ``()`` for per-tensor, ``(W.shape[0],)`` for per-channel.
    """
    axes = _group_axes(W, granularity)
    if axes is None:
        return np.float32(np.mean(np.abs(W), dtype=np.float64))
    if axes == ():
        return np.abs(W).astype(np.float32)
    return np.mean(np.abs(W), axis=axes, dtype=np.float64).astype(np.float32)


def broadcast_scale(scale: np.ndarray, ndim: int) -> np.ndarray:
    """Reshape a per-group scale so it broadcasts against an ``ndim`` tensor."""
    scale = np.asarray(scale)
    if scale.ndim == 0:
        return scale
    return scale.reshape(scale.shape + (1,) * (ndim - 1))


def dequantize(q: QuantTensor) -> np.ndarray:
    """Reconstruct the real-valued approximation ``alpha * sum(planes)``."""
    eff = effective_codes(q)
    alpha = broadcast_scale(q.alpha, eff.ndim)
    return (alpha * eff).astype(np.float32)


def effective_codes(q: QuantTensor) -> np.ndarray:
    """Sum of all code planes (int8; values within [-2, 2])."""
    eff = q.planes[0].astype(np.int8, copy=True)
    for plane in q.planes[1:]:
        eff += plane
    return eff


def binarize(W, granularity: Granularity = Granularity.PER_TENSOR) -> QuantTensor:
    """Sign quantizer: +1 where W >= 0, -1 elsewhere; scale = mean(|W|)."""
    W = _check_weights(W)
    codes = np.where(W >= 0, 1, -1).astype(np.int8)
    alpha = group_mean_abs(W, granularity)
    scheme = QuantScheme(QuantKind.BINARY, granularity=granularity)
    return QuantTensor(W.shape, [codes], alpha, scheme, (alpha,))


def _ternary_codes(W: np.ndarray, delta: np.ndarray) -> np.ndarray:
    # |W| == delta maps to 0: the zero branch owns the boundary.
    pos = (W > delta).astype(np.int8)
    neg = (W < -delta).astype(np.int8)
    return pos - neg


def _nonzero_mean_abs(
    W: np.ndarray, codes: np.ndarray, granularity: Granularity
) -> np.ndarray:
    axes = _group_axes(W, granularity)
    mask = codes != 0
    absW = np.abs(W)
    if axes is None:
        n = int(mask.sum())
        if n == 0:
            return np.float32(0.0)
        return np.float32(absW[mask].sum(dtype=np.float64) / n)
    total = np.sum(absW * mask, axis=axes, dtype=np.float64)
    count = np.sum(mask, axis=axes)
    return np.divide(
        total, count, out=np.zeros_like(total), where=count > 0
    ).astype(np.float32)


def ternarize(
    W,
    delta_coeff: float = DEFAULT_TERNARY_DELTA_COEFF,
    granularity: Granularity = Granularity.PER_TENSOR,
    alpha_nonzero: bool = False,
) -> QuantTensor:
    """Threshold quantizer to {-1, 0, 1}.

    The threshold is ``delta_coeff * mean(|W|)`` per scale group; entries with
    ``|W|`` at or below it quantize to zero.
    """
    W = _check_weights(W)
    if delta_coeff <= 0:
        raise ValueError(f"delta_coeff must be > 0, got {delta_coeff}")
    mean_abs = group_mean_abs(W, granularity)
    delta = broadcast_scale(np.float32(delta_coeff) * mean_abs, W.ndim)
    codes = _ternary_codes(W, delta)
    alpha = _nonzero_mean_abs(W, codes, granularity) if alpha_nonzero else mean_abs
    scheme = QuantScheme(
        QuantKind.TERNARY,
        ternary_delta_coeff=delta_coeff,
        granularity=granularity,
        ternary_alpha_nonzero=alpha_nonzero,
    )
    return QuantTensor(W.shape, [codes], alpha, scheme, (mean_abs,))


def residual(W, q: QuantTensor) -> np.ndarray:
    """Remaining error ``W - dequantize(q)``, elementwise."""
    W = np.asarray(W, dtype=np.float32)
    if W.shape != tuple(q.shape):
        raise ValueError(f"shape mismatch: weights {W.shape} vs quantized {q.shape}")
    return W - dequantize(q)


def alpha_opt(alpha1, alpha2):
    """Combined scale for a two-plane quantizer: ``0.75*a1 - 0.25*a2``.

    This is exactly the midpoint of ``a1 - a2`` and ``0.5*(a1 + a2)``.  The
    two endpoints swap order once ``a1 > 3*a2``, and the combined scale goes
    nonpositive once ``a1 <= a2/3``; both situations are legal but unusual,
    so they are logged.
    """
    a1 = np.asarray(alpha1, dtype=np.float32)
    a2 = np.asarray(alpha2, dtype=np.float32)
    if np.any(a1 < 0) or np.any(a2 < 0):
        raise ValueError("stage scales must be nonnegative")
    out = np.float32(0.75) * a1 - np.float32(0.25) * a2
    if np.any(a1 > 3 * a2):
        log.warning("alpha_opt bound ordering flipped (alpha1 > 3*alpha2)")
    if np.any(out <= 0):
        log.warning("alpha_opt is nonpositive (alpha1 <= alpha2/3)")
    if out.ndim == 0:
        return np.float32(out)
    return out


def bt_quantize(W, scheme: QuantScheme | None = None) -> QuantTensor:
    """Two-stage quantizer: binary plane on W, ternary plane on the residual.

    Stage 0 binarizes W with scale a1 = mean(|W|); stage 1 ternarizes the
    residual E1 = W - a1*plane0 with threshold ``coeff * mean(|E1|)``.  The
    stored scale is ``alpha_opt(a1, a2)`` and the reconstruction is
    ``alpha * (plane0 + plane1)``, so effective codes lie in {-2..2}.
    """
    if scheme is None:
        scheme = QuantScheme(QuantKind.BT)
    if scheme.kind is not QuantKind.BT:
        raise ValueError(f"bt_quantize needs a BT scheme, got {scheme.kind}")
    W = _check_weights(W)
    gran = scheme.granularity

    codes0 = np.where(W >= 0, 1, -1).astype(np.int8)
    a1 = group_mean_abs(W, gran)
    e1 = W - broadcast_scale(a1, W.ndim) * codes0

    mean_abs1 = group_mean_abs(e1, gran)
    delta = broadcast_scale(np.float32(scheme.ternary_delta_coeff) * mean_abs1, W.ndim)
    codes1 = _ternary_codes(e1, delta)
    if scheme.ternary_alpha_nonzero:
        a2 = _nonzero_mean_abs(e1, codes1, gran)
    else:
        a2 = mean_abs1

    alpha = np.asarray(alpha_opt(a1, a2), dtype=np.float32)
    return QuantTensor(W.shape, [codes0, codes1], alpha, scheme, (a1, a2))


def binary_residual_pair(
    W, granularity: Granularity = Granularity.PER_TENSOR
) -> QuantTensor:
    """Two binary stages chained through the residual.

    Both planes are sign planes, so the effective codes land in {-2, 0, 2}:
    three distinct levels, i.e. a ternary model in disguise.
    """
    W = _check_weights(W)
    codes0 = np.where(W >= 0, 1, -1).astype(np.int8)
    a1 = group_mean_abs(W, granularity)
    e1 = W - broadcast_scale(a1, W.ndim) * codes0
    codes1 = np.where(e1 >= 0, 1, -1).astype(np.int8)
    a2 = group_mean_abs(e1, granularity)
    alpha = np.asarray(alpha_opt(a1, a2), dtype=np.float32)
    scheme = QuantScheme(QuantKind.BT, granularity=granularity)
    return QuantTensor(W.shape, [codes0, codes1], alpha, scheme, (a1, a2))


def quantize(W, scheme: QuantScheme) -> QuantTensor:
    """Dispatch to the quantizer selected by ``scheme.kind``."""
    if scheme.kind is QuantKind.BINARY:
        return binarize(W, scheme.granularity)
    if scheme.kind is QuantKind.TERNARY:
        return ternarize(
            W,
            scheme.ternary_delta_coeff,
            scheme.granularity,
            scheme.ternary_alpha_nonzero,
        )
    if scheme.kind is QuantKind.BT:
        return bt_quantize(W, scheme)
    raise ValueError(f"nothing to quantize for scheme kind {scheme.kind}")


def diagnostics(W, q: QuantTensor) -> QuantDiagnostics:
    """Approximation error and code statistics for W against its quantization."""
    W = np.asarray(W, dtype=np.float32)
    if W.shape != tuple(q.shape):
        raise ValueError(f"shape mismatch: weights {W.shape} vs quantized {q.shape}")
    diff = (W - dequantize(q)).astype(np.float64)
    sq = float(np.sum(diff * diff))
    eff = effective_codes(q)
    levels, counts = np.unique(eff, return_counts=True)
    hist = {int(l): int(c) for l, c in zip(levels, counts)}
    return QuantDiagnostics(
        mse=sq / W.size,
        l2=float(np.sqrt(sq)),
        sparsity=float(np.mean(eff == 0)),
        level_histogram=hist,
    )
