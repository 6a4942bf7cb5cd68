"""Transition regularization: reward code divergence under weight noise.

A copy of the weights is corrupted with Gaussian noise scaled by the weight
magnitude, both copies are quantized, and the L1 distance between the two
code planes enters the loss with a negative sign.  Weights sitting near a
quantizer transition flip codes under small noise, so maximizing the
divergence concentrates weights around the transitions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .quant import (
    QuantKind,
    QuantScheme,
    broadcast_scale,
    dequantize,
    effective_codes,
    group_mean_abs,
    quantize,
)


@dataclass(frozen=True)
class TransitionRegConfig:
    """Settings for the transition-regularization loss term.

    ``lam`` weighs the penalty inside the total loss, ``noise_gain``
    multiplies the magnitude-scaled corruption noise.  ``on_dequantized``
    computes the L1 distance on dequantized values instead of integer codes
    (off by default; codes keep the penalty scale-free and bounded).
    """

    lam: float = 0.1
    noise_gain: float = 0.1
    enabled: bool = True
    rng_seed: int = 0
    on_dequantized: bool = False

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.noise_gain < 0:
            raise ValueError(f"noise_gain must be >= 0, got {self.noise_gain}")


@dataclass(frozen=True)
class PenaltyAux:
    """Byproducts of the penalty: code planes feed the gradient surrogate."""

    codes: np.ndarray
    codes_corrupt: np.ndarray
    noise_scale: np.ndarray


def corrupt(W, alpha, noise_gain: float, rng: np.random.Generator) -> np.ndarray:
    """Return ``W + noise_gain * eps`` with ``eps ~ Normal(0, std=alpha)``.

    ``alpha`` may be a scalar or a per-output-channel vector; a zero alpha or
    zero gain returns W unchanged.  The draw comes entirely from ``rng``, so
    callers control reproducibility.
    """
    W = np.asarray(W, dtype=np.float32)
    alpha = np.asarray(alpha, dtype=np.float32)
    if np.any(alpha < 0):
        raise ValueError("noise scale alpha must be nonnegative")
    if noise_gain < 0:
        raise ValueError(f"noise_gain must be >= 0, got {noise_gain}")
    if noise_gain == 0:
        return W.copy()
    eps = rng.standard_normal(W.shape).astype(np.float32)
    return W + np.float32(noise_gain) * broadcast_scale(alpha, W.ndim) * eps


def code_l1_mean(codes_a: np.ndarray, codes_b: np.ndarray) -> float:
    """Per-element mean L1 distance between two integer code planes."""
    if codes_a.shape != codes_b.shape:
        raise ValueError("code planes must have equal shapes")
    diff = codes_a.astype(np.int16) - codes_b.astype(np.int16)
    return float(np.mean(np.abs(diff), dtype=np.float64))


def transition_penalty(
    W,
    scheme: QuantScheme,
    reg: TransitionRegConfig,
    rng: np.random.Generator,
) -> tuple[float, PenaltyAux]:
    """Mean L1 code divergence between W and its noise-corrupted copy.

    The corruption noise std is the stage-0 scale (mean ``|W|`` per scale
    group) times ``reg.noise_gain``.  Returns the per-element mean penalty
    and the two code planes; the training loss subtracts ``lam * penalty``.
    """
    if scheme.kind is QuantKind.FULL:
        raise ValueError("transition penalty is undefined for the full scheme")
    q = quantize(W, scheme)
    W = np.asarray(W, dtype=np.float32)
    alpha1 = q.stage_alphas[0]
    corrupted = corrupt(W, alpha1, reg.noise_gain, rng)
    q_tilde = quantize(corrupted, scheme)
    codes = effective_codes(q)
    codes_tilde = effective_codes(q_tilde)
    if reg.on_dequantized:
        penalty = float(
            np.mean(np.abs(dequantize(q) - dequantize(q_tilde)), dtype=np.float64)
        )
    else:
        penalty = code_l1_mean(codes, codes_tilde)
    return penalty, PenaltyAux(codes, codes_tilde, np.asarray(alpha1))


def mean_distance_to_transition(W, scheme: QuantScheme) -> float:
    """Mean distance from each weight to its nearest quantizer transition.

    Transitions sit at 0 for the binary stage and at +-delta for a ternary
    stage.  For BT the ternary stage lives on the residual, so its distance
    is measured there; the per-element minimum over stages is averaged.
    """
    if scheme.kind is QuantKind.FULL:
        raise ValueError("no transitions exist for the full scheme")
    W = np.asarray(W, dtype=np.float32)
    if W.size == 0:
        raise ValueError("empty tensor")
    gran = scheme.granularity

    if scheme.kind is QuantKind.BINARY:
        return float(np.mean(np.abs(W), dtype=np.float64))

    if scheme.kind is QuantKind.TERNARY:
        delta = broadcast_scale(
            np.float32(scheme.ternary_delta_coeff) * group_mean_abs(W, gran), W.ndim
        )
        d = np.minimum(np.abs(W - delta), np.abs(W + delta))
        return float(np.mean(d, dtype=np.float64))

    # BT: stage 0 transition at 0 on W, stage 1 at +-delta on the residual.
    codes0 = np.where(W >= 0, 1, -1).astype(np.int8)
    a1 = group_mean_abs(W, gran)
    e1 = W - broadcast_scale(a1, W.ndim) * codes0
    delta = broadcast_scale(
        np.float32(scheme.ternary_delta_coeff) * group_mean_abs(e1, gran), W.ndim
    )
    d0 = np.abs(W)
    d1 = np.minimum(np.abs(e1 - delta), np.abs(e1 + delta))
    return float(np.mean(np.minimum(d0, d1), dtype=np.float64))
