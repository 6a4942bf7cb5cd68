"""Losses, Adam, and the training loop with quantization-aware updates.

Training keeps full-precision latent weights and re-quantizes them on every
forward pass.  Gradients reach the latent weights through the straight-through
window; the transition-regularization term contributes a per-element
``lam * sign(codes - corrupted_codes)`` pull toward the nearest quantizer
transition (the exact term is piecewise constant, so a surrogate is the only
way it can steer updates).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import AugmentPolicy, LabeledImageSet, PatchPairSet, augment
from .layers import Param, ste_window
from .net import Network, Task
from .quant import QuantKind, QuantScheme, diagnostics, quantize
from .regularize import (
    PenaltyAux,
    TransitionRegConfig,
    mean_distance_to_transition,
    transition_penalty,
)


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries a diagnostic snapshot."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Fused stable softmax + cross entropy.

    Returns (mean loss, gradient w.r.t. logits, probabilities).
    """
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - lse
    n = logits.shape[0]
    loss = float(-log_probs[np.arange(n), labels].mean(dtype=np.float64))
    probs = np.exp(log_probs)
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n, probs


def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Mean squared error and its gradient."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    return loss, (2.0 / diff.size) * diff


class Adam:
    """Adam with bias correction; state is keyed by parameter name."""

    def __init__(self, params: list[Param], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self._m = {p.name: np.zeros_like(p.data) for p in params}
        self._v = {p.name: np.zeros_like(p.data) for p in params}

    def step(self) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m = self._m[p.name]
            v = self._v[p.name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.grad = None

    def state_dict(self) -> dict:
        return {"step": self.step_count, "lr": self.lr, "m": self._m, "v": self._v}

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step"])
        self.lr = float(state["lr"])
        for key, arr in state["m"].items():
            self._m[key][...] = arr
        for key, arr in state["v"].items():
            self._v[key][...] = arr


def loss_with_regularization(
    task_loss: float,
    weights: list[np.ndarray],
    scheme: QuantScheme,
    reg: TransitionRegConfig | None,
    rng: np.random.Generator,
) -> tuple[float, list[tuple[float, PenaltyAux]]]:
    """Total loss = task loss - lam * sum of per-layer transition penalties."""
    if reg is None or not reg.enabled:
        return task_loss, []
    if scheme.kind is QuantKind.FULL:
        raise ValueError("transition regularization needs a quantizing scheme")
    if reg.lam == 0.0:
        return task_loss, []
    results = [transition_penalty(w, scheme, reg, rng) for w in weights]
    total = task_loss - reg.lam * sum(p for p, _ in results)
    return total, results


def transition_grad(weight: np.ndarray, aux: PenaltyAux, lam: float) -> np.ndarray:
    """Surrogate gradient of the regularization term w.r.t. one weight tensor.

    Descent along ``+lam * sign(codes - corrupted_codes)`` moves a weight
    toward the transition it straddles; weights whose codes did not flip get
    no pull.  The straight-through window gates the contribution like every
    other gradient reaching a quantized weight.
    """
    sign = np.sign(
        aux.codes.astype(np.int16) - aux.codes_corrupt.astype(np.int16)
    ).astype(weight.dtype)
    return lam * sign * ste_window(weight, aux.noise_scale)


@dataclass
class TrainSettings:
    epochs: int
    batch_size: int = 128
    lr: float = 1e-3
    milestones: tuple[float, ...] = (0.5, 0.75)
    scheme: QuantScheme = field(default_factory=QuantScheme)
    reg: TransitionRegConfig | None = None
    augment_policy: AugmentPolicy | None = None
    seed: int = 0


def _classification_batch(images: np.ndarray) -> np.ndarray:
    return (images.astype(np.float32) / 255.0 - 0.5) * 2.0


def evaluate_classifier(
    net: Network,
    dataset: LabeledImageSet,
    scheme: QuantScheme | None,
    batch_size: int = 256,
    use_packed: bool | None = None,
) -> float:
    """Top-1 accuracy in percent, eval-mode statistics."""
    correct = 0
    for start in range(0, len(dataset), batch_size):
        imgs = dataset.images[start : start + batch_size]
        x = _classification_batch(imgs)
        logits = net.forward_logits(x, scheme, mode="eval", use_packed=use_packed)
        correct += int((logits.argmax(axis=1) == dataset.labels[start : start + batch_size]).sum())
    return 100.0 * correct / len(dataset)


def evaluate_restorer(
    net: Network,
    pairs: PatchPairSet,
    scheme: QuantScheme | None,
    batch_size: int = 64,
    use_packed: bool | None = None,
) -> float:
    """PSNR (dB, peak 1.0) of predictions over all patches."""
    sq_sum = 0.0
    count = 0
    for start in range(0, len(pairs), batch_size):
        x = pairs.inputs[start : start + batch_size]
        t = pairs.targets[start : start + batch_size]
        pred = net.forward(x, scheme, mode="eval", use_packed=use_packed)
        sq_sum += float(np.sum((pred.astype(np.float64) - t) ** 2))
        count += t.size
    return psnr_from_mse(sq_sum / count)


def psnr_from_mse(mse: float, peak: float = 1.0) -> float:
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


def train(
    net: Network,
    train_data,
    settings: TrainSettings,
    val_data=None,
) -> list[dict]:
    """Run the optimization loop; returns one metrics record per epoch.

    Updates ``net`` parameters in place.  Raises ``TrainingDiverged`` when
    the loss goes non-finite.
    """
    if len(train_data) == 0:
        raise ValueError("training dataset is empty")
    task = net.spec.task
    scheme = settings.scheme
    quantizing = scheme.kind is not QuantKind.FULL
    if settings.reg is not None and settings.reg.enabled and not quantizing:
        raise ValueError("transition regularization needs a quantizing scheme")

    seq = np.random.SeedSequence(settings.seed)
    order_rng, aug_rng, reg_rng = (np.random.default_rng(s) for s in seq.spawn(3))

    opt = Adam(net.params(), lr=settings.lr)
    milestones = {
        int(f * settings.epochs) for f in settings.milestones if 0 < int(f * settings.epochs)
    }
    qlayers = net.quantized_weight_layers()
    metrics: list[dict] = []
    recent: list[float] = []

    for epoch in range(settings.epochs):
        if epoch in milestones:
            opt.lr *= 0.1
        order = order_rng.permutation(len(train_data))
        loss_sum = 0.0
        penalty_sum = 0.0
        n_batches = 0
        correct = 0
        seen = 0

        for start in range(0, len(order), settings.batch_size):
            idx = order[start : start + settings.batch_size]
            try:
                if task is Task.CLASSIFICATION:
                    imgs = train_data.images[idx]
                    if settings.augment_policy is not None:
                        imgs = augment(imgs, settings.augment_policy, aug_rng)
                    x = _classification_batch(imgs)
                    y = train_data.labels[idx]
                    logits = net.forward_logits(x, scheme, mode="train")
                    loss, grad, _ = softmax_cross_entropy(logits, y)
                    correct += int((logits.argmax(axis=1) == y).sum())
                    seen += len(idx)
                    skip_last = 1
                else:
                    x = train_data.inputs[idx]
                    y = train_data.targets[idx]
                    out = net.forward(x, scheme, mode="train")
                    loss, grad = mse_loss(out, y)
                    skip_last = 0
            except FloatingPointError as exc:
                raise TrainingDiverged(
                    f"non-finite activations at epoch {epoch}: {exc}",
                    {
                        "epoch": epoch,
                        "step": n_batches,
                        "loss": float("nan"),
                        "lr": opt.lr,
                        "recent_losses": recent[-10:],
                    },
                ) from exc

            total = loss
            reg_results: list[tuple[float, PenaltyAux]] = []
            if settings.reg is not None and settings.reg.enabled and quantizing and qlayers:
                total, reg_results = loss_with_regularization(
                    loss, [l.weight.data for l in qlayers], scheme, settings.reg, reg_rng
                )
            if not np.isfinite(total):
                raise TrainingDiverged(
                    f"loss became non-finite at epoch {epoch}",
                    {
                        "epoch": epoch,
                        "step": n_batches,
                        "loss": total,
                        "lr": opt.lr,
                        "recent_losses": recent[-10:],
                    },
                )

            net.backward(grad, skip_last=skip_last)
            for layer, (_, aux) in zip(qlayers, reg_results):
                layer.weight.grad += transition_grad(
                    layer.weight.data, aux, settings.reg.lam
                )
            opt.step()

            loss_sum += total
            penalty_sum += sum(p for p, _ in reg_results)
            recent.append(total)
            n_batches += 1

        record: dict = {
            "epoch": epoch,
            "lr": opt.lr,
            "train_loss": loss_sum / n_batches,
        }
        if task is Task.CLASSIFICATION:
            record["train_acc"] = 100.0 * correct / seen
        if settings.reg is not None and settings.reg.enabled and quantizing:
            record["penalty_mean"] = penalty_sum / n_batches
        if quantizing and qlayers:
            diags = [diagnostics(l.weight.data, quantize(l.weight.data, scheme)) for l in qlayers]
            record["quant_mse"] = [d.mse for d in diags]
            record["quant_sparsity"] = [d.sparsity for d in diags]
            record["mean_dist_to_transition"] = float(
                np.mean([mean_distance_to_transition(l.weight.data, scheme) for l in qlayers])
            )
        if val_data is not None:
            if task is Task.CLASSIFICATION:
                record["val_acc"] = evaluate_classifier(
                    net, val_data, scheme, use_packed=False
                )
            else:
                record["val_psnr"] = evaluate_restorer(
                    net, val_data, scheme, use_packed=False
                )
        metrics.append(record)
    return metrics
