"""Training losses: soft Dice, categorical cross-entropy, latent Gaussian
divergence, and voxelwise reconstruction error, plus their composition.

Public functions take channels-first tensors ((B, K, ...) probabilities and
one-hot labels) and return scalars.  The *_grad variants used by the
training path work channels-last and also return dL/dinput.

Dice is computed per foreground class over the whole batch with smoothing
1e-5; background is excluded and classes absent from the labels are
skipped (dropped from the class average).  If no foreground class is
present the Dice term is 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InvariantViolation, NonPositiveSigma, ShapeMismatch
from . import tensor_ops as T

DICE_SMOOTH = 1e-5
CE_PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    w_kl: float = 0.2
    w_recon: float = 0.3

    def __post_init__(self):
        if self.w_kl < 0 or self.w_recon < 0:
            raise InvariantViolation("loss coefficients must be >= 0")


def _require_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes {a.shape} and {b.shape} differ")


# -- channels-last implementations with gradients ------------------------------

def dice_loss_grad_cl(probs: np.ndarray, onehot: np.ndarray):
    """probs, onehot: (..., K) channels-last.  Returns (loss, dL/dprobs)."""
    _require_same_shape(probs, onehot)
    k_classes = probs.shape[-1]
    p = probs.reshape(-1, k_classes)
    g = onehot.reshape(-1, k_classes)
    dp = np.zeros_like(p)
    included = [k for k in range(1, k_classes) if g[:, k].any()]
    if not included:
        return 0.0, dp.reshape(probs.shape)
    loss = 1.0
    inv = 1.0 / len(included)
    for k in included:
        pk, gk = p[:, k], g[:, k]
        inter = 2.0 * float(pk @ gk) + DICE_SMOOTH
        denom = float(pk.sum() + gk.sum()) + DICE_SMOOTH
        loss -= inv * inter / denom
        dp[:, k] = -inv * (2.0 * gk * denom - inter) / (denom * denom)
    return loss, dp.reshape(probs.shape)


def ce_loss_grad_cl(probs: np.ndarray, onehot: np.ndarray):
    """Mean over voxels of -sum_k g_k log p_k, probs floored inside the log."""
    _require_same_shape(probs, onehot)
    n_vox = int(np.prod(probs.shape[:-1]))
    clipped = np.clip(probs, CE_PROB_FLOOR, 1.0)
    loss = -float((onehot * np.log(clipped)).sum()) / n_vox
    dp = np.where(probs > CE_PROB_FLOOR, -onehot / clipped / n_vox, 0.0)
    return loss, dp


def kl_loss_grad(mu: np.ndarray, sigma: np.ndarray):
    """Batch mean of sum_l 0.5 (mu^2 + sigma^2 - 1 - ln sigma^2)."""
    _require_same_shape(mu, sigma)
    if (sigma <= 0).any():
        raise NonPositiveSigma("sigma must be strictly positive")
    batch = mu.shape[0]
    loss = 0.5 * float(
        (mu * mu + sigma * sigma - 1.0 - 2.0 * np.log(sigma)).sum()
    ) / batch
    dmu = mu / batch
    dsigma = (sigma - 1.0 / sigma) / batch
    return loss, dmu, dsigma


def recon_loss_grad(recon: np.ndarray, target: np.ndarray):
    """Mean squared error over all voxels."""
    _require_same_shape(recon, target)
    diff = recon - target
    loss = float((diff * diff).mean())
    return loss, 2.0 * diff / diff.size


# -- public channels-first scalars ---------------------------------------------

def dice_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    loss, _ = dice_loss_grad_cl(np.moveaxis(probs, 1, -1), np.moveaxis(labels, 1, -1))
    return loss


def ce_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    loss, _ = ce_loss_grad_cl(np.moveaxis(probs, 1, -1), np.moveaxis(labels, 1, -1))
    return loss


def kl_loss(mu: np.ndarray, sigma: np.ndarray) -> float:
    loss, _, _ = kl_loss_grad(np.asarray(mu, float), np.asarray(sigma, float))
    return loss


def recon_loss(recon: np.ndarray, target: np.ndarray) -> float:
    loss, _ = recon_loss_grad(np.asarray(recon, float), np.asarray(target, float))
    return loss


def total_loss(outputs: dict, labels: np.ndarray, patch: np.ndarray, lw: LossWeights) -> float:
    """Composite loss from a forward() output dict, one-hot channels-first
    labels and the input patch: dice + ce + w_kl*KL + w_recon*L2."""
    probs = T.softmax_lastaxis(np.moveaxis(outputs["logits"], 1, -1))
    probs_cf = np.moveaxis(probs, -1, 1)
    return (
        dice_loss(probs_cf, labels)
        + ce_loss(probs_cf, labels)
        + lw.w_kl * kl_loss(outputs["mu"], outputs["sigma"])
        + lw.w_recon * recon_loss(outputs["recon"], patch)
    )


def onehot_lastaxis(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Integer label grid (...,) -> one-hot (..., K) float64."""
    out = np.zeros(labels.shape + (n_classes,))
    np.put_along_axis(out, labels[..., None].astype(np.intp), 1.0, axis=-1)
    return out
