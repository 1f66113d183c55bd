"""Composite loss evaluation and analytic gradients through the network."""

from __future__ import annotations

import numpy as np

from ..protocol import WeightSet
from . import tensor_ops as T
from .losses import (
    LossWeights,
    ce_loss_grad_cl,
    dice_loss_grad_cl,
    kl_loss_grad,
    recon_loss_grad,
)
from .model import SegModel, _to_cl, backward_cl, draw_latent_noise, forward_cl


def loss_and_grads(
    model: SegModel,
    patch_cl: np.ndarray,
    onehot_cl: np.ndarray,
    lw: LossWeights,
    eps: np.ndarray,
):
    """Forward + backward in one call on channels-last batches.

    Returns (terms, grads): per-term loss values keyed loss_dice/ce/kl/
    recon/total, and a gradient array per weight name.
    """
    out, cache = forward_cl(model.weights, model.config, patch_cl, eps)
    probs = T.softmax_lastaxis(out["logits"])

    l_dice, dp_dice = dice_loss_grad_cl(probs, onehot_cl)
    l_ce, dp_ce = ce_loss_grad_cl(probs, onehot_cl)
    l_kl, dmu, dsigma = kl_loss_grad(out["mu"], out["sigma"])
    l_rec, drecon = recon_loss_grad(out["recon"], patch_cl)

    dlogits = T.softmax_backward(probs, dp_dice + dp_ce)
    grads = backward_cl(
        model.weights,
        model.config,
        cache,
        dlogits,
        lw.w_kl * dmu,
        lw.w_kl * dsigma,
        lw.w_recon * drecon,
    )
    terms = {
        "loss_dice": l_dice,
        "loss_ce": l_ce,
        "loss_kl": l_kl,
        "loss_recon": l_rec,
        "loss_total": l_dice + l_ce + lw.w_kl * l_kl + lw.w_recon * l_rec,
    }
    return terms, grads


def backward(
    model: SegModel,
    patch: np.ndarray,
    labels: np.ndarray,
    lw: LossWeights,
    rng: np.random.Generator | None = None,
    eps: np.ndarray | None = None,
) -> WeightSet:
    """Gradient of the composite loss for a (B, C, D, H, W) patch batch and
    one-hot (B, K, D, H, W) labels, as a WeightSet mirroring the model's
    entries.  Deterministic given the rng state (or an explicit eps)."""
    patch_cl = _to_cl(patch)
    onehot_cl = np.ascontiguousarray(
        np.moveaxis(np.asarray(labels, dtype=np.float64), 1, -1)
    )
    if eps is None:
        if rng is None:
            raise ValueError("backward needs an rng or explicit eps")
        eps = draw_latent_noise(rng, patch_cl.shape[0], model.config.latent_dim)
    _, grads = loss_and_grads(model, patch_cl, onehot_cl, lw, eps)
    return WeightSet.from_arrays(grads)
