"""Analytic gradients vs central finite differences, the keystone check.

The finite-difference oracle below re-evaluates the full composite loss
with each weight perturbed by +-h and never touches the backward path.
"""

import numpy as np
import pytest

from fedring.ml import LossWeights, ModelConfig, SegModel, backward, loss_and_grads
from fedring.ml.losses import (
    ce_loss_grad_cl,
    dice_loss_grad_cl,
    kl_loss_grad,
    onehot_lastaxis,
    recon_loss_grad,
)
from fedring.ml.model import forward_cl
from fedring.ml.tensor_ops import softmax_lastaxis

H_STEP = 1e-5
REL_TOL = 1e-4
ABS_FLOOR = 1e-8


def composite_loss(model, patch_cl, onehot_cl, lw, eps):
    """Loss-only evaluation used as the finite-difference oracle."""
    out, _ = forward_cl(model.weights, model.config, patch_cl, eps)
    probs = softmax_lastaxis(out["logits"])
    l_dice, _ = dice_loss_grad_cl(probs, onehot_cl)
    l_ce, _ = ce_loss_grad_cl(probs, onehot_cl)
    l_kl, _, _ = kl_loss_grad(out["mu"], out["sigma"])
    l_rec, _ = recon_loss_grad(out["recon"], patch_cl)
    return l_dice + l_ce + lw.w_kl * l_kl + lw.w_recon * l_rec


def finite_difference_check(config, seed, lw=LossWeights(), batch=1, subsample=None):
    """Compare analytic gradients to central differences for every weight
    (or a deterministic subsample of element indices per entry)."""
    rng = np.random.default_rng(seed)
    model = SegModel.create(config, seed)
    patch_cl = rng.standard_normal((batch,) + config.patch_size + (config.in_channels,))
    labels = rng.integers(0, config.n_classes, size=(batch,) + config.patch_size)
    onehot_cl = onehot_lastaxis(labels, config.n_classes)
    eps = rng.standard_normal((batch, config.latent_dim))

    _, grads = loss_and_grads(model, patch_cl, onehot_cl, lw, eps)

    worst = (0.0, "", 0)
    n_checked = 0
    for name in sorted(model.weights):
        w = model.weights[name].ravel()
        g = grads[name].ravel()
        if subsample is None or w.size <= subsample:
            idx = range(w.size)
        else:
            idx = np.random.default_rng(hash(name) % 2**32).choice(
                w.size, size=subsample, replace=False
            )
        for i in idx:
            orig = w[i]
            w[i] = orig + H_STEP
            up = composite_loss(model, patch_cl, onehot_cl, lw, eps)
            w[i] = orig - H_STEP
            down = composite_loss(model, patch_cl, onehot_cl, lw, eps)
            w[i] = orig
            fd = (up - down) / (2.0 * H_STEP)
            diff = abs(fd - g[i])
            denom = max(abs(fd), abs(g[i]))
            rel = 0.0 if diff <= ABS_FLOOR else diff / max(denom, 1e-12)
            if rel > worst[0]:
                worst = (rel, name, i)
            n_checked += 1
    return worst, n_checked


TINY = ModelConfig(
    in_channels=1, n_classes=2, base_filters=2, n_levels=2,
    latent_dim=3, patch_size=(4, 4, 4),
)


def test_gradients_match_finite_differences_tiny():
    (rel, name, idx), n = finite_difference_check(TINY, seed=2024)
    assert n == sum(np.prod(s) for s in TINY.weight_shapes().values())
    assert rel < REL_TOL, f"worst rel err {rel:.3e} at {name}[{idx}]"


def test_gradients_match_fd_single_level_model():
    config = ModelConfig(
        in_channels=1, n_classes=2, base_filters=2, n_levels=1,
        latent_dim=2, patch_size=(4, 4, 4),
    )
    (rel, name, idx), _ = finite_difference_check(config, seed=7)
    assert rel < REL_TOL, f"worst rel err {rel:.3e} at {name}[{idx}]"


def test_gradients_match_fd_batch_two():
    (rel, name, idx), _ = finite_difference_check(TINY, seed=99, batch=2, subsample=40)
    assert rel < REL_TOL, f"worst rel err {rel:.3e} at {name}[{idx}]"


def test_backward_returns_weightset_mirror():
    rng = np.random.default_rng(1)
    model = SegModel.create(TINY, seed=5)
    patch = rng.standard_normal((1, 1, 4, 4, 4))
    labels_int = rng.integers(0, 2, size=(1, 4, 4, 4))
    labels = np.moveaxis(onehot_lastaxis(labels_int, 2), -1, 1)
    gws = backward(model, patch, labels, LossWeights(), rng=np.random.default_rng(2))
    assert gws.names == model.to_weightset().names
    for entry, name in zip(gws.entries, gws.names):
        assert entry.shape == model.weights[name].shape


def test_backward_deterministic_given_rng_seed():
    rng = np.random.default_rng(1)
    model = SegModel.create(TINY, seed=5)
    patch = rng.standard_normal((1, 1, 4, 4, 4))
    labels_int = rng.integers(0, 2, size=(1, 4, 4, 4))
    labels = np.moveaxis(onehot_lastaxis(labels_int, 2), -1, 1)
    a = backward(model, patch, labels, LossWeights(), rng=np.random.default_rng(3))
    b = backward(model, patch, labels, LossWeights(), rng=np.random.default_rng(3))
    assert a == b


def test_near_zero_gradients_at_perfect_fit():
    # Crisp correct predictions with the variational terms switched off:
    # the remaining dice + ce surface is flat at machine scale.
    rng = np.random.default_rng(4)
    model = SegModel.create(TINY, seed=6)
    labels_int = np.zeros((1, 4, 4, 4), dtype=int)
    labels_int[0, :2] = 1
    onehot_cl = onehot_lastaxis(labels_int, 2)

    # Drive the seg head to huge correct logits by construction: zero all
    # weights, then set the head bias from the labels. A zero-weight net
    # outputs constant features, so instead perturb: use the real net but
    # scale the head so probabilities saturate.
    patch_cl = 2.0 * onehot_cl[..., 1:2] - 1.0  # intensity mirrors the label
    lw = LossWeights(0.0, 0.0)
    for name in model.weights:
        model.weights[name][:] = 0.0
    model.weights["seg.w"][:] = 0.0
    model.weights["seg.b"][:] = 0.0
    # bias cannot depend on position, so craft a two-voxel-class patch that
    # the conv stack can separate: with all-zero weights logits are equal;
    # instead set enc0/seg to copy the input channel through.
    # Wire an identity path: enc0 center tap copies the input, dec0 passes
    # the skip (concat puts the 4 upsampled channels first, so the skip's
    # channel 0 sits at index 4), and the head turns it into a crisp margin.
    model.weights["enc0.w"][1, 1, 1, 0, 0] = 1.0
    model.weights["dec0.w"][1, 1, 1, 4, 0] = 1.0
    model.weights["seg.w"][0, 1] = 30.0            # class 1 logit = 30 * relu(x)
    model.weights["seg.b"][0] = 15.0               # class 0 logit 15: margin 15 either way
    eps = np.zeros((1, TINY.latent_dim))
    terms, grads = loss_and_grads(model, patch_cl, onehot_cl, lw, eps)
    assert terms["loss_total"] < 1e-4
    assert max(np.abs(g).max() for g in grads.values()) < 1e-3


def test_recon_coefficient_scales_recon_head_gradient():
    rng = np.random.default_rng(8)
    model = SegModel.create(TINY, seed=9)
    patch_cl = rng.standard_normal((1, 4, 4, 4, 1))
    onehot_cl = onehot_lastaxis(rng.integers(0, 2, size=(1, 4, 4, 4)), 2)
    eps = rng.standard_normal((1, TINY.latent_dim))
    _, g1 = loss_and_grads(model, patch_cl, onehot_cl, LossWeights(0.0, 0.3), eps)
    _, g2 = loss_and_grads(model, patch_cl, onehot_cl, LossWeights(0.0, 0.6), eps)
    np.testing.assert_allclose(g2["vrec.w"], 2.0 * g1["vrec.w"], rtol=1e-12)
    np.testing.assert_allclose(g2["vdec0.w"], 2.0 * g1["vdec0.w"], rtol=1e-12)
