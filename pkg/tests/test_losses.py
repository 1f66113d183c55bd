"""Loss anchors: every expected value below is computed independently in
the test (closed forms or hand arithmetic), then compared to the package."""

import math

import numpy as np
import pytest

from fedring.errors import InvariantViolation, NonPositiveSigma, ShapeMismatch
from fedring.ml import (
    LossWeights,
    ce_loss,
    dice_loss,
    kl_loss,
    onehot_lastaxis,
    recon_loss,
    total_loss,
)
from fedring.ml.losses import DICE_SMOOTH


def test_dice_perfect_overlap_near_zero():
    g = np.zeros((1, 2, 4, 4, 4))
    g[0, 1, :2] = 1.0
    g[0, 0] = 1.0 - g[0, 1]
    assert dice_loss(g, g) <= 1e-4


def test_dice_disjoint_near_one():
    p = np.zeros((1, 2, 8))
    g = np.zeros((1, 2, 8))
    p[0, 1, :4] = 1.0
    p[0, 0] = 1.0 - p[0, 1]
    g[0, 1, 4:] = 1.0
    g[0, 0] = 1.0 - g[0, 1]
    assert abs(dice_loss(p, g) - 1.0) < 1e-4


def test_dice_hand_example():
    # 4 voxels, one foreground class, g = [1,1,0,0], p_fg = 0.5 everywhere.
    # By hand: 2*sum(p*g) = 2, sum(p)+sum(g) = 4, dice = 0.5, loss = 0.5.
    p = np.empty((1, 2, 4))
    p[0, 1] = 0.5
    p[0, 0] = 0.5
    g = np.zeros((1, 2, 4))
    g[0, 1, :2] = 1.0
    g[0, 0, 2:] = 1.0
    expected = 1.0 - (2.0 * 1.0 + DICE_SMOOTH) / (4.0 + DICE_SMOOTH)
    got = dice_loss(p, g)
    assert abs(got - expected) < 1e-15
    assert abs(got - 0.5) < 1e-4


def test_dice_skips_absent_classes():
    # Class 2 absent from the labels: only class 1 contributes.
    p = np.full((1, 3, 4), 1.0 / 3.0)
    g = np.zeros((1, 3, 4))
    g[0, 1, :2] = 1.0
    g[0, 0, 2:] = 1.0
    with_absent = dice_loss(p, g)
    only_two = dice_loss(p[:, :2] * np.array([2.0, 1.0])[None, :, None] / 1.0, g[:, :2])
    # direct check against the single-class formula instead
    inter = 2.0 * (1.0 / 3.0 * 2.0) + DICE_SMOOTH
    denom = (4.0 / 3.0 + 2.0) + DICE_SMOOTH
    assert abs(with_absent - (1.0 - inter / denom)) < 1e-12
    del only_two


def test_dice_all_background_is_zero():
    p = np.full((1, 2, 4), 0.5)
    g = np.zeros((1, 2, 4))
    g[0, 0] = 1.0
    assert dice_loss(p, g) == 0.0


def test_dice_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        dice_loss(np.zeros((1, 2, 4)), np.zeros((1, 2, 5)))


def test_ce_crisp_near_zero():
    g = np.zeros((1, 2, 4))
    g[0, 1, :2] = 1.0
    g[0, 0, 2:] = 1.0
    assert ce_loss(g, g) <= 1e-6


def test_ce_uniform_two_classes_is_ln2():
    p = np.full((1, 2, 16), 0.5)
    g = np.zeros((1, 2, 16))
    g[0, 1] = 1.0
    assert abs(ce_loss(p, g) - math.log(2.0)) < 1e-12


def test_ce_quarter_prob_is_ln4():
    p = np.empty((1, 2, 8))
    p[0, 1] = 0.25
    p[0, 0] = 0.75
    g = np.zeros((1, 2, 8))
    g[0, 1] = 1.0
    assert abs(ce_loss(p, g) - math.log(4.0)) < 1e-12


def test_kl_standard_normal_is_zero():
    assert kl_loss(np.zeros((2, 8)), np.ones((2, 8))) == 0.0


def test_kl_unit_mean():
    # mu=1, sigma=1, one latent dim: 0.5 * (1 + 1 - 1 - 0) = 0.5
    assert abs(kl_loss(np.array([[1.0]]), np.array([[1.0]])) - 0.5) < 1e-15


def test_kl_sigma_two():
    # mu=0, sigma=2: 0.5 * (4 - 1 - ln 4)
    expected = 0.5 * (4.0 - 1.0 - math.log(4.0))
    assert abs(kl_loss(np.array([[0.0]]), np.array([[2.0]])) - expected) < 1e-15
    assert abs(expected - 0.806853) < 1e-6


def test_kl_rejects_nonpositive_sigma():
    with pytest.raises(NonPositiveSigma):
        kl_loss(np.zeros((1, 2)), np.array([[1.0, 0.0]]))


def test_recon_identical_zero():
    x = np.random.default_rng(0).standard_normal((1, 1, 4, 4, 4))
    assert recon_loss(x, x) == 0.0


def test_recon_constant_offset():
    x = np.zeros((1, 1, 2, 2, 2))
    assert recon_loss(x + 1.0, x) == 1.0


def test_recon_hand_example():
    # recon = 0, input = [1, 2]: (1 + 4) / 2 = 2.5
    assert recon_loss(np.zeros((1, 2)), np.array([[1.0, 2.0]])) == 2.5


def test_loss_weights_defaults_and_validation():
    lw = LossWeights()
    assert lw.w_kl == 0.2 and lw.w_recon == 0.3
    with pytest.raises(InvariantViolation):
        LossWeights(w_kl=-0.1)


def _fake_outputs(rng, k=2):
    logits = rng.standard_normal((1, k, 4, 4, 4))
    mu = rng.standard_normal((1, 3))
    sigma = np.abs(rng.standard_normal((1, 3))) + 0.5
    recon = rng.standard_normal((1, 1, 4, 4, 4))
    return {"logits": logits, "mu": mu, "sigma": sigma, "recon": recon}


def test_total_loss_composition():
    rng = np.random.default_rng(77)
    out = _fake_outputs(rng)
    patch = rng.standard_normal((1, 1, 4, 4, 4))
    labels_int = rng.integers(0, 2, size=(1, 4, 4, 4))
    labels = np.moveaxis(onehot_lastaxis(labels_int, 2), -1, 1)

    e = np.exp(out["logits"] - out["logits"].max(axis=1, keepdims=True))
    probs = e / e.sum(axis=1, keepdims=True)
    expected = (
        dice_loss(probs, labels)
        + ce_loss(probs, labels)
        + 0.2 * kl_loss(out["mu"], out["sigma"])
        + 0.3 * recon_loss(out["recon"], patch)
    )
    assert abs(total_loss(out, labels, patch, LossWeights()) - expected) < 1e-12
    # coefficients off: only dice + ce remain
    expected_d_ce = dice_loss(probs, labels) + ce_loss(probs, labels)
    got = total_loss(out, labels, patch, LossWeights(0.0, 0.0))
    assert abs(got - expected_d_ce) < 1e-12


def test_total_loss_vanishes_on_perfect_fit():
    labels_int = np.zeros((1, 4, 4, 4), dtype=int)
    labels_int[0, :2] = 1
    labels = np.moveaxis(onehot_lastaxis(labels_int, 2), -1, 1)
    patch = np.random.default_rng(3).standard_normal((1, 1, 4, 4, 4))
    out = {
        "logits": 40.0 * (labels - 0.5),
        "mu": np.zeros((1, 8)),
        "sigma": np.ones((1, 8)),
        "recon": patch.copy(),
    }
    assert total_loss(out, labels, patch, LossWeights()) <= 1e-4


def test_total_loss_nonnegative_on_random_valid_inputs():
    rng = np.random.default_rng(123)
    for _ in range(25):
        out = _fake_outputs(rng)
        patch = rng.standard_normal((1, 1, 4, 4, 4))
        labels_int = rng.integers(0, 2, size=(1, 4, 4, 4))
        labels = np.moveaxis(onehot_lastaxis(labels_int, 2), -1, 1)
        assert total_loss(out, labels, patch, LossWeights()) >= 0.0
