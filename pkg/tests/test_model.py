"""Forward-pass behavior of the segmentation network."""

import numpy as np
import pytest

from fedring.errors import ShapeError, ShapeMismatch
from fedring.ml import ModelConfig, SegModel, forward
from fedring.ml.tensor_ops import softmax_lastaxis

SMALL = ModelConfig(
    in_channels=1, n_classes=3, base_filters=2, n_levels=2,
    latent_dim=4, patch_size=(4, 4, 4),
)


def small_model(seed=11):
    return SegModel.create(SMALL, seed=seed)


def random_patch(rng, config=SMALL, batch=1):
    return rng.standard_normal((batch, config.in_channels) + config.patch_size)


def test_output_shapes():
    model = small_model()
    rng = np.random.default_rng(0)
    out = forward(model, random_patch(rng, batch=2), train=True, rng=rng)
    assert out["logits"].shape == (2, 3, 4, 4, 4)
    assert out["mu"].shape == (2, 4)
    assert out["sigma"].shape == (2, 4)
    assert out["recon"].shape == (2, 1, 4, 4, 4)


def test_zero_weights_give_uniform_softmax():
    model = small_model()
    for name in model.weights:
        model.weights[name][:] = 0.0
    out = forward(model, random_patch(np.random.default_rng(1)))
    logits = out["logits"]
    assert np.all(logits == logits[:, :1])
    probs = softmax_lastaxis(np.moveaxis(logits, 1, -1))
    np.testing.assert_allclose(probs, 1.0 / 3.0, atol=1e-15)


def test_eval_mode_is_pure():
    model = small_model()
    patch = random_patch(np.random.default_rng(2))
    a = forward(model, patch)
    b = forward(model, patch)
    for key in a:
        assert a[key].tobytes() == b[key].tobytes()


def test_train_with_zero_noise_equals_eval():
    model = small_model()
    patch = random_patch(np.random.default_rng(3))
    ev = forward(model, patch)
    tr = forward(model, patch, train=True, eps=np.zeros((1, SMALL.latent_dim)))
    for key in ev:
        np.testing.assert_array_equal(tr[key], ev[key])


def test_train_noise_changes_recon_not_logits():
    model = small_model()
    patch = random_patch(np.random.default_rng(4))
    ev = forward(model, patch)
    tr = forward(model, patch, train=True, eps=np.full((1, SMALL.latent_dim), 2.0))
    np.testing.assert_array_equal(tr["logits"], ev["logits"])
    assert not np.array_equal(tr["recon"], ev["recon"])


def test_sigma_strictly_positive():
    rng = np.random.default_rng(5)
    for seed in range(5):
        model = small_model(seed)
        out = forward(model, random_patch(rng))
        assert (out["sigma"] > 0).all()


def test_softmax_normalization():
    model = small_model()
    out = forward(model, random_patch(np.random.default_rng(6)))
    probs = softmax_lastaxis(np.moveaxis(out["logits"], 1, -1))
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-9)


def test_shape_error_on_wrong_spatial_dims():
    model = small_model()
    with pytest.raises(ShapeError):
        forward(model, np.zeros((1, 1, 5, 4, 4)))
    with pytest.raises(ShapeError):
        forward(model, np.zeros((1, 1, 8, 8, 8)))
    with pytest.raises(ShapeError):
        forward(model, np.zeros((1, 2, 4, 4, 4)))


def test_config_rejects_indivisible_patch():
    with pytest.raises(ShapeError):
        ModelConfig(n_levels=3, patch_size=(6, 6, 6))


def test_weightset_roundtrip_and_mismatch():
    model = small_model()
    ws = model.to_weightset(sample_count=9)
    assert ws.sample_count == 9
    clone = SegModel.from_weightset(SMALL, ws)
    for name, w in model.weights.items():
        np.testing.assert_array_equal(clone.weights[name], w)
    other = ModelConfig(
        in_channels=1, n_classes=3, base_filters=3, n_levels=2,
        latent_dim=4, patch_size=(4, 4, 4),
    )
    with pytest.raises(ShapeMismatch):
        SegModel.from_weightset(other, ws)


def test_init_deterministic_per_seed():
    a = SegModel.create(SMALL, seed=42).weights
    b = SegModel.create(SMALL, seed=42).weights
    c = SegModel.create(SMALL, seed=43).weights
    assert all(np.array_equal(a[n], b[n]) for n in a)
    assert any(not np.array_equal(a[n], c[n]) for n in a)
