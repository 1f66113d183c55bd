"""Learning-rate schedule anchors and Adam behavior."""

import numpy as np
import pytest

from fedring.errors import InvariantViolation, ShapeMismatch
from fedring.ml import OptimizerState, adam_step, cosine_lr


def test_cosine_endpoints_exact():
    opt = OptimizerState(total_steps=1000)
    assert cosine_lr(0, opt) == 1e-4
    assert cosine_lr(1000, opt) == 1e-5
    # clamped beyond the schedule
    assert cosine_lr(5000, opt) == 1e-5
    assert cosine_lr(-3, opt) == 1e-4


def test_cosine_midpoint():
    opt = OptimizerState(total_steps=1000)
    # lr_min + (lr_max - lr_min)/2 * (1 + cos(pi/2)) = 5.5e-5
    assert abs(cosine_lr(500, opt) - 5.5e-5) < 1e-12


def test_cosine_monotone_decreasing():
    opt = OptimizerState(total_steps=200)
    values = [cosine_lr(s, opt) for s in range(201)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_lr_bounds_validation():
    with pytest.raises(InvariantViolation):
        OptimizerState(lr_max=1e-5, lr_min=1e-4)


def test_zero_gradient_is_noop_but_counts():
    w = {"w": np.array([1.0, -2.0])}
    opt = OptimizerState.for_weights(w)
    before = w["w"].copy()
    adam_step(opt, w, {"w": np.zeros(2)})
    np.testing.assert_array_equal(w["w"], before)
    assert opt.step == 1


def test_constant_gradient_descends():
    w = {"w": np.array([0.0])}
    opt = OptimizerState.for_weights(w, lr_max=1e-2, lr_min=1e-3, total_steps=100)
    history = [w["w"][0]]
    for _ in range(50):
        adam_step(opt, w, {"w": np.array([1.0])})
        history.append(w["w"][0])
    assert all(a > b for a, b in zip(history, history[1:]))


def test_converges_on_scalar_quadratic():
    # Run the optimizer itself as the oracle on f(w) = (w - 3)^2.
    w = {"w": np.array([0.0])}
    opt = OptimizerState.for_weights(w, lr_max=1e-1, lr_min=1e-2, total_steps=2000)
    for _ in range(2000):
        grad = 2.0 * (w["w"] - 3.0)
        adam_step(opt, w, {"w": grad})
    assert abs(w["w"][0] - 3.0) < 1e-2


def test_adam_deterministic():
    def run():
        w = {"w": np.linspace(-1, 1, 8)}
        opt = OptimizerState.for_weights(w, lr_max=1e-2, lr_min=1e-3, total_steps=64)
        rng = np.random.default_rng(12)
        for _ in range(64):
            adam_step(opt, w, {"w": rng.standard_normal(8)})
        return w["w"]

    np.testing.assert_array_equal(run(), run())


def test_adam_rejects_mismatched_grads():
    w = {"w": np.zeros(3)}
    opt = OptimizerState.for_weights(w)
    with pytest.raises(ShapeMismatch):
        adam_step(opt, w, {"v": np.zeros(3)})
    with pytest.raises(ShapeMismatch):
        adam_step(opt, w, {"w": np.zeros(4)})
