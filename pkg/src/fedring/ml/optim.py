"""Adam with a cosine-annealed learning rate.

The schedule runs from lr_max at step 0 down to lr_min at total_steps and
stays there; the endpoints are returned exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvariantViolation, ShapeMismatch


@dataclass
class OptimizerState:
    step: int = 0
    lr_max: float = 1e-4
    lr_min: float = 1e-5
    total_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr_min > self.lr_max:
            raise InvariantViolation("lr_min must be <= lr_max")
        if self.total_steps < 1:
            raise InvariantViolation("total_steps must be >= 1")

    @classmethod
    def for_weights(cls, weights: dict[str, np.ndarray], **kwargs) -> "OptimizerState":
        opt = cls(**kwargs)
        opt.m = {n: np.zeros_like(w) for n, w in weights.items()}
        opt.v = {n: np.zeros_like(w) for n, w in weights.items()}
        return opt


def cosine_lr(step: int, opt: OptimizerState) -> float:
    s = min(max(step, 0), opt.total_steps)
    if s == 0:
        return opt.lr_max
    if s == opt.total_steps:
        return opt.lr_min
    return float(
        opt.lr_min
        + 0.5 * (opt.lr_max - opt.lr_min) * (1.0 + np.cos(np.pi * s / opt.total_steps))
    )


def adam_step(
    opt: OptimizerState,
    weights: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
):
    """One Adam update with bias correction, in place.  Returns (weights, opt)."""
    if set(grads) != set(weights):
        raise ShapeMismatch("gradient names do not match weight names")
    lr = cosine_lr(opt.step, opt)
    t = opt.step + 1
    bc1 = 1.0 - opt.beta1 ** t
    bc2 = 1.0 - opt.beta2 ** t
    for name, w in weights.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ShapeMismatch(f"{name}: grad shape {g.shape} != {w.shape}")
        m = opt.m[name]
        v = opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * (g * g)
        w -= lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
    opt.step = t
    return weights, opt
