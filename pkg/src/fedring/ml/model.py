"""Segmentation network: 3D encoder-decoder with skip connections plus a
variational branch off the encoder endpoint.

The variational branch maps the flattened bottleneck features through two
dense layers to a latent mean and standard deviation (softplus keeps the
standard deviation positive), samples with the usual reparameterization
during training, takes the mean in eval mode, and decodes back to an
input-sized reconstruction through a dense shape-recovery layer followed
by trilinear upsampling and convolution blocks.

All weights are float64.  Forward/backward are deterministic given the
noise vector, which the test suite exploits for finite-difference checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError, ShapeMismatch
from ..protocol import WeightSet
from . import tensor_ops as T


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    n_classes: int = 3
    base_filters: int = 8
    n_levels: int = 3
    latent_dim: int = 128
    patch_size: tuple[int, int, int] = (32, 32, 32)

    def __post_init__(self):
        object.__setattr__(self, "patch_size", tuple(int(p) for p in self.patch_size))
        if self.n_classes < 2:
            raise ShapeError("n_classes must be >= 2 (background + foreground)")
        if min(self.in_channels, self.base_filters, self.n_levels, self.latent_dim) < 1:
            raise ShapeError("channel/level/latent sizes must be positive")
        div = self.level_divisor()
        if any(p % div for p in self.patch_size):
            raise ShapeError(
                f"patch size {self.patch_size} not divisible by {div} "
                f"(needed for {self.n_levels} levels)"
            )

    @classmethod
    def paper_scale(cls, **overrides) -> "ModelConfig":
        """Preset with the full-size 96^3 input patches."""
        kw = dict(patch_size=(96, 96, 96))
        kw.update(overrides)
        return cls(**kw)

    def level_divisor(self) -> int:
        return 2 ** (self.n_levels - 1)

    def level_channels(self, level: int) -> int:
        return self.base_filters * (2 ** level)

    def bottleneck_spatial(self) -> tuple[int, int, int]:
        div = self.level_divisor()
        return tuple(p // div for p in self.patch_size)

    def bottleneck_flat(self) -> int:
        return self.level_channels(self.n_levels - 1) * int(
            np.prod(self.bottleneck_spatial())
        )

    def weight_shapes(self) -> dict[str, tuple[int, ...]]:
        """Name -> logical shape for every trainable parameter."""
        shapes: dict[str, tuple[int, ...]] = {}
        c_in = self.in_channels
        for l in range(self.n_levels):
            c_out = self.level_channels(l)
            shapes[f"enc{l}.w"] = (3, 3, 3, c_in, c_out)
            shapes[f"enc{l}.b"] = (c_out,)
            c_in = c_out
        for l in range(self.n_levels - 1):
            cat = self.level_channels(l + 1) + self.level_channels(l)
            shapes[f"dec{l}.w"] = (3, 3, 3, cat, self.level_channels(l))
            shapes[f"dec{l}.b"] = (self.level_channels(l),)
        shapes["seg.w"] = (self.level_channels(0), self.n_classes)
        shapes["seg.b"] = (self.n_classes,)
        flat = self.bottleneck_flat()
        shapes["vae_mu.w"] = (flat, self.latent_dim)
        shapes["vae_mu.b"] = (self.latent_dim,)
        shapes["vae_sd.w"] = (flat, self.latent_dim)
        shapes["vae_sd.b"] = (self.latent_dim,)
        shapes["vae_fc.w"] = (self.latent_dim, flat)
        shapes["vae_fc.b"] = (flat,)
        for l in range(self.n_levels - 1):
            shapes[f"vdec{l}.w"] = (3, 3, 3, self.level_channels(l + 1), self.level_channels(l))
            shapes[f"vdec{l}.b"] = (self.level_channels(l),)
        shapes["vrec.w"] = (self.level_channels(0), self.in_channels)
        shapes["vrec.b"] = (self.in_channels,)
        return shapes


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name.endswith(".b"):
        return max(shape[0], 1)
    if len(shape) == 5:          # conv kernel (3,3,3,Cin,K)
        return 27 * shape[3]
    return shape[0]              # dense (in, out)


def init_weights(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Seeded uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)) per tensor.

    Parameters are drawn in sorted-name order so the result depends only
    on the seed and the architecture.
    """
    rng = np.random.default_rng(seed)
    shapes = config.weight_shapes()
    weights = {}
    for name in sorted(shapes):
        shape = shapes[name]
        bound = 1.0 / np.sqrt(_fan_in(name, shape))
        weights[name] = rng.uniform(-bound, bound, size=shape)
    return weights


@dataclass
class SegModel:
    config: ModelConfig
    weights: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, config: ModelConfig, seed: int) -> "SegModel":
        return cls(config, init_weights(config, seed))

    def copy(self) -> "SegModel":
        return SegModel(self.config, {n: w.copy() for n, w in self.weights.items()})

    def n_params(self) -> int:
        return sum(w.size for w in self.weights.values())

    def to_weightset(self, sample_count: int = 0) -> WeightSet:
        return WeightSet.from_arrays(self.weights, sample_count)

    def load_weightset(self, ws: WeightSet) -> None:
        expected = self.config.weight_shapes()
        arrays = ws.to_arrays()
        if set(arrays) != set(expected):
            raise ShapeMismatch(
                f"weight names differ: got {sorted(arrays)[:4]}..., "
                f"expected {sorted(expected)[:4]}..."
            )
        for name, shape in expected.items():
            if arrays[name].shape != shape:
                raise ShapeMismatch(
                    f"{name}: shape {arrays[name].shape} != expected {shape}"
                )
        self.weights = arrays

    @classmethod
    def from_weightset(cls, config: ModelConfig, ws: WeightSet) -> "SegModel":
        model = cls(config)
        model.load_weightset(ws)
        return model


def _check_patch(config: ModelConfig, x_cl: np.ndarray) -> None:
    if x_cl.ndim != 5:
        raise ShapeError(f"expected 5-D input, got {x_cl.shape}")
    spatial = x_cl.shape[1:4]
    div = config.level_divisor()
    if any(s % div for s in spatial):
        raise ShapeError(f"spatial dims {spatial} not divisible by {div}")
    if spatial != config.patch_size:
        raise ShapeError(
            f"spatial dims {spatial} != configured patch size {config.patch_size} "
            "(the variational dense layers fix the input size)"
        )
    if x_cl.shape[4] != config.in_channels:
        raise ShapeError(f"{x_cl.shape[4]} channels != {config.in_channels}")


def forward_cl(
    weights: dict[str, np.ndarray],
    config: ModelConfig,
    x_cl: np.ndarray,
    eps: np.ndarray | None,
):
    """Channels-last forward pass.

    ``eps`` is the latent noise (B, latent_dim) for training mode; None
    selects eval mode, where the latent is the mean vector.
    Returns (outputs dict, cache for backward_cl).
    """
    _check_patch(config, x_cl)
    L = config.n_levels
    B = x_cl.shape[0]
    cache: dict = {"eps": eps, "x_shape": x_cl.shape}

    # encoder
    acts = []
    h = x_cl
    for l in range(L):
        if l > 0:
            h, pool_shape = T.avgpool2(h)
            cache[f"pool{l}"] = pool_shape
        y, cv = T.conv3d(h, weights[f"enc{l}.w"], weights[f"enc{l}.b"])
        h, mask = T.relu(y)
        cache[f"enc{l}"] = (cv, mask)
        acts.append(h)
    bottleneck = acts[-1]

    # segmentation decoder with skip connections
    d = bottleneck
    for l in range(L - 2, -1, -1):
        u, mats = T.upsample2(d)
        cat = np.concatenate([u, acts[l]], axis=-1)
        y, cv = T.conv3d(cat, weights[f"dec{l}.w"], weights[f"dec{l}.b"])
        d, mask = T.relu(y)
        cache[f"dec{l}"] = (mats, u.shape[-1], cv, mask)
    dflat = d.reshape(-1, d.shape[-1])
    logits = (dflat @ weights["seg.w"] + weights["seg.b"]).reshape(
        d.shape[:-1] + (config.n_classes,)
    )
    cache["seg_in"] = dflat

    # variational branch off the encoder endpoint
    flat = bottleneck.reshape(B, -1)
    mu, _ = T.dense(flat, weights["vae_mu.w"], weights["vae_mu.b"])
    sraw, _ = T.dense(flat, weights["vae_sd.w"], weights["vae_sd.b"])
    sigma, _ = T.softplus(sraw)
    z = mu if eps is None else mu + sigma * eps
    g, _ = T.dense(z, weights["vae_fc.w"], weights["vae_fc.b"])
    g, gmask = T.relu(g)
    cache["vae"] = (flat, sraw, sigma, z, gmask)

    sd, sh, sw = config.bottleneck_spatial()
    r = g.reshape(B, sd, sh, sw, config.level_channels(L - 1))
    for l in range(L - 2, -1, -1):
        r, mats = T.upsample2(r)
        y, cv = T.conv3d(r, weights[f"vdec{l}.w"], weights[f"vdec{l}.b"])
        r, mask = T.relu(y)
        cache[f"vdec{l}"] = (mats, cv, mask)
    rflat = r.reshape(-1, r.shape[-1])
    recon = (rflat @ weights["vrec.w"] + weights["vrec.b"]).reshape(
        r.shape[:-1] + (config.in_channels,)
    )
    cache["vrec_in"] = rflat

    outputs = {"logits": logits, "mu": mu, "sigma": sigma, "recon": recon}
    return outputs, cache


def backward_cl(
    weights: dict[str, np.ndarray],
    config: ModelConfig,
    cache: dict,
    dlogits: np.ndarray,
    dmu: np.ndarray,
    dsigma: np.ndarray,
    drecon: np.ndarray,
) -> dict[str, np.ndarray]:
    """Backward pass matching forward_cl; returns gradients per weight."""
    L = config.n_levels
    B = cache["x_shape"][0]
    grads: dict[str, np.ndarray] = {}

    # reconstruction head and decoder
    g2 = drecon.reshape(-1, config.in_channels)
    grads["vrec.w"], grads["vrec.b"], dr = T.dense_backward(
        g2, cache["vrec_in"], weights["vrec.w"]
    )
    dr = dr.reshape(drecon.shape[:-1] + (config.level_channels(0),))
    for l in range(L - 1):
        mats, cv, mask = cache[f"vdec{l}"]
        dr = T.relu_backward(dr, mask)
        grads[f"vdec{l}.w"], grads[f"vdec{l}.b"], dr = T.conv3d_backward(dr, cv)
        dr = T.upsample2_backward(dr, mats)
    dg = dr.reshape(B, -1)

    # latent layers
    flat, sraw, sigma, z, gmask = cache["vae"]
    eps = cache["eps"]
    dg = T.relu_backward(dg, gmask)
    grads["vae_fc.w"], grads["vae_fc.b"], dz = T.dense_backward(
        dg, z, weights["vae_fc.w"]
    )
    dmu_total = dmu + dz
    if eps is None:
        dsigma_total = dsigma
    else:
        dsigma_total = dsigma + dz * eps
    dsraw = T.softplus_backward(dsigma_total, sraw)
    grads["vae_sd.w"], grads["vae_sd.b"], dflat = T.dense_backward(
        dsraw, flat, weights["vae_sd.w"]
    )
    grads["vae_mu.w"], grads["vae_mu.b"], dflat_mu = T.dense_backward(
        dmu_total, flat, weights["vae_mu.w"]
    )
    dflat += dflat_mu

    # segmentation head and decoder; collect skip gradients per level
    g2 = dlogits.reshape(-1, config.n_classes)
    grads["seg.w"], grads["seg.b"], dd = T.dense_backward(
        g2, cache["seg_in"], weights["seg.w"]
    )
    dd = dd.reshape(dlogits.shape[:-1] + (config.level_channels(0),))
    dacts = [None] * L
    for l in range(L - 1):
        mats, c_up, cv, mask = cache[f"dec{l}"]
        dd = T.relu_backward(dd, mask)
        grads[f"dec{l}.w"], grads[f"dec{l}.b"], dcat = T.conv3d_backward(dd, cv)
        du, dskip = dcat[..., :c_up], dcat[..., c_up:]
        dacts[l] = np.ascontiguousarray(dskip)
        dd = T.upsample2_backward(du, mats)

    # encoder endpoint collects decoder top and variational contributions
    sd, sh, sw = config.bottleneck_spatial()
    dbott = dflat.reshape(B, sd, sh, sw, config.level_channels(L - 1))
    dacts[L - 1] = dd + dbott if L > 1 else dd + dbott

    for l in range(L - 1, -1, -1):
        cv, mask = cache[f"enc{l}"]
        dh = T.relu_backward(dacts[l], mask)
        grads[f"enc{l}.w"], grads[f"enc{l}.b"], dinp = T.conv3d_backward(dh, cv)
        if l > 0:
            dpool = T.avgpool2_backward(dinp, cache[f"pool{l}"])
            dacts[l - 1] = dacts[l - 1] + dpool
    return grads


def infer_logits_cl(
    weights: dict[str, np.ndarray], config: ModelConfig, x_cl: np.ndarray
) -> np.ndarray:
    """Segmentation logits only, channels-last, no caches kept.

    Same computation as the encoder/decoder/head portion of forward_cl
    (a test pins the two together); used by sliding-window inference where
    the variational branch is dead weight.
    """
    _check_patch(config, x_cl)
    L = config.n_levels
    acts = []
    h = x_cl
    for l in range(L):
        if l > 0:
            h, _ = T.avgpool2(h)
        y, _ = T.conv3d(h, weights[f"enc{l}.w"], weights[f"enc{l}.b"])
        h, _ = T.relu(y)
        acts.append(h)
    d = acts[-1]
    for l in range(L - 2, -1, -1):
        u, _ = T.upsample2(d)
        cat = np.concatenate([u, acts[l]], axis=-1)
        y, _ = T.conv3d(cat, weights[f"dec{l}.w"], weights[f"dec{l}.b"])
        d, _ = T.relu(y)
    dflat = d.reshape(-1, d.shape[-1])
    return (dflat @ weights["seg.w"] + weights["seg.b"]).reshape(
        d.shape[:-1] + (config.n_classes,)
    )


# -- public channels-first interface ------------------------------------------

def _to_cl(x_cf: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(np.asarray(x_cf, dtype=np.float64), 1, -1))


def _to_cf(x_cl: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(x_cl, -1, 1))


def draw_latent_noise(rng: np.random.Generator, batch: int, latent_dim: int) -> np.ndarray:
    return rng.standard_normal((batch, latent_dim))


def forward(
    model: SegModel,
    patch: np.ndarray,
    train: bool = False,
    rng: np.random.Generator | None = None,
    eps: np.ndarray | None = None,
):
    """Run the network on a (B, C, D, H, W) patch batch.

    In training mode the latent vector is mean + sigma * eps with eps drawn
    from ``rng`` (or passed explicitly); in eval mode it is the mean, so
    eval outputs are a pure function of weights and input.

    Returns {"logits": (B,K,D,H,W), "mu": (B,L), "sigma": (B,L),
    "recon": (B,C,D,H,W)}.
    """
    x_cl = _to_cl(patch)
    if train and eps is None:
        if rng is None:
            raise ValueError("training mode needs an rng or explicit eps")
        eps = draw_latent_noise(rng, x_cl.shape[0], model.config.latent_dim)
    if not train:
        eps = None
    out, _ = forward_cl(model.weights, model.config, x_cl, eps)
    return {
        "logits": _to_cf(out["logits"]),
        "mu": out["mu"],
        "sigma": out["sigma"],
        "recon": _to_cf(out["recon"]),
    }
