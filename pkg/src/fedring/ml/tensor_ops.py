"""Low-level tensor operations with hand-written backward passes.

Activations use a channels-last layout (B, D, H, W, C) internally so all
heavy lifting lands in BLAS matmuls over contiguous slices.  Every forward
returns whatever its backward needs; backwards return exact analytic
gradients (the test suite checks them against central finite differences).

Convolutions are 3x3x3, stride 1, zero-padded.  The implementation
linearizes the padded volume to 2D rows and accumulates one matmul per
kernel offset over contiguous row slices, which avoids the scattered
gather of an explicit im2col.
"""

from __future__ import annotations

import numpy as np

_OFFSETS = [(dx, dy, dz) for dx in range(3) for dy in range(3) for dz in range(3)]


# -- 3x3x3 convolution -------------------------------------------------------

def conv3d(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """x: (B, D, H, W, C) contiguous; w: (3,3,3,C,K); b: (K,).

    Returns (y, cache) with y of shape (B, D, H, W, K).
    """
    B, D, H, W, C = x.shape
    K = w.shape[-1]
    Dp, Hp, Wp = D + 2, H + 2, W + 2
    xpad = np.zeros((B, Dp, Hp, Wp, C))
    xpad[:, 1:-1, 1:-1, 1:-1, :] = x
    P = B * Dp * Hp * Wp
    x2d = xpad.reshape(P, C)
    w27 = w.reshape(27, C, K)
    offs = [(dx * Hp + dy) * Wp + dz for dx, dy, dz in _OFFSETS]
    N = P - offs[-1]

    ypad = np.zeros((P, K))
    tmp = np.empty((N, K))
    for o, L in enumerate(offs):
        np.dot(x2d[L : L + N], w27[o], out=tmp)
        np.add(ypad[:N], tmp, out=ypad[:N])
    # Rows whose corner coordinate exceeds the valid output range contain
    # cross-boundary garbage; slicing the padded view drops them.
    y = ypad.reshape(B, Dp, Hp, Wp, K)[:, :D, :H, :W, :] + b
    cache = (x2d, w27, offs, N, (B, D, H, W, C), (Dp, Hp, Wp))
    return y, cache


def conv3d_backward(g: np.ndarray, cache):
    """g: (B, D, H, W, K) gradient at the conv output.

    Returns (dw, db, dx) with dw shaped like the (3,3,3,C,K) kernel.
    """
    x2d, w27, offs, N, (B, D, H, W, C), (Dp, Hp, Wp) = cache
    K = w27.shape[-1]
    P = x2d.shape[0]
    gpad = np.zeros((P, K))
    gpad.reshape(B, Dp, Hp, Wp, K)[:, :D, :H, :W, :] = g

    dw27 = np.empty((27, C, K))
    dx2d = np.zeros((P, C))
    tmp = np.empty((N, C))
    for o, L in enumerate(offs):
        np.dot(x2d[L : L + N].T, gpad[:N], out=dw27[o])
        np.dot(gpad[:N], w27[o].T, out=tmp)
        np.add(dx2d[L : L + N], tmp, out=dx2d[L : L + N])

    db = g.sum(axis=(0, 1, 2, 3))
    dx = np.ascontiguousarray(
        dx2d.reshape(B, Dp, Hp, Wp, C)[:, 1:-1, 1:-1, 1:-1, :]
    )
    return dw27.reshape(3, 3, 3, C, K), db, dx


# -- 2x average pooling -------------------------------------------------------

def avgpool2(x: np.ndarray):
    B, D, H, W, C = x.shape
    y = x.reshape(B, D // 2, 2, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4, 6))
    return y, x.shape


def avgpool2_backward(g: np.ndarray, in_shape):
    B, D, H, W, C = in_shape
    gb = (g * 0.125)[:, :, None, :, None, :, None, :]
    dx = np.broadcast_to(gb, (B, D // 2, 2, H // 2, 2, W // 2, 2, C))
    return np.ascontiguousarray(dx).reshape(in_shape)


# -- 2x trilinear upsampling --------------------------------------------------

def upsample2_matrix(n: int) -> np.ndarray:
    """1-D linear interpolation matrix (2n, n), voxel-center convention,
    clamped at the edges.  The 3-D upsample is separable, so its exact
    adjoint is the transposed matrix applied per axis."""
    m = np.zeros((2 * n, n))
    if n == 1:
        m[:, 0] = 1.0
        return m
    pos = np.clip((np.arange(2 * n) + 0.5) / 2.0 - 0.5, 0.0, n - 1.0)
    i0 = np.minimum(pos.astype(int), n - 2)
    f = pos - i0
    m[np.arange(2 * n), i0] = 1.0 - f
    m[np.arange(2 * n), i0 + 1] += f
    return m


def _apply_axis(x: np.ndarray, m: np.ndarray, axis: int) -> np.ndarray:
    xt = np.moveaxis(x, axis, -1)
    yt = xt @ m.T
    return np.moveaxis(yt, -1, axis)


def upsample2(x: np.ndarray):
    """(B, D, H, W, C) -> (B, 2D, 2H, 2W, C)."""
    _, D, H, W, _ = x.shape
    mats = (upsample2_matrix(D), upsample2_matrix(H), upsample2_matrix(W))
    y = x
    for axis, m in zip((1, 2, 3), mats):
        y = _apply_axis(y, m, axis)
    return np.ascontiguousarray(y), mats


def upsample2_backward(g: np.ndarray, mats) -> np.ndarray:
    dx = g
    for axis, m in zip((1, 2, 3), mats):
        dx = _apply_axis(dx, m.T, axis)
    return np.ascontiguousarray(dx)


# -- activations --------------------------------------------------------------

def relu(x: np.ndarray):
    y = np.maximum(x, 0.0)
    return y, y


def relu_backward(g: np.ndarray, y: np.ndarray) -> np.ndarray:
    return g * (y > 0.0)


def softplus(x: np.ndarray):
    return np.logaddexp(0.0, x), x


def softplus_backward(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    return g * sigmoid(x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_lastaxis(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    """Gradient through softmax: dlogits given dL/dp and p."""
    inner = (dp * p).sum(axis=-1, keepdims=True)
    return p * (dp - inner)


# -- dense layers --------------------------------------------------------------

def dense(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """x: (N, F); w: (F, O); b: (O,)."""
    return x @ w + b, x


def dense_backward(g: np.ndarray, x: np.ndarray, w: np.ndarray):
    dw = x.T @ g
    db = g.sum(axis=0)
    dx = g @ w.T
    return dw, db, dx
