"""Neural network primitives with hand-written backward passes.

Every op is a pair of pure functions ``op_forward(...) -> (y, cache)``
and ``op_backward(dy, cache) -> grads``.  Feature maps are channel-major
``(C, D, H, W)`` numpy arrays; there is no batch axis (training uses one
patch at a time).  Ops preserve the input dtype, so the same code runs
float32 for training and float64 for finite-difference checks.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import expit

from .errors import ArgumentError
from .geometry import KernelSpec, offsets_and_grads


# ---------------------------------------------------------------------------
# Padding helpers
# ---------------------------------------------------------------------------

def _pad3(x: np.ndarray, pads: tuple[int, int, int], mode: str) -> np.ndarray:
    pd, ph, pw = pads
    widths = ((0, 0), (pd, pd), (ph, ph), (pw, pw))
    if mode == "zeros":
        return np.pad(x, widths, mode="constant")
    if mode == "edge":
        return np.pad(x, widths, mode="edge")
    raise ArgumentError(f"pad_mode must be 'zeros' or 'edge', got {mode!r}")


def _fold_axis(g: np.ndarray, axis: int, p: int) -> np.ndarray:
    """Adjoint of edge-replication along one axis: sum each pad strip
    into the boundary element it was copied from, then drop the strips."""
    if p == 0:
        return g
    length = g.shape[axis]

    def sl(a, b):
        return tuple(slice(a, b) if i == axis else slice(None) for i in range(g.ndim))

    lead = g[sl(0, p)].sum(axis=axis)
    trail = g[sl(length - p, length)].sum(axis=axis)
    core = g[sl(p, length - p)].copy()
    first = tuple(0 if i == axis else slice(None) for i in range(core.ndim))
    last = tuple(core.shape[axis] - 1 if i == axis else slice(None) for i in range(core.ndim))
    core[first] += lead
    core[last] += trail
    return core


def _unpad_adjoint(g: np.ndarray, pads: tuple[int, int, int], mode: str) -> np.ndarray:
    pd, ph, pw = pads
    if mode == "zeros":
        return g[:, pd:g.shape[1] - pd, ph:g.shape[2] - ph, pw:g.shape[3] - pw].copy()
    # replication pads were applied z, then y, then x; adjoint folds in reverse
    g = _fold_axis(g, 3, pw)
    g = _fold_axis(g, 2, ph)
    g = _fold_axis(g, 1, pd)
    return g


# ---------------------------------------------------------------------------
# Dense 3D convolution (stride 1, same padding, odd kernels)
# ---------------------------------------------------------------------------

def conv3d_forward(x, weight, bias=None, pad_mode: str = "zeros"):
    """Cross-correlation of (Cin, D, H, W) with (Cout, Cin, kd, kh, kw).

    Computed as one matmul per kernel offset against a shifted slab of
    the padded input, which keeps the work inside BLAS without building
    an im2col matrix.
    """
    cout, cin, kd, kh, kw = weight.shape
    if x.shape[0] != cin:
        raise ArgumentError(f"input has {x.shape[0]} channels, weight expects {cin}")
    if kd % 2 == 0 or kh % 2 == 0 or kw % 2 == 0:
        raise ArgumentError(f"kernel dims must be odd, got {(kd, kh, kw)}")
    _, d, h, w = x.shape
    pads = (kd // 2, kh // 2, kw // 2)
    xp = _pad3(x, pads, pad_mode)
    n = d * h * w
    y = np.zeros((cout, n), dtype=x.dtype)
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                slab = xp[:, a:a + d, b:b + h, c:c + w].reshape(cin, n)
                y += weight[:, :, a, b, c] @ slab
    if bias is not None:
        y += bias[:, None]
    cache = (xp, x.shape, weight, pads, pad_mode, bias is not None)
    return y.reshape(cout, d, h, w), cache


def conv3d_backward(dy, cache):
    """Returns (dx, dweight, dbias); dbias is None when bias was absent."""
    xp, x_shape, weight, pads, pad_mode, has_bias = cache
    cout, cin, kd, kh, kw = weight.shape
    _, d, h, w = x_shape
    n = d * h * w
    dyf = dy.reshape(cout, n)
    dweight = np.zeros_like(weight)
    dxp = np.zeros_like(xp)
    for a in range(kd):
        for b in range(kh):
            for c in range(kw):
                slab = xp[:, a:a + d, b:b + h, c:c + w].reshape(cin, n)
                dweight[:, :, a, b, c] = dyf @ slab.T
                dxp[:, a:a + d, b:b + h, c:c + w] += (
                    weight[:, :, a, b, c].T @ dyf).reshape(cin, d, h, w)
    dbias = dyf.sum(axis=1) if has_bias else None
    dx = _unpad_adjoint(dxp, pads, pad_mode)
    return dx, dweight, dbias


# ---------------------------------------------------------------------------
# Pointwise nonlinearities
# ---------------------------------------------------------------------------

def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy, mask):
    return dy * mask


def sigmoid_forward(x):
    y = expit(x)
    return y, y


def sigmoid_backward(dy, y):
    return dy * y * (1.0 - y)


def tanh_forward(x):
    y = np.tanh(x)
    return y, y


def tanh_backward(dy, y):
    return dy * (1.0 - y * y)


# ---------------------------------------------------------------------------
# Instance normalisation (per channel over the spatial volume)
# ---------------------------------------------------------------------------

def instance_norm_forward(x, gamma, beta, eps: float = 1e-5):
    c = x.shape[0]
    flat = x.reshape(c, -1)
    mu = flat.mean(axis=1, keepdims=True)
    var = flat.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (flat - mu) * inv
    y = gamma[:, None] * xhat + beta[:, None]
    cache = (xhat, inv, gamma, x.shape)
    return y.reshape(x.shape).astype(x.dtype, copy=False), cache


def instance_norm_backward(dy, cache):
    xhat, inv, gamma, shape = cache
    c = shape[0]
    dyf = dy.reshape(c, -1)
    dgamma = (dyf * xhat).sum(axis=1)
    dbeta = dyf.sum(axis=1)
    dxhat = dyf * gamma[:, None]
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx.reshape(shape).astype(dy.dtype, copy=False), dgamma, dbeta


# ---------------------------------------------------------------------------
# 2x max pooling / 2x trilinear upsampling
# ---------------------------------------------------------------------------

def maxpool2_forward(x):
    """2x2x2 max pooling, stride 2.  Spatial dims must be even.

    Ties go to the first maximal voxel in (dz, dy, dx) scan order.
    """
    c, d, h, w = x.shape
    if d % 2 or h % 2 or w % 2:
        raise ArgumentError(f"maxpool2 needs even spatial dims, got {(d, h, w)}")
    v = (x.reshape(c, d // 2, 2, h // 2, 2, w // 2, 2)
          .transpose(0, 1, 3, 5, 2, 4, 6)
          .reshape(c, d // 2, h // 2, w // 2, 8))
    idx = np.argmax(v, axis=-1)
    y = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]
    return y, (x.shape, idx)


def maxpool2_backward(dy, cache):
    shape, idx = cache
    c, d, h, w = shape
    g = np.zeros((c, d // 2, h // 2, w // 2, 8), dtype=dy.dtype)
    np.put_along_axis(g, idx[..., None], dy[..., None], axis=-1)
    return (g.reshape(c, d // 2, h // 2, w // 2, 2, 2, 2)
             .transpose(0, 1, 4, 2, 5, 3, 6)
             .reshape(c, d, h, w))


@lru_cache(maxsize=None)
def _upsample_matrix(n: int):
    """(2n, n) trilinear interpolation matrix with half-pixel alignment.

    Output sample i reads input coordinate (i + 0.5) / 2 - 0.5, clamped
    to the valid range, so upsampling then averaging 2x2x2 blocks is an
    identity away from the borders.
    """
    m = np.zeros((2 * n, n))
    if n == 1:
        m[:, 0] = 1.0
        return m
    for i in range(2 * n):
        p = min(max((i + 0.5) / 2.0 - 0.5, 0.0), n - 1.0)
        i0 = min(int(np.floor(p)), n - 2)
        f = p - i0
        m[i, i0] += 1.0 - f
        m[i, i0 + 1] += f
    return m


def _apply_axis(mat, x, axis):
    """Left-multiply ``mat`` along one spatial axis of (C, D, H, W)."""
    moved = np.moveaxis(x, axis, 0)
    lead = moved.shape[0]
    out = mat.astype(x.dtype) @ moved.reshape(lead, -1)
    return np.moveaxis(out.reshape((mat.shape[0],) + moved.shape[1:]), 0, axis)


def upsample2_forward(x):
    """Double each spatial dimension with trilinear interpolation."""
    _, d, h, w = x.shape
    y = _apply_axis(_upsample_matrix(d), x, 1)
    y = _apply_axis(_upsample_matrix(h), y, 2)
    y = _apply_axis(_upsample_matrix(w), y, 3)
    return y, (d, h, w)


def upsample2_backward(dy, cache):
    d, h, w = cache
    g = _apply_axis(_upsample_matrix(d).T, dy, 1)
    g = _apply_axis(_upsample_matrix(h).T, g, 2)
    g = _apply_axis(_upsample_matrix(w).T, g, 3)
    return g


# ---------------------------------------------------------------------------
# Direction-aware deformable linear convolution
# ---------------------------------------------------------------------------

_CORNER_BITS = [((b >> 2) & 1, (b >> 1) & 1, b & 1) for b in range(8)]


def _tap_geometry(spec: KernelSpec, s: float, angles: np.ndarray, base, dims):
    """Sample geometry for one tap over the whole voxel grid.

    Returns (l000, frac, clamped, theta_a, theta_b): flat linear index of
    the low corner, fractional offsets, and the out-of-range mask that
    suppresses positional gradients.
    """
    a_idx, b_idx = (0, 1) if s < 0 else (2, 3)
    theta_a = angles[a_idx].reshape(-1)
    theta_b = angles[b_idx].reshape(-1)
    off, _, _ = offsets_and_grads(spec.axis, s, theta_a, theta_b)
    pos = base + off
    hi = np.array(dims, dtype=np.float64) - 1.0
    clamped = (pos < 0.0) | (pos > hi)
    np.clip(pos, 0.0, hi, out=pos)
    i0 = np.minimum(np.floor(pos), hi - 1.0)
    np.maximum(i0, 0.0, out=i0)
    frac = pos - i0
    i0 = i0.astype(np.int64)
    d, h, w = dims
    l000 = (i0[:, 0] * h + i0[:, 1]) * w + i0[:, 2]
    return l000, frac, clamped, a_idx, b_idx


def _corner_indices(l000, dims):
    """(8, N) linear indices of the interpolation cell corners.

    Axes of extent 1 get a zero step: the duplicated corner carries
    weight 0, which keeps indices in range without special-casing.
    """
    d, h, w = dims
    sz = h * w if d > 1 else 0
    sy = w if h > 1 else 0
    sx = 1 if w > 1 else 0
    steps = np.array([bz * sz + by * sy + bx * sx for bz, by, bx in _CORNER_BITS],
                     dtype=np.int64)
    return l000[None, :] + steps[:, None]


def _corner_weights(frac, dtype):
    """(8, N) trilinear weights and the per-axis factor stacks."""
    fz, fy, fx = frac[:, 0], frac[:, 1], frac[:, 2]
    wz = np.stack([1.0 - fz, fz])
    wy = np.stack([1.0 - fy, fy])
    wx = np.stack([1.0 - fx, fx])
    w = np.empty((8, frac.shape[0]))
    for b, (bz, by, bx) in enumerate(_CORNER_BITS):
        w[b] = wz[bz] * wy[by] * wx[bx]
    return w.astype(dtype, copy=False), (wz, wy, wx)


def daconv_forward(x, weight, bias, angles, spec: KernelSpec):
    """Deformable linear convolution with per-voxel arm angles.

    Args:
        x: input features (Cin, D, H, W).
        weight: tap weights (Cout, Cin, taps).
        bias: (Cout,) or None.
        angles: per-voxel quadruple (4, D, H, W); planes 0..3 are
            theta1..theta4 (negative arm pair, then positive arm pair).
        spec: kernel alignment axis, tap count, dilation.

    Tap positions are bent off the alignment axis by the local angles
    and read with trilinear interpolation; coordinates outside the
    volume are clamped to the boundary face.
    """
    cin, d, h, w = x.shape
    cout, w_cin, k = weight.shape
    if w_cin != cin:
        raise ArgumentError(f"input has {cin} channels, weight expects {w_cin}")
    if k != spec.taps:
        raise ArgumentError(f"weight has {k} taps, spec declares {spec.taps}")
    if angles.shape != (4, d, h, w):
        raise ArgumentError(f"angles must be (4, {d}, {h}, {w}), got {angles.shape}")

    dims = (d, h, w)
    n = d * h * w
    xf = x.reshape(cin, n)
    half = (k - 1) // 2
    base = np.indices(dims, dtype=np.float64).reshape(3, n).T
    y = np.zeros((cout, n), dtype=x.dtype)
    taps = []
    for i in range(k):
        s = float((i - half) * spec.dilation)
        if s == 0.0:
            y += weight[:, :, i] @ xf
            taps.append(None)
            continue
        l000, frac, clamped, a_idx, b_idx = _tap_geometry(spec, s, angles, base, dims)
        lin = _corner_indices(l000, dims)
        cw, _ = _corner_weights(frac, x.dtype)
        v = xf[:, lin.reshape(-1)].reshape(cin, 8, n)
        g = np.einsum("cbn,bn->cn", v, cw)
        y += weight[:, :, i] @ g
        taps.append((s, l000, frac, clamped, a_idx, b_idx))
    if bias is not None:
        y += bias[:, None]
    cache = (x, weight, angles, taps, spec, bias is not None)
    return y.reshape(cout, d, h, w), cache


def daconv_backward(dy, cache):
    """Returns (dx, dweight, dbias, dangles).

    Positional gradients are dropped on axes whose sample coordinate was
    clamped, matching the piecewise-constant boundary extension.
    """
    x, weight, angles, taps, spec, has_bias = cache
    cin, d, h, w = x.shape
    cout, _, k = weight.shape
    dims = (d, h, w)
    n = d * h * w
    xf = x.reshape(cin, n)
    dyf = dy.reshape(cout, n)
    dweight = np.zeros_like(weight)
    dxf = np.zeros(cin * n, dtype=np.float64)
    dangles = np.zeros((4, n), dtype=np.float64)
    chan_off = (np.arange(cin, dtype=np.int64) * n)[:, None]

    for i, tap in enumerate(taps):
        if tap is None:
            dweight[:, :, i] = dyf @ xf.T
            dxf += (weight[:, :, i].T @ dyf).reshape(-1)
            continue
        s, l000, frac, clamped, a_idx, b_idx = tap
        u = weight[:, :, i].T @ dyf                      # (Cin, N)
        lin = _corner_indices(l000, dims)
        cw, (wz, wy, wx) = _corner_weights(frac, x.dtype)
        v = xf[:, lin.reshape(-1)].reshape(cin, 8, n)
        g = np.einsum("cbn,bn->cn", v, cw)
        dweight[:, :, i] = dyf @ g.T

        # input gradient: scatter u through the interpolation weights
        for b in range(8):
            idx = (lin[b][None, :] + chan_off).reshape(-1)
            wgt = (u * cw[b][None, :]).reshape(-1)
            dxf += np.bincount(idx, weights=wgt, minlength=cin * n)

        # positional gradient of the sampled value, per axis
        gz = np.zeros(n)
        gy = np.zeros(n)
        gx = np.zeros(n)
        uv = np.einsum("cn,cbn->bn", u, v)               # (8, N)
        for b, (bz, by, bx) in enumerate(_CORNER_BITS):
            sz = 1.0 if bz else -1.0
            sy = 1.0 if by else -1.0
            sx = 1.0 if bx else -1.0
            gz += uv[b] * (sz * wy[by] * wx[bx])
            gy += uv[b] * (wz[bz] * sy * wx[bx])
            gx += uv[b] * (wz[bz] * wy[by] * sx)
        gz[clamped[:, 0]] = 0.0
        gy[clamped[:, 1]] = 0.0
        gx[clamped[:, 2]] = 0.0

        # chain through the rotation: offsets are (dz, dy, dx) functions
        # of the arm's two angles
        theta_a = angles[a_idx].reshape(-1)
        theta_b = angles[b_idx].reshape(-1)
        _, da, db = offsets_and_grads(spec.axis, s, theta_a, theta_b)
        dangles[a_idx] += gz * da[:, 0] + gy * da[:, 1] + gx * da[:, 2]
        dangles[b_idx] += gz * db[:, 0] + gy * db[:, 1] + gx * db[:, 2]

    dbias = dyf.sum(axis=1) if has_bias else None
    dx = dxf.reshape(cin, d, h, w).astype(x.dtype, copy=False)
    dang = dangles.reshape(angles.shape).astype(angles.dtype, copy=False)
    return dx, dweight, dbias, dang
