"""Core tensor ops against brute-force oracles and exact identities."""
import numpy as np
import pytest

from tfenet import ops
from tfenet.errors import ArgumentError
from tfenet.geometry import Axis, KernelSpec


def conv3d_oracle(x, weight, bias, pad_mode):
    """Direct seven-loop cross-correlation; deliberately naive."""
    cout, cin, kd, kh, kw = weight.shape
    _, d, h, w = x.shape
    pads = [(0, 0), (kd // 2, kd // 2), (kh // 2, kh // 2), (kw // 2, kw // 2)]
    mode = {"zeros": "constant", "edge": "edge"}[pad_mode]
    xp = np.pad(x, pads, mode=mode)
    y = np.zeros((cout, d, h, w))
    for co in range(cout):
        for z in range(d):
            for r in range(h):
                for c in range(w):
                    acc = 0.0
                    for ci in range(cin):
                        for a in range(kd):
                            for b in range(kh):
                                for e in range(kw):
                                    acc += (weight[co, ci, a, b, e]
                                            * xp[ci, z + a, r + b, c + e])
                    y[co, z, r, c] = acc + (bias[co] if bias is not None else 0.0)
    return y


@pytest.mark.parametrize("pad_mode", ["zeros", "edge"])
def test_conv3d_matches_naive_enumeration(pad_mode, rng):
    x = rng.standard_normal((2, 3, 4, 3))
    w = rng.standard_normal((3, 2, 3, 1, 3))
    b = rng.standard_normal(3)
    y, _ = ops.conv3d_forward(x, w, b, pad_mode)
    assert np.abs(y - conv3d_oracle(x, w, b, pad_mode)).max() < 1e-12


def test_conv3d_rejects_even_kernel_and_channel_mismatch(rng):
    with pytest.raises(ArgumentError):
        ops.conv3d_forward(rng.random((2, 3, 3, 3)), rng.random((1, 2, 2, 3, 3)))
    with pytest.raises(ArgumentError):
        ops.conv3d_forward(rng.random((2, 3, 3, 3)), rng.random((1, 3, 3, 3, 3)))


def test_pointwise_forward_values(rng):
    x = rng.standard_normal((2, 3, 3, 3))
    relu, _ = ops.relu_forward(x)
    assert np.array_equal(relu, np.maximum(x, 0.0))
    sig, _ = ops.sigmoid_forward(x)
    assert np.allclose(sig, 1.0 / (1.0 + np.exp(-x)), atol=1e-15)
    th, _ = ops.tanh_forward(x)
    assert np.allclose(th, np.tanh(x), atol=1e-15)


def test_maxpool_picks_block_maxima():
    x = np.arange(4 ** 3, dtype=np.float64).reshape(1, 4, 4, 4)
    y, _ = ops.maxpool2_forward(x)
    assert y.shape == (1, 2, 2, 2)
    # last element of each 2x2x2 block wins for an ascending ramp
    assert y[0, 0, 0, 0] == x[0, 1, 1, 1]
    assert y[0, 1, 1, 1] == x[0, 3, 3, 3]


def test_maxpool_backward_routes_to_argmax(rng):
    x = rng.permutation(2 * 4 * 4 * 4).astype(np.float64).reshape(2, 4, 4, 4)
    y, cache = ops.maxpool2_forward(x)
    dy = rng.standard_normal(y.shape)
    dx = ops.maxpool2_backward(dy, cache)
    assert dx.shape == x.shape
    # every block routes its whole gradient to one voxel
    assert (dx != 0).sum() == y.size
    assert dx.sum() == pytest.approx(dy.sum(), abs=1e-12)


def test_upsample_of_constant_is_constant():
    x = np.full((2, 3, 3, 3), 2.5)
    y, _ = ops.upsample2_forward(x)
    assert y.shape == (2, 6, 6, 6)
    assert np.abs(y - 2.5).max() < 1e-12


def test_upsample_linear_ramp_stays_linear():
    n = 4
    ramp = np.arange(n, dtype=np.float64)
    x = np.broadcast_to(ramp[None, :, None, None], (1, n, n, n)).copy()
    y, _ = ops.upsample2_forward(x)
    # interior second differences along the ramp axis vanish
    d2 = np.diff(y[0, 1:-1, 0, 0], n=2)
    assert np.abs(d2).max() < 1e-12


def test_upsample_backward_is_adjoint(rng):
    x = rng.standard_normal((1, 3, 3, 3))
    y, cache = ops.upsample2_forward(x)
    dy = rng.standard_normal(y.shape)
    dx = ops.upsample2_backward(dy, cache)
    # <Ax, dy> == <x, A* dy> for the linear map A
    assert float((y * dy).sum()) == pytest.approx(float((x * dx).sum()), rel=1e-12)


def line_kernel(weight, axis):
    k = weight.shape[2]
    shape = {Axis.X: (1, 1, k), Axis.Y: (1, k, 1), Axis.Z: (k, 1, 1)}[axis]
    return weight.reshape(*weight.shape[:2], *shape)


@pytest.mark.parametrize("axis", [Axis.X, Axis.Y, Axis.Z])
def test_daconv_zero_angles_equals_dense_line_conv(axis, rng):
    """Straight kernels: the deformable path must reduce exactly to an
    axis-aligned dense convolution with replicated borders."""
    spec = KernelSpec(axis=axis, taps=5, dilation=1)
    x = rng.standard_normal((2, 6, 6, 6))
    w = rng.standard_normal((3, 2, 5))
    b = rng.standard_normal(3)
    zeros = np.zeros((4, 6, 6, 6))
    y, _ = ops.daconv_forward(x, w, b, zeros, spec)
    want, _ = ops.conv3d_forward(x, line_kernel(w, axis), b, pad_mode="edge")
    assert np.abs(y - want).max() < 1e-12


def test_daconv_center_tap_only_is_pointwise(rng):
    spec = KernelSpec(axis=Axis.X, taps=1)
    x = rng.standard_normal((2, 4, 4, 4))
    w = rng.standard_normal((2, 2, 1))
    ang = rng.uniform(-0.5, 0.5, size=(4, 4, 4, 4))
    y, _ = ops.daconv_forward(x, w, None, ang, spec)
    want = np.einsum("oc,cdhw->odhw", w[:, :, 0], x)
    assert np.abs(y - want).max() < 1e-12


def test_daconv_validates_shapes(rng):
    spec = KernelSpec(axis=Axis.X, taps=3)
    x = rng.random((2, 4, 4, 4))
    with pytest.raises(ArgumentError):
        ops.daconv_forward(x, rng.random((2, 3, 3)), None,
                           np.zeros((4, 4, 4, 4)), spec)
    with pytest.raises(ArgumentError):
        ops.daconv_forward(x, rng.random((2, 2, 5)), None,
                           np.zeros((4, 4, 4, 4)), spec)
    with pytest.raises(ArgumentError):
        ops.daconv_forward(x, rng.random((2, 2, 3)), None,
                           np.zeros((4, 3, 4, 4)), spec)


def test_daconv_boundary_taps_clamp_to_faces(rng):
    # a tube of ones: every sample stays 1 no matter how arms bend,
    # because out-of-range coordinates clamp to the boundary face
    spec = KernelSpec(axis=Axis.Z, taps=7, dilation=2)
    x = np.ones((1, 4, 4, 4))
    w = np.full((1, 1, 7), 1.0 / 7)
    ang = rng.uniform(-0.7, 0.7, size=(4, 4, 4, 4))
    y, _ = ops.daconv_forward(x, w, None, ang, spec)
    assert np.abs(y - 1.0).max() < 1e-12
