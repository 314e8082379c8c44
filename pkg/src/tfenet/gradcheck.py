"""Central finite-difference verification of every analytic gradient.

Each check builds a scalar objective L = sum(P * f(inputs)) with a
fixed random projection P, runs the analytic backward pass, then
perturbs every scalar input in turn.  All arithmetic is float64 and
shapes stay at 6 voxels per side or less, so the whole suite runs in
well under a minute.
"""
from __future__ import annotations

import time
import zlib
from dataclasses import dataclass

import numpy as np

from . import ops
from .geometry import Axis, KernelSpec
from .losses import GulParams, TverskyParams, gul_loss, tversky_loss
from .model import DAConvLayer, TffmBlock
from .params import ParamStore


@dataclass(frozen=True)
class GradCheckResult:
    name: str
    rel_err: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.rel_err < self.tol

    def line(self) -> str:
        status = "ok  " if self.passed else "FAIL"
        return (f"{status} {self.name:<22} rel_err {self.rel_err:9.3e} "
                f"(tol {self.tol:.0e}, {self.seconds:.2f}s)")


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(1.0, float(np.abs(analytic).max(initial=0.0)),
                float(np.abs(numeric).max(initial=0.0)))
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def numeric_gradient(f, arr: np.ndarray, h: float) -> np.ndarray:
    """Central differences of scalar-valued f over every element of arr."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        hi = f()
        flat[i] = keep - h
        lo = f()
        flat[i] = keep
        gf[i] = (hi - lo) / (2.0 * h)
    return g


def _check(name, arrays, analytic, loss, h, tol):
    """Compare analytic grads against FD for each named array."""
    t0 = time.perf_counter()
    worst = 0.0
    for arr, grad in zip(arrays, analytic):
        worst = max(worst, relative_error(grad, numeric_gradient(loss, arr, h)))
    return GradCheckResult(name, worst, tol, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# Functional ops
# ---------------------------------------------------------------------------

def check_conv3d(rng, h, tol, pad_mode="zeros"):
    x = rng.standard_normal((2, 4, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3, 3)) * 0.5
    b = rng.standard_normal(3)
    proj = rng.standard_normal((3, 4, 4, 4))

    def loss():
        y, _ = ops.conv3d_forward(x, w, b, pad_mode)
        return float((proj * y).sum())

    y, cache = ops.conv3d_forward(x, w, b, pad_mode)
    dx, dw, db = ops.conv3d_backward(proj, cache)
    return _check(f"conv3d[{pad_mode}]", (x, w, b), (dx, dw, db), loss, h, tol)


def check_instance_norm(rng, h, tol):
    x = rng.standard_normal((3, 4, 4, 4)) * 1.5
    gamma = rng.standard_normal(3) * 0.5 + 1.0
    beta = rng.standard_normal(3) * 0.2
    proj = rng.standard_normal(x.shape)

    def loss():
        y, _ = ops.instance_norm_forward(x, gamma, beta)
        return float((proj * y).sum())

    y, cache = ops.instance_norm_forward(x, gamma, beta)
    dx, dg, db = ops.instance_norm_backward(proj, cache)
    return _check("instance_norm", (x, gamma, beta), (dx, dg, db), loss, h, tol)


def check_maxpool(rng, h, tol):
    # distinct values with gaps well above 2h, so no argmax flips
    vals = rng.permutation(2 * 4 * 4 * 4).astype(np.float64) * 0.01
    x = vals.reshape(2, 4, 4, 4)
    proj = rng.standard_normal((2, 2, 2, 2))

    def loss():
        y, _ = ops.maxpool2_forward(x)
        return float((proj * y).sum())

    y, cache = ops.maxpool2_forward(x)
    dx = ops.maxpool2_backward(proj, cache)
    return _check("maxpool2", (x,), (dx,), loss, h, tol)


def check_upsample(rng, h, tol):
    x = rng.standard_normal((2, 3, 3, 3))
    proj = rng.standard_normal((2, 6, 6, 6))

    def loss():
        y, _ = ops.upsample2_forward(x)
        return float((proj * y).sum())

    y, cache = ops.upsample2_forward(x)
    dx = ops.upsample2_backward(proj, cache)
    return _check("upsample2", (x,), (dx,), loss, h, tol)


def check_pointwise(rng, h, tol, kind):
    fwd = {"relu": ops.relu_forward, "sigmoid": ops.sigmoid_forward,
           "tanh": ops.tanh_forward}[kind]
    bwd = {"relu": ops.relu_backward, "sigmoid": ops.sigmoid_backward,
           "tanh": ops.tanh_backward}[kind]
    x = rng.standard_normal((2, 4, 4, 4))
    if kind == "relu":
        # keep every element a safe distance from the kink at zero
        x = np.where(np.abs(x) < 0.05, 0.1 * np.sign(x) + (x == 0) * 0.1, x)
    proj = rng.standard_normal(x.shape)

    def loss():
        y, _ = fwd(x)
        return float((proj * y).sum())

    y, cache = fwd(x)
    dx = bwd(proj, cache)
    return _check(kind, (x,), (dx,), loss, h, tol)


def check_daconv(rng, h, tol):
    spec = KernelSpec(axis=Axis.X, taps=5, dilation=1, q=np.pi / 4)
    x = rng.standard_normal((2, 5, 5, 5))
    w = rng.standard_normal((2, 2, 5)) * 0.5
    b = rng.standard_normal(2)
    # the trilinear read is only piecewise smooth: redraw angles until
    # every unclamped tap coordinate sits clear of the lattice planes
    for _ in range(50):
        angles = rng.uniform(0.08, 0.6, size=(4, 5, 5, 5)) * rng.choice(
            [-1, 1], size=(4, 5, 5, 5))
        _, cache = ops.daconv_forward(x, w, b, angles, spec)
        fracs = np.concatenate([np.where(t[3], 0.5, t[2]).reshape(-1)
                                for t in cache[3] if t is not None])
        if ((fracs > 0.02) & (fracs < 0.98)).all():
            break
    proj = rng.standard_normal((2, 5, 5, 5))

    def loss():
        y, _ = ops.daconv_forward(x, w, b, angles, spec)
        return float((proj * y).sum())

    y, cache = ops.daconv_forward(x, w, b, angles, spec)
    dx, dw, db, dq = ops.daconv_backward(proj, cache)
    return _check("daconv", (x, w, b, angles), (dx, dw, db, dq), loss, h, tol)


# ---------------------------------------------------------------------------
# Layer-level (parameters live in a store)
# ---------------------------------------------------------------------------

def _jitter_params(store, rng, scale=0.25):
    # zero-initialized angle heads would park every tap on an integer
    # lattice position; nudge all parameters to land on generic slopes
    for p in store:
        p.value += rng.standard_normal(p.value.shape) * scale


def _check_layer(name, layer, store, x, proj, h, tol):
    def loss():
        return float((proj * layer.forward(x)).sum())

    t0 = time.perf_counter()
    store.zero_grads()
    layer.forward(x)
    dx = layer.backward(proj)
    worst = relative_error(dx, numeric_gradient(loss, x, h))
    for p in store:
        worst = max(worst, relative_error(p.grad, numeric_gradient(loss, p.value, h)))
    return GradCheckResult(name, worst, tol, time.perf_counter() - t0)


def check_daconv_layer(rng, h, tol):
    store = ParamStore(dtype=np.float64)
    spec = KernelSpec(axis=Axis.Y, taps=3, dilation=1, q=np.pi / 4)
    layer = DAConvLayer(store, "da", 2, 2, spec, rng)
    _jitter_params(store, rng)
    x = rng.standard_normal((2, 5, 5, 5))
    proj = rng.standard_normal((2, 5, 5, 5))
    return _check_layer("daconv+angle_head", layer, store, x, proj, h, tol)


def check_tffm_block(rng, h, tol):
    store = ParamStore(dtype=np.float64)
    block = TffmBlock(store, "tffm", 2, 2, k=3, q=np.pi / 4, rng=rng)
    _jitter_params(store, rng)
    x = rng.standard_normal((2, 4, 4, 4))
    proj = rng.standard_normal((2, 4, 4, 4))
    return _check_layer("tffm_block", block, store, x, proj, h, tol)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def check_gul(rng, h, tol):
    pred = rng.uniform(0.1, 0.9, size=(4, 4, 4))
    gt = (rng.random((4, 4, 4)) < 0.4).astype(np.uint8)
    w = rng.uniform(0.5, 1.5, size=(4, 4, 4))
    params = GulParams(alpha=0.1, r_l=0.7)

    def loss():
        return gul_loss(pred, gt, w, params)[0]

    _, grad = gul_loss(pred, gt, w, params)
    return _check("gul_loss", (pred,), (grad,), loss, h, tol)


def check_tversky(rng, h, tol):
    pred = rng.uniform(0.1, 0.9, size=(4, 4, 4))
    gt = (rng.random((4, 4, 4)) < 0.4).astype(np.uint8)
    params = TverskyParams(alpha=0.3, beta=0.7)

    def loss():
        return tversky_loss(pred, gt, params)[0]

    _, grad = tversky_loss(pred, gt, params)
    return _check("tversky_loss", (pred,), (grad,), loss, h, tol)


# ---------------------------------------------------------------------------

ALL_CHECKS = ("conv3d", "conv3d_edge", "instance_norm", "maxpool2",
              "upsample2", "relu", "sigmoid", "tanh", "daconv",
              "daconv+angle_head", "tffm_block", "gul_loss", "tversky_loss")


def run_all(seed: int = 0, h: float = 1e-5, tol: float = 1e-4,
            names: tuple[str, ...] | None = None) -> list[GradCheckResult]:
    """Run the suite; independent rng per check so subsets reproduce."""
    if names is None:
        names = ALL_CHECKS
    out = []
    for name in names:
        salt = zlib.crc32(name.encode()) & 0xFFFF
        rng = np.random.default_rng(np.random.SeedSequence((seed, salt)))
        if name == "conv3d":
            out.append(check_conv3d(rng, h, tol))
        elif name == "conv3d_edge":
            out.append(check_conv3d(rng, h, tol, pad_mode="edge"))
        elif name == "instance_norm":
            out.append(check_instance_norm(rng, h, tol))
        elif name == "maxpool2":
            out.append(check_maxpool(rng, h, tol))
        elif name == "upsample2":
            out.append(check_upsample(rng, h, tol))
        elif name in ("relu", "sigmoid", "tanh"):
            out.append(check_pointwise(rng, h, tol, name))
        elif name == "daconv":
            out.append(check_daconv(rng, h, tol))
        elif name == "daconv+angle_head":
            out.append(check_daconv_layer(rng, h, tol))
        elif name == "tffm_block":
            out.append(check_tffm_block(rng, h, tol))
        elif name == "gul_loss":
            out.append(check_gul(rng, h, tol))
        elif name == "tversky_loss":
            out.append(check_tversky(rng, h, tol))
        else:
            raise ValueError(f"unknown gradient check {name!r}")
    return out
