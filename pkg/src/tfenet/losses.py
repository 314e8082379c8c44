"""Class-imbalance losses: General Union Loss and Tversky loss.

Both return ``(scalar loss, gradient w.r.t. prediction)`` with the
gradient computed analytically.  The local-imbalance-based (LIB) weight
field turns the local foreground ratio into a per-voxel emphasis on
thin structures.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError


@dataclass(frozen=True)
class GulParams:
    """alpha weighs predictions in the union denominator (beta = 1 - alpha);
    r_l is the root exponent on predictions."""

    alpha: float = 0.05
    r_l: float = 0.7

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ArgumentError(f"alpha must be in (0, 1), got {self.alpha}")
        if not 0.0 < self.r_l <= 1.0:
            raise ArgumentError(f"r_l must be in (0, 1], got {self.r_l}")

    @property
    def beta(self) -> float:
        return 1.0 - self.alpha


@dataclass(frozen=True)
class LibParams:
    """lam floors the weight; r sharpens the log-ratio term (drawn per
    training patch from [2, 3]); window is the cubic box edge for the
    foreground ratio."""

    lam: float = 0.05
    r: float = 2.5
    window: int = 32

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ArgumentError(f"lam must be in [0, 1], got {self.lam}")
        if not 2.0 <= self.r <= 3.0:
            raise ArgumentError(f"r must be in [2, 3], got {self.r}")
        if self.window < 1:
            raise ArgumentError(f"window must be >= 1, got {self.window}")


@dataclass(frozen=True)
class TverskyParams:
    """alpha weighs predictions, beta ground truth; alpha + beta = 1."""

    alpha: float = 0.1
    beta: float = 0.9

    def __post_init__(self):
        if abs(self.alpha + self.beta - 1.0) > 1e-12:
            raise ArgumentError(
                f"alpha + beta must equal 1, got {self.alpha} + {self.beta}")
        if not 0.0 < self.alpha < 1.0:
            raise ArgumentError(f"alpha must be in (0, 1), got {self.alpha}")


# ---------------------------------------------------------------------------
# Foreground ratio and LIB weight
# ---------------------------------------------------------------------------

def foreground_ratio(mask: np.ndarray, window: int = 32) -> np.ndarray:
    """Per-voxel mean of the mask over a cubic window, truncated at borders.

    For even windows the box spans [p - w//2, p + w - 1 - w//2] per
    axis.  Computed with an integral image, so cost is independent of
    window size.
    """
    if window < 1:
        raise ArgumentError(f"window must be >= 1, got {window}")
    m = np.asarray(mask)
    if m.ndim == 4:
        m = m[0]
    if m.ndim != 3:
        raise ArgumentError(f"mask must be 3D, got ndim={m.ndim}")
    m = (m != 0).astype(np.float64)
    lo = window // 2
    hi = window - 1 - lo
    d, h, w = m.shape
    integ = np.zeros((d + 1, h + 1, w + 1))
    integ[1:, 1:, 1:] = m.cumsum(0).cumsum(1).cumsum(2)

    def bounds(n):
        i = np.arange(n)
        return np.maximum(i - lo, 0), np.minimum(i + hi, n - 1) + 1

    z1, z2 = bounds(d)
    y1, y2 = bounds(h)
    x1, x2 = bounds(w)
    box = (integ[np.ix_(z2, y2, x2)] - integ[np.ix_(z1, y2, x2)]
           - integ[np.ix_(z2, y1, x2)] - integ[np.ix_(z2, y2, x1)]
           + integ[np.ix_(z1, y1, x2)] + integ[np.ix_(z1, y2, x1)]
           + integ[np.ix_(z2, y1, x1)] - integ[np.ix_(z1, y1, x1)])
    count = ((z2 - z1)[:, None, None] * (y2 - y1)[None, :, None]
             * (x2 - x1)[None, None, :])
    return box / count


def lib_weight(fr: np.ndarray, params: LibParams = LibParams()) -> np.ndarray:
    """Local-imbalance weight: omega = (1 - lam) * min(-log10 FR, 1)^r + lam.

    FR of 1 gives the floor lam; FR at or below 0.1 saturates the
    capped log term, giving 1.  FR of exactly 0 is treated as saturated.
    """
    fr = np.asarray(fr, dtype=np.float64)
    term = np.ones_like(fr)
    live = fr >= 1e-10
    with np.errstate(divide="ignore"):
        term[live] = np.minimum(-np.log10(fr[live]), 1.0)
    term = np.maximum(term, 0.0)
    return (1.0 - params.lam) * term ** params.r + params.lam


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _flat(pred, gt, weights=None):
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt)
    if p.shape != g.shape and p.squeeze().shape != g.squeeze().shape:
        raise ArgumentError(f"pred shape {p.shape} != gt shape {g.shape}")
    shape = p.shape
    p = p.reshape(-1)
    g = (g != 0).astype(np.float64).reshape(-1)
    if weights is None:
        w = np.ones_like(p)
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        if w.size != p.size:
            raise ArgumentError("weights shape does not match pred")
    return p, g, w, shape


def gul_loss(pred, gt, weights=None, params: GulParams = GulParams()):
    """General Union Loss U = 1 - sum(w p^r g) / sum(w (a p + b g)).

    Args:
        pred: probability volume, values in (0, 1).
        gt: binary mask, same shape.
        weights: per-voxel omega field (defaults to uniform 1).
        params: alpha and root exponent.

    Returns (loss, dloss/dpred).  Empty prediction and ground truth give
    loss 0 with zero gradient.
    """
    p, g, w, shape = _flat(pred, gt, weights)
    a, b, r = params.alpha, params.beta, params.r_l
    num = float((w * np.power(p, r) * g).sum())
    den = float((w * (a * p + b * g)).sum())
    if den == 0.0:
        return 0.0, np.zeros(shape)
    loss = 1.0 - num / den
    # d/dp_i [1 - N/D]: N'_i = w_i r p^(r-1) g_i, D'_i = w_i a
    t = np.zeros_like(p)
    fg = g > 0
    t[fg] = r * np.power(p[fg], r - 1.0) * g[fg]
    grad = w * (a * num - t * den) / den ** 2
    return loss, grad.reshape(shape)


def tversky_loss(pred, gt, params: TverskyParams = TverskyParams()):
    """Tversky loss T = 1 - sum(p g) / sum(a p + b g), with gradient.

    alpha = beta = 0.5 reduces the index to Dice.  Empty/empty gives
    loss 0 with zero gradient.
    """
    p, g, _, shape = _flat(pred, gt)
    a, b = params.alpha, params.beta
    num = float((p * g).sum())
    den = float((a * p + b * g).sum())
    if den == 0.0:
        return 0.0, np.zeros(shape)
    loss = 1.0 - num / den
    grad = (a * num - g * den) / den ** 2
    return loss, grad.reshape(shape)
