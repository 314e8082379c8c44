"""Geometry of direction-aware linear kernels.

A linear kernel is a 1-D row of k taps embedded in 3D along one of the
grid axes.  Two learned angle pairs bend its arms: (theta1, theta2)
rotate the negative arm (taps at signed distance s < 0) and
(theta3, theta4) the positive arm.  The centre tap never moves.

Rotation order depends on the alignment axis.  For an X-aligned kernel
the tap is rotated first about the y axis (elevation) and then about z
(azimuth); Y-aligned kernels rotate about x then z; Z-aligned about x
then y.  All rotations are right-handed in the (x, y, z) frame; results
are reported in array order (dz, dy, dx).
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ArgumentError


class Axis(str, Enum):
    """Alignment axis of a linear kernel, in array terms.

    X is the fastest-varying array axis (width), Y is height, Z depth.
    """

    X = "x"
    Y = "y"
    Z = "z"


@dataclass(frozen=True)
class KernelSpec:
    """Shape of a direction-aware linear kernel.

    taps must be odd so the centre tap sits on the output voxel;
    dilation stretches the signed tap distances; q bounds the rotation
    angles the kernel accepts (radians).
    """

    axis: Axis
    taps: int = 7
    dilation: int = 1
    q: float = np.pi / 4

    def __post_init__(self):
        if self.taps < 1 or self.taps % 2 == 0:
            raise ArgumentError(f"taps must be odd and >= 1, got {self.taps}")
        if self.dilation < 1:
            raise ArgumentError(f"dilation must be >= 1, got {self.dilation}")
        if not 0.0 < self.q <= np.pi:
            raise ArgumentError(f"q must be in (0, pi], got {self.q}")


@dataclass(frozen=True)
class Angles:
    """One angle quadruple: negative arm (theta1, theta2), positive arm
    (theta3, theta4).  Radians."""

    theta1: float = 0.0
    theta2: float = 0.0
    theta3: float = 0.0
    theta4: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.theta1, self.theta2, self.theta3, self.theta4])


# ---------------------------------------------------------------------------
# Elementary rotations, (x, y, z) frame, right-handed
# ---------------------------------------------------------------------------

def rotation_matrix(axis: Axis, angle: float) -> np.ndarray:
    """3x3 right-handed rotation about ``axis`` acting on (x, y, z) vectors."""
    c, s = np.cos(angle), np.sin(angle)
    if axis == Axis.X:
        return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    if axis == Axis.Y:
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    if axis == Axis.Z:
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    raise ArgumentError(f"unknown axis {axis!r}")


# First/second rotation axis per alignment axis.  The first rotation
# tilts the arm out of the kernel's home plane, the second swings it
# around the remaining axis.
_ROT_AXES = {Axis.X: (Axis.Y, Axis.Z), Axis.Y: (Axis.X, Axis.Z), Axis.Z: (Axis.X, Axis.Y)}


def base_taps(spec: KernelSpec) -> np.ndarray:
    """Signed tap distances s = c * dilation for c in [-(k-1)/2, (k-1)/2]."""
    half = (spec.taps - 1) // 2
    return np.arange(-half, half + 1, dtype=np.float64) * spec.dilation


def _arm_angles(angles: Angles, s: float) -> tuple[float, float]:
    if s < 0:
        return angles.theta1, angles.theta2
    return angles.theta3, angles.theta4


def _offset_xyz(axis: Axis, s: float, ta: float, tb: float) -> np.ndarray:
    """Closed-form rotated tap position in (x, y, z) components."""
    ca, sa = np.cos(ta), np.sin(ta)
    cb, sb = np.cos(tb), np.sin(tb)
    if axis == Axis.X:
        # Rz(tb) @ Ry(ta) @ (s, 0, 0)
        return np.array([s * ca * cb, s * ca * sb, -s * sa])
    if axis == Axis.Y:
        # Rz(tb) @ Rx(ta) @ (0, s, 0)
        return np.array([-s * ca * sb, s * ca * cb, s * sa])
    # Axis.Z: Ry(tb) @ Rx(ta) @ (0, 0, s)
    return np.array([s * ca * sb, -s * sa, s * ca * cb])


def rotated_offsets(spec: KernelSpec, angles: Angles) -> np.ndarray:
    """Per-tap sampling offsets, shape (taps, 3) in array order (dz, dy, dx).

    Tap i sits at signed distance s = (i - (taps-1)/2) * dilation; its
    arm's angle pair rotates it off the alignment axis.  At zero angles
    this reduces to the straight dilated row.
    """
    worst = np.max(np.abs(angles.as_array()))
    if worst > spec.q + 1e-12:
        raise ArgumentError(f"angle magnitude {worst} exceeds kernel bound q={spec.q}")
    out = np.empty((spec.taps, 3))
    for i, s in enumerate(base_taps(spec)):
        ta, tb = _arm_angles(angles, s)
        x, y, z = _offset_xyz(spec.axis, float(s), ta, tb)
        out[i] = (z, y, x)
    return out


def sampling_positions(centre, spec: KernelSpec, angles: Angles) -> np.ndarray:
    """Absolute fractional sample positions for a kernel centred at
    ``centre`` = (z, y, x).  Shape (taps, 3)."""
    c = np.asarray(centre, dtype=np.float64)
    if c.shape != (3,):
        raise ArgumentError(f"centre must be a 3-vector, got shape {c.shape}")
    return c[None, :] + rotated_offsets(spec, angles)


# ---------------------------------------------------------------------------
# Vectorised offsets and angle derivatives for the conv layer
# ---------------------------------------------------------------------------

def offsets_and_grads(axis: Axis, s: float, theta_a: np.ndarray, theta_b: np.ndarray):
    """Offsets and their angle derivatives for one tap over a field of angles.

    ``theta_a``/``theta_b`` are same-shaped arrays (the arm's first and
    second rotation angle at every voxel).  Returns three arrays of
    shape ``theta_a.shape + (3,)`` in (dz, dy, dx) order: the offset,
    d(offset)/d(theta_a) and d(offset)/d(theta_b).

    Which pair (theta1, theta2) or (theta3, theta4) to pass is decided
    by the caller from sign(s); s = 0 gives all-zero output.
    """
    ca, sa = np.cos(theta_a), np.sin(theta_a)
    cb, sb = np.cos(theta_b), np.sin(theta_b)
    zero = np.zeros_like(ca)
    if axis == Axis.X:
        # (x, y, z) = s * (ca*cb, ca*sb, -sa)
        off = np.stack([-s * sa, s * ca * sb, s * ca * cb], axis=-1)
        da = np.stack([-s * ca, -s * sa * sb, -s * sa * cb], axis=-1)
        db = np.stack([zero, s * ca * cb, -s * ca * sb], axis=-1)
    elif axis == Axis.Y:
        # (x, y, z) = s * (-ca*sb, ca*cb, sa)
        off = np.stack([s * sa, s * ca * cb, -s * ca * sb], axis=-1)
        da = np.stack([s * ca, -s * sa * cb, s * sa * sb], axis=-1)
        db = np.stack([zero, -s * ca * sb, -s * ca * cb], axis=-1)
    elif axis == Axis.Z:
        # (x, y, z) = s * (ca*sb, -sa, ca*cb)
        off = np.stack([s * ca * cb, -s * sa, s * ca * sb], axis=-1)
        da = np.stack([-s * sa * cb, -s * ca, -s * sa * sb], axis=-1)
        db = np.stack([-s * ca * sb, zero, s * ca * cb], axis=-1)
    else:
        raise ArgumentError(f"unknown axis {axis!r}")
    return off, da, db
