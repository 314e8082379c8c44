"""3D volumes, masks, interpolation, connectivity, and file I/O.

Axis convention throughout the package: arrays are indexed (z, y, x) in
row-major order, x fastest.  Multi-channel data is channel-major, i.e.
``(channels, depth, height, width)``.

The native on-disk format ".tvol" is a JSON header next to a ".raw"
payload: channel-major, then row major, little-endian.  NIfTI-1
single-file volumes can be read for convenience; only dtype, dims and
pixdim are honoured.
"""
from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ArgumentError, VolumeFormatError

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
_DTYPE_NAMES = {np.dtype("float32"): "f32", np.dtype("uint8"): "u8"}


@dataclass
class Volume:
    """A dense 3D scalar grid with voxel spacing in millimetres.

    ``data`` has shape (channels, depth, height, width); single-channel
    volumes may be constructed from a (d, h, w) array.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.data.ndim == 3:
            self.data = self.data[None]
        if self.data.ndim != 4:
            raise ArgumentError(f"volume data must be 3D or 4D, got ndim={self.data.ndim}")
        if any(s <= 0 for s in self.spacing):
            raise ArgumentError(f"spacing components must be > 0, got {self.spacing}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape[1:]


def as_mask(arr: np.ndarray) -> np.ndarray:
    """Coerce an array to a (d, h, w) uint8 {0,1} mask."""
    a = np.asarray(arr)
    if a.ndim == 4:
        if a.shape[0] != 1:
            raise ArgumentError("mask volumes must be single-channel")
        a = a[0]
    if a.ndim != 3:
        raise ArgumentError(f"mask must be 3D, got ndim={a.ndim}")
    return (a != 0).astype(np.uint8)


# ---------------------------------------------------------------------------
# Trilinear interpolation
# ---------------------------------------------------------------------------

def _corner_setup(shape, points):
    """Clamp points, split into base corner indices and fractional parts.

    Returns (i0, frac, clamped) where i0 has dtype int64, frac is in
    [0, 1] per axis and ``clamped`` marks coordinates that fell outside
    [0, dim-1] before clamping (their positional gradient is zero).
    """
    pts = np.asarray(points, dtype=np.float64)
    dims = np.array(shape, dtype=np.float64)
    clamped = (pts < 0.0) | (pts > dims - 1.0)
    pts = np.clip(pts, 0.0, dims - 1.0)
    # base corner in [0, dim-2] so the +1 corner always exists; for a
    # point exactly on the upper face the fraction becomes 1.0
    i0 = np.minimum(np.floor(pts), dims - 2.0)
    i0 = np.maximum(i0, 0.0)
    frac = pts - i0
    return i0.astype(np.int64), frac, clamped


def _corner_clip(i0, bits, shape):
    """Corner index clipped into range; size-1 axes duplicate corner 0,
    which carries weight 0 there."""
    return tuple(min(int(i0[a]) + bits[a], shape[a] - 1) for a in range(3))


def trilinear_weights(frac):
    """The 8 corner weights for fractional offsets ``frac`` = (fz, fy, fx).

    Corner order is (z, y, x) bit-wise: corner b has index offset
    ((b >> 2) & 1, (b >> 1) & 1, b & 1).
    """
    fz, fy, fx = frac[..., 0], frac[..., 1], frac[..., 2]
    wz = np.stack([1.0 - fz, fz], axis=-1)
    wy = np.stack([1.0 - fy, fy], axis=-1)
    wx = np.stack([1.0 - fx, fx], axis=-1)
    out = []
    for b in range(8):
        out.append(wz[..., (b >> 2) & 1] * wy[..., (b >> 1) & 1] * wx[..., b & 1])
    return np.stack(out, axis=-1)


def trilinear_sample(vol: Volume | np.ndarray, point, channel: int = 0) -> float:
    """Sample one fractional (z, y, x) point with trilinear interpolation.

    Out-of-range coordinates are clamped to the boundary before the 8
    enclosing lattice values are weighted.
    """
    data = vol.data if isinstance(vol, Volume) else np.asarray(vol)
    if data.ndim == 3:
        data = data[None]
    if not 0 <= channel < data.shape[0]:
        raise ArgumentError(f"channel {channel} out of range for {data.shape[0]} channels")
    grid = data[channel]
    i0, frac, _ = _corner_setup(grid.shape, np.asarray(point, dtype=np.float64))
    w = trilinear_weights(frac)
    acc = 0.0
    for b in range(8):
        dz, dy, dx = (b >> 2) & 1, (b >> 1) & 1, b & 1
        idx = _corner_clip(i0, (dz, dy, dx), grid.shape)
        acc += w[b] * float(grid[idx])
    return float(acc)


def trilinear_sample_grad(vol: Volume | np.ndarray, point, channel: int = 0,
                          upstream: float = 1.0):
    """Backward pass of :func:`trilinear_sample`.

    Returns ``(data_grad, point_grad)``: a dense gradient volume for the
    sampled channel (interpolation weights times ``upstream``) and the
    analytic (d/dz, d/dy, d/dx) of the weighted sum.  Axes whose
    coordinate was clamped get positional gradient 0.
    """
    data = vol.data if isinstance(vol, Volume) else np.asarray(vol)
    if data.ndim == 3:
        data = data[None]
    if not 0 <= channel < data.shape[0]:
        raise ArgumentError(f"channel {channel} out of range for {data.shape[0]} channels")
    grid = data[channel]
    i0, frac, clamped = _corner_setup(grid.shape, np.asarray(point, dtype=np.float64))
    w = trilinear_weights(frac)
    data_grad = np.zeros_like(grid, dtype=np.float64)
    corners = np.empty(8)
    for b in range(8):
        dz, dy, dx = (b >> 2) & 1, (b >> 1) & 1, b & 1
        idx = _corner_clip(i0, (dz, dy, dx), grid.shape)
        corners[b] = grid[idx]
        data_grad[idx] += upstream * w[b]

    fz, fy, fx = frac
    wz = (1.0 - fz, fz)
    wy = (1.0 - fy, fy)
    wx = (1.0 - fx, fx)
    gz = gy = gx = 0.0
    for b in range(8):
        dz, dy, dx = (b >> 2) & 1, (b >> 1) & 1, b & 1
        sz = 1.0 if dz else -1.0
        sy = 1.0 if dy else -1.0
        sx = 1.0 if dx else -1.0
        gz += corners[b] * sz * wy[dy] * wx[dx]
        gy += corners[b] * wz[dz] * sy * wx[dx]
        gx += corners[b] * wz[dz] * wy[dy] * sx
    point_grad = np.array([gz, gy, gx]) * upstream
    point_grad[clamped] = 0.0
    return data_grad, point_grad


# ---------------------------------------------------------------------------
# Connectivity
# ---------------------------------------------------------------------------

def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ArgumentError(f"connectivity must be 6 or 26, got {connectivity}")


def connected_components(mask: np.ndarray, connectivity: int = 26):
    """Label foreground components.

    Returns ``(labels, sizes)`` where labels are dense from 1 and
    ``sizes[i]`` is the voxel count of component ``i + 1``.  Use
    ``np.argsort(sizes)[::-1] + 1`` for ids in descending size order.
    """
    m = as_mask(mask)
    labels, n = ndimage.label(m, structure=_structure(connectivity))
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    return labels, sizes


def largest_component(mask: np.ndarray, connectivity: int = 26) -> np.ndarray:
    """Keep only the largest foreground component (empty in, empty out)."""
    labels, sizes = connected_components(mask, connectivity)
    if sizes.size == 0:
        return np.zeros_like(as_mask(mask))
    keep = int(np.argmax(sizes)) + 1
    return (labels == keep).astype(np.uint8)


def fill_holes(mask: np.ndarray) -> np.ndarray:
    """Fill background cavities that do not reach the volume border.

    Background is treated with 6-connectivity, the usual dual of
    26-connected foreground.  Idempotent.
    """
    m = as_mask(mask)
    return ndimage.binary_fill_holes(m, structure=_structure(6)).astype(np.uint8)


# ---------------------------------------------------------------------------
# File I/O: native .tvol
# ---------------------------------------------------------------------------

def _raw_path(tvol_path: Path) -> Path:
    return tvol_path.with_suffix(".raw")


def write_volume(vol: Volume, path: str | Path) -> None:
    """Write a volume as a .tvol JSON header plus sibling .raw payload."""
    path = Path(path)
    dtype_name = _DTYPE_NAMES.get(vol.data.dtype)
    if dtype_name is None:
        raise ArgumentError(f"unsupported dtype {vol.data.dtype}; use float32 or uint8")
    d, h, w = vol.shape
    header = {
        "shape": [d, h, w],
        "spacing": [float(s) for s in vol.spacing],
        "channels": vol.channels,
        "dtype": dtype_name,
        "byte_order": "little",
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(header, indent=2) + "\n")
    payload = np.ascontiguousarray(vol.data).astype(_DTYPES[dtype_name], copy=False)
    _raw_path(path).write_bytes(payload.tobytes())


def read_volume(path: str | Path) -> Volume:
    """Read a .tvol volume (or a NIfTI-1 file by extension)."""
    path = Path(path)
    if path.suffix in (".nii", ".gz") or path.name.endswith(".nii.gz"):
        return read_nifti(path)
    try:
        header = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise VolumeFormatError(f"malformed .tvol header {path}: {e}", byte_offset=e.pos)
    for key in ("shape", "spacing", "channels", "dtype", "byte_order"):
        if key not in header:
            raise VolumeFormatError(f"{path}: header missing field {key!r}")
    if header["byte_order"] != "little":
        raise VolumeFormatError(f"{path}: unsupported byte order {header['byte_order']!r}")
    dtype_name = header["dtype"]
    if dtype_name not in _DTYPES:
        raise VolumeFormatError(f"{path}: unsupported dtype {dtype_name!r}")
    shape = tuple(int(s) for s in header["shape"])
    channels = int(header["channels"])
    if len(shape) != 3 or min(shape) < 1 or channels < 1:
        raise VolumeFormatError(f"{path}: invalid shape {shape} / channels {channels}")
    dtype = _DTYPES[dtype_name]
    expected = channels * shape[0] * shape[1] * shape[2] * dtype.itemsize
    payload = _raw_path(path).read_bytes()
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{_raw_path(path)}: payload size {len(payload)} != expected {expected}",
            byte_offset=min(len(payload), expected),
        )
    data = np.frombuffer(payload, dtype=dtype).reshape((channels, *shape))
    if dtype_name == "f32":
        data = data.astype(np.float32)
    else:
        data = data.astype(np.uint8)
    return Volume(data=data, spacing=tuple(float(s) for s in header["spacing"]))


# ---------------------------------------------------------------------------
# File I/O: NIfTI-1 ingestion (single file, magic "n+1")
# ---------------------------------------------------------------------------

_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32, 64: np.float64}


def read_nifti(path: str | Path) -> Volume:
    """Read a single-file NIfTI-1 volume. Only dtype, dim and pixdim are used.

    The array is returned as (z, y, x) with spacing (dz, dy, dx); data is
    converted to float32 except uint8, which is preserved for masks.
    """
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 352:
        raise VolumeFormatError(f"{path}: truncated NIfTI header", byte_offset=len(raw))

    order = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != 348:
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != 348:
            raise VolumeFormatError(f"{path}: bad sizeof_hdr", byte_offset=0)
        order = ">"
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise VolumeFormatError(f"{path}: bad NIfTI magic {magic!r}", byte_offset=344)
    if magic == b"ni1\x00":
        raise VolumeFormatError(f"{path}: two-file NIfTI (.hdr/.img) is not supported",
                                byte_offset=344)

    dim = struct.unpack_from(order + "8h", raw, 40)
    (datatype,) = struct.unpack_from(order + "h", raw, 70)
    pixdim = struct.unpack_from(order + "8f", raw, 76)
    (vox_offset,) = struct.unpack_from(order + "f", raw, 108)

    ndim = dim[0]
    if ndim < 3 or ndim > 7:
        raise VolumeFormatError(f"{path}: unsupported ndim {ndim}", byte_offset=40)
    if any(dim[i] > 1 for i in range(4, ndim + 1)):
        raise VolumeFormatError(f"{path}: non-singleton extra dimensions", byte_offset=40)
    nx, ny, nz = dim[1], dim[2], dim[3]
    np_dtype = _NIFTI_DTYPES.get(datatype)
    if np_dtype is None:
        raise VolumeFormatError(f"{path}: unsupported NIfTI datatype {datatype}", byte_offset=70)

    count = nx * ny * nz
    start = int(vox_offset)
    end = start + count * np.dtype(np_dtype).itemsize
    if end > len(raw):
        raise VolumeFormatError(
            f"{path}: payload ends at {len(raw)}, need {end}", byte_offset=len(raw))
    data = np.frombuffer(raw[start:end], dtype=np.dtype(np_dtype).newbyteorder(order))
    data = data.reshape((nz, ny, nx))  # x fastest in the file
    if np_dtype is np.uint8:
        data = data.astype(np.uint8)
    else:
        data = data.astype(np.float32)
    spacing = (float(pixdim[3]) or 1.0, float(pixdim[2]) or 1.0, float(pixdim[1]) or 1.0)
    return Volume(data=data, spacing=spacing)
