"""Space-filling-curve codecs over a quantized 3D grid.

Two curve kinds are provided: Morton (Z-order, plain bit interleaving) and
Hilbert (Skilling's transpose construction). Codes are ``uint64`` and all
functions are vectorized: pass an ``(N, 3)`` array to get ``N`` codes back, or
a single triple to get a Python ``int``.

Bit layout
----------
Morton puts bit ``i`` of x at output bit ``3i``, y at ``3i + 1`` and z at
``3i + 2``. Hilbert starts at the origin cell (index 0) and every step moves to
a face-adjacent cell; the base 2x2x2 pattern is the reflected Gray code with x
as the most significant bit.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import OutOfRange

MAX_BITS = 21


class CurveKind(str, enum.Enum):
    HILBERT = "hilbert"
    MORTON = "morton"


@dataclass(frozen=True)
class CurveParams:
    """Quantization grid shared by every level of a hierarchy.

    ``origin`` is the minimum corner of the grid; points are shifted by it
    before flooring so clouds with negative coordinates quantize cleanly.
    """

    grid_size: float = 0.01
    bits: int = MAX_BITS
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.grid_size > 0:
            raise ValueError(f"grid_size must be > 0, got {self.grid_size}")
        if not 1 <= self.bits <= MAX_BITS:
            raise ValueError(f"bits must be in [1, {MAX_BITS}], got {self.bits}")
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        if len(self.origin) != 3:
            raise ValueError("origin must be a 3-vector")

    @classmethod
    def for_points(cls, points, grid_size=0.01, bits=MAX_BITS):
        """Params whose origin is the axis-aligned minimum of ``points``."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return cls(grid_size=grid_size, bits=bits, origin=tuple(points.min(axis=0)))

    @property
    def side(self):
        return 1 << self.bits


def _coords_array(c, bits):
    arr = np.asarray(c)
    scalar = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[-1] != 3:
        raise ValueError(f"expected (..., 3) grid coordinates, got shape {arr.shape}")
    if np.issubdtype(arr.dtype, np.floating):
        if not np.all(arr == np.floor(arr)):
            raise ValueError("grid coordinates must be integers")
    signed = arr.astype(np.int64)
    bad = np.flatnonzero(np.any((signed < 0) | (signed >= (1 << bits)), axis=1))
    if bad.size:
        raise OutOfRange(
            f"grid coordinate {signed[bad[0]].tolist()} outside [0, 2^{bits})",
            index=int(bad[0]),
        )
    return signed.astype(np.uint64), scalar


def _codes_array(code, bits):
    arr = np.asarray(code)
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr)
    if arr.dtype.kind == "i" and np.any(arr < 0):
        raise OutOfRange("negative curve code")
    arr = arr.astype(np.uint64)
    limit = np.uint64(1) << np.uint64(3 * bits)
    bad = np.flatnonzero(arr >= limit)
    if bad.size:
        raise OutOfRange(f"code {int(arr[bad[0]])} outside [0, 2^{3 * bits})", index=int(bad[0]))
    return arr, scalar


def _spread3(v):
    # 21-bit value -> bits at positions 0, 3, 6, ...
    v = v & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def _compact3(v):
    v = v & np.uint64(0x1249249249249249)
    v = (v | (v >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v >> np.uint64(32))) & np.uint64(0x1FFFFF)
    return v


def _interleave(a, b, c):
    """``a`` lands on bits 3i, ``b`` on 3i+1, ``c`` on 3i+2."""
    return _spread3(a) | (_spread3(b) << np.uint64(1)) | (_spread3(c) << np.uint64(2))


def _deinterleave(code):
    return (
        _compact3(code),
        _compact3(code >> np.uint64(1)),
        _compact3(code >> np.uint64(2)),
    )


def _unwrap_code(out, scalar):
    return int(out[0]) if scalar else out


def _unwrap_coord(out, scalar):
    return tuple(int(v) for v in out[0]) if scalar else out


def morton_encode(c, bits=MAX_BITS):
    coords, scalar = _coords_array(c, bits)
    out = _interleave(coords[:, 0], coords[:, 1], coords[:, 2])
    return _unwrap_code(out, scalar)


def morton_decode(code, bits=MAX_BITS):
    codes, scalar = _codes_array(code, bits)
    x, y, z = _deinterleave(codes)
    out = np.stack([x, y, z], axis=1).astype(np.int64)
    return _unwrap_coord(out, scalar)


def _axes_to_transpose(x, bits):
    # Skilling, "Programming the Hilbert curve" (AIP Conf. Proc. 707, 2004).
    x = [v.copy() for v in x]
    n = 3
    q = 1 << (bits - 1)
    while q > 1:
        p = np.uint64(q - 1)
        uq = np.uint64(q)
        for i in range(n):
            hit = (x[i] & uq) != 0
            t = np.where(hit, np.uint64(0), (x[0] ^ x[i]) & p)
            x[0] = np.where(hit, x[0] ^ p, x[0] ^ t)
            if i:
                x[i] = x[i] ^ t
        q >>= 1
    for i in range(1, n):
        x[i] = x[i] ^ x[i - 1]
    t = np.zeros_like(x[0])
    q = 1 << (bits - 1)
    while q > 1:
        t = np.where((x[n - 1] & np.uint64(q)) != 0, t ^ np.uint64(q - 1), t)
        q >>= 1
    return [v ^ t for v in x]


def _transpose_to_axes(x, bits):
    x = [v.copy() for v in x]
    n = 3
    top = 2 << (bits - 1)
    t = x[n - 1] >> np.uint64(1)
    for i in range(n - 1, 0, -1):
        x[i] = x[i] ^ x[i - 1]
    x[0] = x[0] ^ t
    q = 2
    while q != top:
        p = np.uint64(q - 1)
        uq = np.uint64(q)
        for i in range(n - 1, -1, -1):
            hit = (x[i] & uq) != 0
            t = np.where(hit, np.uint64(0), (x[0] ^ x[i]) & p)
            x[0] = np.where(hit, x[0] ^ p, x[0] ^ t)
            if i:
                x[i] = x[i] ^ t
        q <<= 1
    return x


def hilbert_encode(c, bits=MAX_BITS):
    coords, scalar = _coords_array(c, bits)
    tx, ty, tz = _axes_to_transpose([coords[:, 0], coords[:, 1], coords[:, 2]], bits)
    # transposed form: x holds the most significant bit of every triple
    out = _interleave(tz, ty, tx)
    return _unwrap_code(out, scalar)


def hilbert_decode(code, bits=MAX_BITS):
    codes, scalar = _codes_array(code, bits)
    tz, ty, tx = _deinterleave(codes)
    x, y, z = _transpose_to_axes([tx, ty, tz], bits)
    out = np.stack([x, y, z], axis=1).astype(np.int64)
    return _unwrap_coord(out, scalar)


_ENCODERS = {CurveKind.HILBERT: hilbert_encode, CurveKind.MORTON: morton_encode}
_DECODERS = {CurveKind.HILBERT: hilbert_decode, CurveKind.MORTON: morton_decode}


def encode(c, bits=MAX_BITS, kind=CurveKind.HILBERT):
    return _ENCODERS[CurveKind(kind)](c, bits)


def decode(code, bits=MAX_BITS, kind=CurveKind.HILBERT):
    return _DECODERS[CurveKind(kind)](code, bits)


def quantize(p, params: CurveParams, clamp=False):
    """Floor ``(p - origin) / grid_size`` to integer cell coordinates.

    With ``clamp=True`` out-of-cube cells are pulled onto the boundary instead
    of raising; queries use this so that points outside the indexed box still
    land somewhere on the curve.
    """
    arr = np.asarray(p, dtype=np.float64)
    scalar = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[-1] != 3:
        raise ValueError(f"expected (..., 3) positions, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(arr), axis=1))[0])
        raise OutOfRange(f"non-finite position at index {bad}", index=bad)
    cells = np.floor((arr - np.asarray(params.origin)) / params.grid_size)
    hi = params.side - 1
    if clamp:
        cells = np.clip(cells, 0, hi)
    else:
        bad = np.flatnonzero(np.any((cells < 0) | (cells > hi), axis=1))
        if bad.size:
            raise OutOfRange(
                f"point {bad[0]} at {arr[bad[0]].tolist()} quantizes outside the "
                f"{params.bits}-bit grid",
                index=int(bad[0]),
            )
    cells = cells.astype(np.int64)
    return tuple(int(v) for v in cells[0]) if scalar else cells


def serialize_points(points, params: CurveParams, kind=CurveKind.HILBERT, clamp=False):
    """Curve code of every point; points sharing a cell share a code."""
    cells = quantize(np.asarray(points, dtype=np.float64).reshape(-1, 3), params, clamp=clamp)
    return np.asarray(encode(cells, params.bits, kind), dtype=np.uint64)
