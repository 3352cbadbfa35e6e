"""Cubic volumes with tri-plane slicing, padding, fusion, and file I/O.

Axis convention (fixed here, since anatomical axes map onto array axes is
otherwise arbitrary): axial slices index the first array dimension, coronal
the second, sagittal the third.  Voxel (i, j, k) therefore lands at position
(j, k) of axial slice i, (i, k) of coronal slice j, and (i, j) of sagittal
slice k.  Condition volumes carry a trailing channel dimension that is never
sliced over.

Volume files use the GPCV container: magic ``GPCV``, one version byte,
four little-endian uint32 dims (N, N, N, Q), then Q*N^3 little-endian
float32 values in C order (last index fastest).
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "PlaneAxis",
    "Volume",
    "PlaneSlice",
    "pad_to_cube",
    "pad_offsets",
    "extract_slice",
    "assemble",
    "fuse",
    "save_volume",
    "load_volume",
]

_GPCV_MAGIC = b"GPCV"
_GPCV_VERSION = 1


class PlaneAxis(enum.Enum):
    AXIAL = 0
    CORONAL = 1
    SAGITTAL = 2

    @property
    def dim(self) -> int:
        """Array dimension this plane's slices index."""
        return self.value

    @property
    def label(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class Volume:
    """Immutable N^3 (or N^3 x Q) float32 grid."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32, copy=True)
        if arr.ndim not in (3, 4):
            raise ValueError(f"volume must be 3D or 4D, got ndim={arr.ndim}")
        n = arr.shape[0]
        if arr.shape[1] != n or arr.shape[2] != n:
            raise ValueError(f"spatial dims must be cubic, got {arr.shape[:3]}")
        if not np.isfinite(arr).all():
            raise ValueError("volume contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def q(self) -> int:
        return 1 if self.data.ndim == 3 else self.data.shape[3]


@dataclass(frozen=True)
class PlaneSlice:
    """One 2D section (plus channels, for conditions) of a volume."""

    data: np.ndarray
    axis: PlaneAxis
    index: int

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32, copy=True)
        if arr.ndim not in (2, 3):
            raise ValueError(f"slice must be 2D or 3D, got ndim={arr.ndim}")
        if self.index < 0:
            raise ValueError(f"slice index must be non-negative, got {self.index}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)


def pad_offsets(shape: Sequence[int], n: int) -> tuple[int, int, int]:
    """Per-dimension start offsets that center `shape` inside an n^3 cube."""
    if len(shape) < 3:
        raise ValueError(f"need 3 spatial dims, got shape {tuple(shape)}")
    offs = []
    for d in shape[:3]:
        if d > n:
            raise ValueError(f"dimension {d} exceeds target side {n}")
        offs.append((n - d) // 2)
    return tuple(offs)


def pad_to_cube(raw, n: int, fill: float = 0.0) -> Volume:
    """Center `raw` (3D, or 4D with channels) in an n^3 cube filled with `fill`.

    Original voxel values are copied unmodified; recorded offsets from
    :func:`pad_offsets` allow a bit-exact crop back.
    """
    arr = np.asarray(raw, dtype=np.float32)
    if arr.ndim not in (3, 4):
        raise ValueError(f"raw data must be 3D or 4D, got ndim={arr.ndim}")
    oi, oj, ok = pad_offsets(arr.shape, n)
    out_shape = (n, n, n) if arr.ndim == 3 else (n, n, n, arr.shape[3])
    out = np.full(out_shape, fill, dtype=np.float32)
    di, dj, dk = arr.shape[:3]
    out[oi : oi + di, oj : oj + dj, ok : ok + dk] = arr
    return Volume(out)


def extract_slice(v: Volume, axis: PlaneAxis, index: int) -> PlaneSlice:
    """Return the 2D section of `v` orthogonal to `axis` at `index`."""
    if not (0 <= index < v.n):
        raise IndexError(f"slice index {index} out of range [0, {v.n})")
    if axis is PlaneAxis.AXIAL:
        data = v.data[index]
    elif axis is PlaneAxis.CORONAL:
        data = v.data[:, index]
    else:
        data = v.data[:, :, index]
    return PlaneSlice(data=data, axis=axis, index=index)


def assemble(slices: Sequence[PlaneSlice], axis: PlaneAxis) -> Volume:
    """Stack N slices (indices 0..N-1, each exactly once) back into a volume."""
    if not slices:
        raise ValueError("no slices to assemble")
    n = slices[0].data.shape[0]
    if len(slices) != n:
        raise ValueError(f"expected {n} slices for side {n}, got {len(slices)}")
    ordered: list[np.ndarray | None] = [None] * n
    for s in slices:
        if s.axis is not axis:
            raise ValueError(f"slice axis {s.axis} does not match {axis}")
        if not (0 <= s.index < n):
            raise ValueError(f"slice index {s.index} out of range [0, {n})")
        if ordered[s.index] is not None:
            raise ValueError(f"duplicate slice index {s.index}")
        ordered[s.index] = s.data
    stacked = np.stack(ordered, axis=axis.dim)
    return Volume(stacked)


def fuse(
    a: Volume,
    c: Volume,
    s: Volume,
    weights: Sequence[float] = (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0),
) -> Volume:
    """Voxelwise weighted sum of three same-shaped volumes.

    Weights must sum to 1 within 1e-9.  Accumulation runs in float64 so the
    equal-weights case fuse(v, v, v) reproduces v bit-exactly after the cast
    back to float32.
    """
    if a.data.shape != c.data.shape or a.data.shape != s.data.shape:
        raise ValueError(
            f"shape mismatch: {a.data.shape}, {c.data.shape}, {s.data.shape}"
        )
    w = [float(x) for x in weights]
    if len(w) != 3:
        raise ValueError(f"need exactly 3 weights, got {len(w)}")
    if abs(sum(w) - 1.0) > 1e-9:
        raise ValueError(f"weights must sum to 1 within 1e-9, got {sum(w)!r}")
    acc = (
        w[0] * a.data.astype(np.float64)
        + w[1] * c.data.astype(np.float64)
        + w[2] * s.data.astype(np.float64)
    )
    return Volume(acc.astype(np.float32))


def save_volume(path, v: Volume) -> None:
    """Write `v` in the GPCV container format."""
    n, q = v.n, v.q
    with open(path, "wb") as f:
        f.write(_GPCV_MAGIC)
        f.write(bytes([_GPCV_VERSION]))
        f.write(struct.pack("<4I", n, n, n, q))
        f.write(np.ascontiguousarray(v.data, dtype="<f4").tobytes())


def load_volume(path) -> Volume:
    """Read a GPCV file; round-trips with :func:`save_volume` bit-exactly."""
    with open(path, "rb") as f:
        blob = f.read()
    head = 4 + 1 + 16
    if len(blob) < head or blob[:4] != _GPCV_MAGIC:
        raise ValueError(f"{path}: not a GPCV volume file")
    if blob[4] != _GPCV_VERSION:
        raise ValueError(f"{path}: unsupported GPCV version {blob[4]}")
    d0, d1, d2, q = struct.unpack("<4I", blob[5:head])
    if not (d0 == d1 == d2) or d0 == 0 or q == 0:
        raise ValueError(f"{path}: bad dims ({d0}, {d1}, {d2}, {q})")
    count = d0 * d1 * d2 * q
    payload = blob[head:]
    if len(payload) != 4 * count:
        raise ValueError(
            f"{path}: expected {4 * count} payload bytes, got {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    shape = (d0, d1, d2) if q == 1 else (d0, d1, d2, q)
    return Volume(arr.reshape(shape))
