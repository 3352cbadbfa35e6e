"""Masked image-quality metrics over volumes: PSNR, slicewise SSIM, and a
quantile threshold mask standing in for brain extraction.

Conventions baked in here (and mirrored by the brute-force oracles in the
test suite): SSIM uses a 7x7 uniform window with reflect boundary handling
and plain windowed moments; stabilization constants are C1 = (0.01 range)^2
and C2 = (0.03 range)^2.  When no data range is given, the masked min/max
of the reference volume is used.  Identical inputs give a PSNR of +inf,
reported as-is (a documented sentinel, never capped).
"""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import uniform_filter

from .volume import PlaneAxis, Volume

__all__ = ["psnr", "ssim", "threshold_mask", "plane_metrics", "format_report_lines"]


def _data3d(v: Volume, what: str) -> np.ndarray:
    if v.data.ndim != 3:
        raise ValueError(f"{what} must be a single-channel volume, got Q={v.q}")
    return v.data


def _check_pair(reference: Volume, test: Volume, mask) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ref = _data3d(reference, "reference")
    tst = _data3d(test, "test")
    if ref.shape != tst.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {tst.shape}")
    if mask is None:
        mask = np.ones(ref.shape, dtype=bool)
    mask = np.asarray(mask)
    if mask.dtype != bool or mask.shape != ref.shape:
        raise ValueError(
            f"mask must be boolean with shape {ref.shape}, got "
            f"{mask.dtype} {mask.shape}"
        )
    if not mask.any():
        raise ValueError("mask selects no voxels")
    return ref, tst, mask


def _resolve_range(ref: np.ndarray, mask: np.ndarray, data_range) -> float:
    if data_range is None:
        vals = ref[mask]
        data_range = float(vals.max() - vals.min())
    data_range = float(data_range)
    if not data_range > 0:
        raise ValueError(f"data_range must be positive, got {data_range}")
    return data_range


def psnr(reference: Volume, test: Volume, mask=None, data_range=None) -> float:
    """10 log10(range^2 / MSE) with the MSE taken over masked voxels only."""
    ref, tst, mask = _check_pair(reference, test, mask)
    data_range = _resolve_range(ref, mask, data_range)
    diff = ref[mask].astype(np.float64) - tst[mask].astype(np.float64)
    mse = float(np.mean(diff**2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def _ssim_map(ref: np.ndarray, tst: np.ndarray, axis: PlaneAxis,
              data_range: float, win_size: int) -> np.ndarray:
    """Per-voxel SSIM with the window lying in the slices of `axis`."""
    if win_size < 1 or win_size % 2 == 0:
        raise ValueError(f"window size must be odd and >= 1, got {win_size}")
    if win_size > ref.shape[0]:
        raise ValueError(
            f"window size {win_size} exceeds slice side {ref.shape[0]}"
        )
    size = [win_size, win_size, win_size]
    size[axis.dim] = 1
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    x = ref.astype(np.float64)
    y = tst.astype(np.float64)

    def win(a):
        return uniform_filter(a, size=size, mode="reflect")

    ux = win(x)
    uy = win(y)
    vx = win(x * x) - ux * ux
    vy = win(y * y) - uy * uy
    vxy = win(x * y) - ux * uy
    return ((2 * ux * uy + c1) * (2 * vxy + c2)) / (
        (ux * ux + uy * uy + c1) * (vx + vy + c2)
    )


def ssim(reference: Volume, test: Volume, mask=None, data_range=None,
         win_size: int = 7) -> float:
    """Mean local SSIM over masked voxels, windows taken in axial slices."""
    ref, tst, mask = _check_pair(reference, test, mask)
    data_range = _resolve_range(ref, mask, data_range)
    smap = _ssim_map(ref, tst, PlaneAxis.AXIAL, data_range, win_size)
    return float(smap[mask].mean())


def threshold_mask(v: Volume, quantile: float) -> np.ndarray:
    """Boolean mask of voxels whose mean-channel intensity is at or above the
    given quantile of the volume's intensities.

    The at-or-above rule means quantile -> 0 gives an all-true mask, and a
    constant volume (degenerate case) is also all-true.
    """
    if not (0.0 < quantile < 1.0):
        raise ValueError(f"quantile must be in (0, 1), got {quantile}")
    intensity = v.data if v.data.ndim == 3 else v.data.mean(axis=3)
    return intensity >= np.quantile(intensity, quantile)


def plane_metrics(reference: Volume, test: Volume, mask=None, data_range=None,
                  win_size: int = 7) -> dict[str, dict[str, float]]:
    """Per-plane PSNR/SSIM: metrics on each slice of a plane, then averaged.

    Slices whose mask section is empty are skipped; the data range is fixed
    once per volume pair from the masked reference.  Returns
    {plane: {"psnr": ..., "ssim": ...}} for the three planes.
    """
    ref, tst, mask = _check_pair(reference, test, mask)
    data_range = _resolve_range(ref, mask, data_range)
    report: dict[str, dict[str, float]] = {}
    for axis in PlaneAxis:
        smap = _ssim_map(ref, tst, axis, data_range, win_size)
        psnrs, ssims = [], []
        for idx in range(ref.shape[axis.dim]):
            sel = [slice(None)] * 3
            sel[axis.dim] = idx
            sel = tuple(sel)
            m = mask[sel]
            if not m.any():
                continue
            diff = ref[sel][m].astype(np.float64) - tst[sel][m].astype(np.float64)
            mse = float(np.mean(diff**2))
            psnrs.append(
                math.inf if mse == 0.0 else 10.0 * math.log10(data_range**2 / mse)
            )
            ssims.append(float(smap[sel][m].mean()))
        report[axis.label] = {
            "psnr": float(np.mean(psnrs)),
            "ssim": float(np.mean(ssims)),
        }
    return report


def format_report_lines(task: str, metrics_by_plane: dict[str, dict[str, float]]) -> list[str]:
    """Line-delimited records: task, plane, metric, value (tab-separated)."""
    lines = []
    for plane in ("axial", "coronal", "sagittal"):
        for metric in ("psnr", "ssim"):
            value = metrics_by_plane[plane][metric]
            lines.append(f"{task}\t{plane}\t{metric}\t{value!r}")
    return lines
