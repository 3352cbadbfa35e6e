"""Two-stage volumetric synthesis: axial slice-by-slice sampling, then a
short re-noise/denoise refinement of the coronal and sagittal planes, fused
by voxelwise averaging.

Stage one starts every axial slice from standard-normal noise and runs the
full reverse chain conditioned on the matching condition slice.  Stage two
takes the assembled volume, pushes each coronal (then sagittal) slice k
steps forward with the closed-form jump, and denoises those k steps back;
the re-noised volumes repair the stripe artifacts that slice-independent 2D
generation leaves in the orthogonal planes.  The final volume is the
weighted average of the unrefined axial result and the two refined planes.

Reproducibility contract: the noise stream for a slice is derived from
(seed, phase, axis, slice index) via ``numpy.random.SeedSequence`` spawn
keys, so fanning slices out to worker threads produces bit-identical
results to serial execution, for any worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .denoiser import Denoiser
from .diffusion_core import NoiseSchedule, forward_diffuse, reverse_step
from .errors import NonFiniteSampleError
from .volume import PlaneAxis, PlaneSlice, Volume, assemble, extract_slice, fuse

__all__ = [
    "PipelineConfig",
    "SynthesisResult",
    "initial_synthesis",
    "refine_plane",
    "synthesize_volume",
]

_PHASE_INITIAL = 0
_PHASE_REFINE = 1


@dataclass(frozen=True)
class PipelineConfig:
    """Knobs for the full synthesis run."""

    n: int
    steps: int = 1000
    refine_steps: int = 10
    cond_channels: int = 10
    fusion_weights: tuple[float, float, float] = (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"volume side must be >= 1, got {self.n}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not (1 <= self.refine_steps <= self.steps):
            raise ValueError(
                f"refine_steps must be in [1, {self.steps}], got {self.refine_steps}"
            )
        if self.cond_channels < 1:
            raise ValueError(f"cond_channels must be >= 1, got {self.cond_channels}")
        if len(self.fusion_weights) != 3:
            raise ValueError("fusion_weights must have exactly 3 entries")


@dataclass(frozen=True)
class SynthesisResult:
    """All four volumes produced by a run; `final` is the fused output."""

    initial: Volume
    refined_coronal: Volume
    refined_sagittal: Volume
    final: Volume

    def __post_init__(self):
        dims = {v.data.shape for v in (self.initial, self.refined_coronal,
                                       self.refined_sagittal, self.final)}
        if len(dims) != 1:
            raise ValueError(f"result volumes disagree on shape: {dims}")


def _slice_rng(seed: int, phase: int, axis: PlaneAxis, index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(seed, spawn_key=(phase, axis.value, index))
    return np.random.default_rng(ss)


def _denoise_chain(
    x: np.ndarray,
    t_start: int,
    y_slice: np.ndarray,
    model: Denoiser,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    axis: PlaneAxis,
    index: int,
) -> np.ndarray:
    """Run reverse steps from t_start down to 1; aborts on non-finite output."""
    for t in range(t_start, 0, -1):
        eps_hat = model.predict_noise(x, t, y_slice)
        z = rng.standard_normal(x.shape, dtype=np.float32)
        x = reverse_step(x, t, eps_hat, z, schedule)
        if not np.isfinite(x).all():
            raise NonFiniteSampleError(
                f"non-finite sample at axis={axis.label}, index={index}, t={t}"
            )
    return x


def _condition_slice(y: Volume, axis: PlaneAxis, index: int) -> np.ndarray:
    data = extract_slice(y, axis, index).data
    return data if data.ndim == 3 else data[:, :, None]


def _run_slices(worker, n: int, workers: int) -> list[np.ndarray]:
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(worker, range(n)))
    return [worker(i) for i in range(n)]


def initial_synthesis(
    y: Volume,
    model: Denoiser,
    schedule: NoiseSchedule,
    seed: int,
    workers: int = 1,
) -> Volume:
    """Sample every axial slice from pure noise through the full reverse chain."""
    n = y.n

    def worker(i: int) -> np.ndarray:
        rng = _slice_rng(seed, _PHASE_INITIAL, PlaneAxis.AXIAL, i)
        x = rng.standard_normal((n, n), dtype=np.float32)
        y_i = _condition_slice(y, PlaneAxis.AXIAL, i)
        return _denoise_chain(
            x, schedule.t_max, y_i, model, schedule, rng, PlaneAxis.AXIAL, i
        )

    results = _run_slices(worker, n, workers)
    slices = [
        PlaneSlice(data=arr, axis=PlaneAxis.AXIAL, index=i)
        for i, arr in enumerate(results)
    ]
    return assemble(slices, PlaneAxis.AXIAL)


def refine_plane(
    x_init: Volume,
    y: Volume,
    axis: PlaneAxis,
    k: int,
    model: Denoiser,
    schedule: NoiseSchedule,
    seed: int,
    workers: int = 1,
) -> Volume:
    """Re-noise each slice along `axis` by k forward steps, then denoise back.

    The forward re-noising uses the closed-form jump to t = k (one draw),
    which has the same marginal as k sequential transitions.
    """
    if not (1 <= k <= schedule.t_max):
        raise ValueError(f"refinement steps {k} out of range [1, {schedule.t_max}]")
    if x_init.n != y.n:
        raise ValueError(
            f"initial volume side {x_init.n} does not match condition side {y.n}"
        )
    n = x_init.n

    def worker(i: int) -> np.ndarray:
        rng = _slice_rng(seed, _PHASE_REFINE, axis, i)
        x0 = extract_slice(x_init, axis, i).data
        eps = rng.standard_normal((n, n), dtype=np.float32)
        x_k = forward_diffuse(x0, k, eps, schedule)
        y_i = _condition_slice(y, axis, i)
        return _denoise_chain(x_k, k, y_i, model, schedule, rng, axis, i)

    results = _run_slices(worker, n, workers)
    slices = [PlaneSlice(data=arr, axis=axis, index=i) for i, arr in enumerate(results)]
    return assemble(slices, axis)


def synthesize_volume(
    y: Volume,
    model: Denoiser,
    schedule: NoiseSchedule,
    config: PipelineConfig,
    workers: int = 1,
) -> SynthesisResult:
    """Full two-stage run: axial synthesis, coronal + sagittal refinement, fusion.

    The axial constituent enters the fusion unrefined; all three stages call
    the same model instance.
    """
    if y.n != config.n:
        raise ValueError(f"condition side {y.n} does not match config n={config.n}")
    if y.q != config.cond_channels:
        raise ValueError(
            f"condition channels {y.q} do not match config "
            f"cond_channels={config.cond_channels}"
        )
    if schedule.t_max != config.steps:
        raise ValueError(
            f"schedule length {schedule.t_max} does not match config steps={config.steps}"
        )
    initial = initial_synthesis(y, model, schedule, config.seed, workers=workers)
    refined_c = refine_plane(
        initial, y, PlaneAxis.CORONAL, config.refine_steps, model, schedule,
        config.seed, workers=workers,
    )
    refined_s = refine_plane(
        initial, y, PlaneAxis.SAGITTAL, config.refine_steps, model, schedule,
        config.seed, workers=workers,
    )
    final = fuse(initial, refined_c, refined_s, config.fusion_weights)
    return SynthesisResult(
        initial=initial,
        refined_coronal=refined_c,
        refined_sagittal=refined_s,
        final=final,
    )
