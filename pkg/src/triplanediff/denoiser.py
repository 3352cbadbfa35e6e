"""Conditional noise predictors: the interface, an exact Gaussian oracle,
and a small trainable network.

Every predictor estimates the standard-normal noise mixed into x_t, given
the step t and the condition channels y.  Two implementations are provided:

* :class:`AnalyticGaussianDenoiser` — closed form for a per-pixel Gaussian
  target model x0 | y ~ N(m(y), s^2); used to verify samplers exactly.
* :class:`LearnedDenoiser` — wraps the convolutional net from
  :mod:`triplanediff.network`, trained with SGD + momentum on the expected
  squared noise-prediction error (t uniform in [1, T], eps ~ N(0, I)).

Checkpoint container (GPDN): magic ``GPDN``, one version byte, a model
header (uint16 cond_channels, base_filters, time_channels), a layer-shape
table (uint32 layer count; per layer: uint8 name length, ASCII name, uint8
ndim, ndim x uint32 dims), then the float32 little-endian weight values in
declaration order.
"""

from __future__ import annotations

import abc
import math
import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .diffusion_core import NoiseSchedule, forward_diffuse
from .errors import DivergenceError
from .network import (
    DenoiserParams,
    NetworkConfig,
    backward_batch,
    forward_batch,
    init_params,
)
from .volume import PlaneAxis, Volume, extract_slice

__all__ = [
    "Denoiser",
    "GaussianTargetModel",
    "AnalyticGaussianDenoiser",
    "LearnedDenoiser",
    "TrainingConfig",
    "network_forward",
    "training_loss",
    "train",
    "build_slice_dataset",
    "normalize_condition",
    "save_checkpoint",
    "load_checkpoint",
    "NetworkConfig",
    "DenoiserParams",
    "init_params",
]

_GPDN_MAGIC = b"GPDN"
_GPDN_VERSION = 1


def _check_condition(y: np.ndarray, spatial: tuple[int, int]) -> np.ndarray:
    y = np.asarray(y, dtype=np.float32)
    if y.ndim != 3 or y.shape[:2] != spatial:
        raise ValueError(
            f"condition slice must have shape ({spatial[0]}, {spatial[1]}, Q), "
            f"got {y.shape}"
        )
    return y


class Denoiser(abc.ABC):
    """Predicts the noise component of x_t given (x_t, t, y)."""

    @abc.abstractmethod
    def predict_noise(self, x_t: np.ndarray, t: int, y: np.ndarray) -> np.ndarray:
        """Return an estimate of eps with the same shape as x_t."""


@dataclass(frozen=True)
class GaussianTargetModel:
    """Per-pixel Gaussian data model x0 | y ~ N(mean_map(y), s^2).

    `mean_map` maps a condition slice (H, W, Q) to the per-pixel mean (H, W);
    `s` is the shared per-pixel standard deviation (> 0).
    """

    mean_map: Callable[[np.ndarray], np.ndarray]
    s: float

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError(f"target std must be positive, got {self.s}")


class AnalyticGaussianDenoiser(Denoiser):
    """Exact posterior-mean noise predictor for a Gaussian target model.

    With x_t = sqrt(abar) x0 + sqrt(1-abar) eps and x0 | y ~ N(m, s^2),

        E[x0 | x_t, y] = m + (sqrt(abar) s^2 / (abar s^2 + 1 - abar)) (x_t - sqrt(abar) m)
        E[eps | x_t, y] = (x_t - sqrt(abar) E[x0 | x_t, y]) / sqrt(1 - abar)

    which is the minimum-mean-squared-error prediction, verified against a
    numerical-integration oracle in the tests.
    """

    def __init__(self, model: GaussianTargetModel, schedule: NoiseSchedule):
        self.model = model
        self.schedule = schedule

    def predict_noise(self, x_t, t: int, y) -> np.ndarray:
        if not (1 <= t <= self.schedule.t_max):
            raise ValueError(f"time step {t} out of range [1, {self.schedule.t_max}]")
        x_t = np.asarray(x_t, dtype=np.float32)
        y = _check_condition(y, x_t.shape)
        m = np.asarray(self.model.mean_map(y), dtype=np.float32)
        if m.shape != x_t.shape:
            raise ValueError(
                f"mean map returned shape {m.shape}, expected {x_t.shape}"
            )
        abar = float(self.schedule.alpha_bars[t])
        s2 = self.model.s**2
        root = math.sqrt(abar)
        gain = np.float32(root * s2 / (abar * s2 + 1.0 - abar))
        x0_hat = m + gain * (x_t - np.float32(root) * m)
        return (x_t - np.float32(root) * x0_hat) / np.float32(math.sqrt(1.0 - abar))


class LearnedDenoiser(Denoiser):
    """Trained network predictor; parameters are immutable and shareable."""

    def __init__(self, params: DenoiserParams, total_steps: int):
        if total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {total_steps}")
        self.params = params
        self.total_steps = int(total_steps)

    def predict_noise(self, x_t, t: int, y) -> np.ndarray:
        if not (1 <= t <= self.total_steps):
            raise ValueError(f"time step {t} out of range [1, {self.total_steps}]")
        x_t = np.asarray(x_t, dtype=np.float32)
        y = _check_condition(y, x_t.shape)
        out, _ = forward_batch(
            x_t[None].astype(np.float64),
            np.array([t]),
            y[None].astype(np.float64),
            self.params,
            self.total_steps,
        )
        return out[0].astype(np.float32)


def network_forward(x_t, t: int, y, params: DenoiserParams, total_steps: int) -> np.ndarray:
    """Single-slice net evaluation; same contract as LearnedDenoiser.predict_noise."""
    return LearnedDenoiser(params, total_steps).predict_noise(x_t, t, y)


def _loss_batch(
    batch: Sequence[tuple[np.ndarray, np.ndarray]],
    params: DenoiserParams,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    need_grad: bool,
):
    """Sample (t, eps) per item, form x_t, and evaluate the mean of the
    per-item squared-error sums; optionally also the parameter gradient.

    The draw order is fixed (t then eps, item by item) so a loss-only call
    and a loss+grad call with identical generator state see identical
    batches — that is what makes finite-difference checks meaningful.
    """
    if len(batch) == 0:
        raise ValueError("batch must be non-empty")
    xs, ys, eps_all, ts = [], [], [], []
    for x0, y in batch:
        x0 = np.asarray(x0, dtype=np.float32)
        t = int(rng.integers(1, schedule.t_max + 1))
        eps = rng.standard_normal(x0.shape).astype(np.float32)
        x_t = forward_diffuse(x0, t, eps, schedule)
        xs.append(x_t.astype(np.float64))
        ys.append(np.asarray(y, dtype=np.float64))
        eps_all.append(eps.astype(np.float64))
        ts.append(t)
    x_b = np.stack(xs)
    y_b = np.stack(ys)
    e_b = np.stack(eps_all)
    t_b = np.array(ts)
    pred, cache = forward_batch(x_b, t_b, y_b, params, schedule.t_max, need_cache=need_grad)
    resid = pred - e_b
    loss = float(np.mean(np.sum(resid**2, axis=(1, 2))))
    if not need_grad:
        return loss, None
    gout = (2.0 / len(batch)) * resid
    return loss, backward_batch(gout, cache, params)


def training_loss(
    batch: Sequence[tuple[np.ndarray, np.ndarray]],
    params: DenoiserParams,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> float:
    """Monte-Carlo estimate of the expected squared noise-prediction error.

    For each (x0, y) item: t ~ Uniform{1..T}, eps ~ N(0, I), x_t from the
    closed-form forward jump; the item loss is the squared L2 norm of
    (prediction - eps) over the slice, and the batch loss is the item mean.
    """
    loss, _ = _loss_batch(batch, params, schedule, rng, need_grad=False)
    return loss


def loss_and_grad(batch, params, schedule, rng):
    """training_loss plus its analytic gradient w.r.t. the flat parameters."""
    return _loss_batch(batch, params, schedule, rng, need_grad=True)


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int
    batch_size: int
    learning_rate: float
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")


def train(
    dataset: Sequence[tuple[np.ndarray, np.ndarray]],
    params0: DenoiserParams,
    config: TrainingConfig,
    schedule: NoiseSchedule,
) -> tuple[DenoiserParams, list[float]]:
    """SGD with momentum over shuffled slice pairs; deterministic per seed.

    Returns the final parameters and the per-epoch mean batch loss.  Raises
    DivergenceError as soon as any batch loss is non-finite.
    """
    if len(dataset) == 0:
        raise ValueError("dataset must be non-empty")
    rng = np.random.default_rng(config.seed)
    theta = params0.vector.copy()
    velocity = np.zeros_like(theta)
    losses: list[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [dataset[i] for i in order[start : start + config.batch_size]]
            params = DenoiserParams(config=params0.config, vector=theta)
            # a diverging step overflows float64 before the loss check
            # catches it; the guard below is the contract, not the warning
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grad = loss_and_grad(batch, params, schedule, rng)
            if not math.isfinite(loss):
                raise DivergenceError(
                    f"non-finite training loss at epoch {epoch}, "
                    f"batch offset {start}"
                )
            velocity = config.momentum * velocity - config.learning_rate * grad
            theta = theta + velocity
            epoch_losses.append(loss)
        losses.append(float(np.mean(epoch_losses)))
    return DenoiserParams(config=params0.config, vector=theta), losses


def build_slice_dataset(
    pairs: Sequence[tuple[Volume, Volume]],
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Explode (target, condition) volume pairs into per-slice training items.

    Every axial, coronal, and sagittal slice of every volume contributes one
    (x0, y) item, so each shuffled epoch mixes all three orientations.
    """
    items: list[tuple[np.ndarray, np.ndarray]] = []
    for target, cond in pairs:
        if target.n != cond.n:
            raise ValueError(
                f"target side {target.n} does not match condition side {cond.n}"
            )
        for axis in PlaneAxis:
            for idx in range(target.n):
                x0 = extract_slice(target, axis, idx).data
                y = extract_slice(cond, axis, idx).data
                if y.ndim == 2:
                    y = y[:, :, None]
                items.append((x0, y))
    return items


def normalize_condition(v: Volume) -> Volume:
    """Scale each condition channel to [0, 1] over the whole volume.

    Constant channels map to all-zeros.  Applied to every condition volume
    before training and inference with the learned model.
    """
    data = v.data if v.data.ndim == 4 else v.data[..., None]
    out = np.empty_like(data)
    for ch in range(data.shape[3]):
        lo = float(data[..., ch].min())
        hi = float(data[..., ch].max())
        if hi > lo:
            out[..., ch] = (data[..., ch] - lo) / np.float32(hi - lo)
        else:
            out[..., ch] = 0.0
    if v.data.ndim == 3:
        out = out[..., 0]
    return Volume(out)


def save_checkpoint(path, params: DenoiserParams) -> None:
    """Write parameters in the GPDN container format."""
    cfg = params.config
    with open(path, "wb") as f:
        f.write(_GPDN_MAGIC)
        f.write(bytes([_GPDN_VERSION]))
        f.write(
            struct.pack(
                "<3H", cfg.cond_channels, cfg.base_filters, cfg.time_channels
            )
        )
        f.write(struct.pack("<I", len(cfg.layer_shapes)))
        for name, shape in cfg.layer_shapes:
            encoded = name.encode("ascii")
            f.write(struct.pack("<B", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", len(shape)))
            f.write(struct.pack(f"<{len(shape)}I", *shape))
        f.write(params.vector.astype("<f4").tobytes())


def load_checkpoint(path) -> DenoiserParams:
    """Read a GPDN checkpoint; weights come back as float32-exact values."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 15 or blob[:4] != _GPDN_MAGIC:
        raise ValueError(f"{path}: not a GPDN checkpoint")
    if blob[4] != _GPDN_VERSION:
        raise ValueError(f"{path}: unsupported GPDN version {blob[4]}")
    q, filters, time_ch = struct.unpack("<3H", blob[5:11])
    cfg = NetworkConfig(cond_channels=q, base_filters=filters, time_channels=time_ch)
    (layer_count,) = struct.unpack("<I", blob[11:15])
    pos = 15
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for _ in range(layer_count):
        name_len = blob[pos]
        pos += 1
        name = blob[pos : pos + name_len].decode("ascii")
        pos += name_len
        ndim = blob[pos]
        pos += 1
        dims = struct.unpack(f"<{ndim}I", blob[pos : pos + 4 * ndim])
        pos += 4 * ndim
        shapes.append((name, dims))
    if tuple(shapes) != cfg.layer_shapes:
        raise ValueError(f"{path}: layer table does not match model header")
    payload = blob[pos:]
    if len(payload) != 4 * cfg.param_count:
        raise ValueError(
            f"{path}: expected {4 * cfg.param_count} weight bytes, got {len(payload)}"
        )
    vector = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return DenoiserParams(config=cfg, vector=vector)
