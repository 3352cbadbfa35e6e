"""Noise schedule and forward/reverse diffusion transition mathematics.

Standard DDPM conventions (Ho et al., 2020):

    forward transition   q(x_t | x_{t-1}) = N(sqrt(1 - beta_t) x_{t-1}, beta_t I)
    closed-form marginal q(x_t | x_0)     = N(sqrt(abar_t) x_0, (1 - abar_t) I)
    reverse update       x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) eps_hat)
                                   / sqrt(alpha_t) + sigma_t z

with alpha_t = 1 - beta_t, abar_t = prod_{s<=t} alpha_s, and the abar_0 = 1
convention so that t = 0 is clean data.  The reverse-step noise scale is the
posterior standard deviation sigma_t = sqrt((1 - abar_{t-1}) / (1 - abar_t)
* beta_t), which is exactly zero at t = 1.

Schedule scalars are kept in float64 (the cumulative product underflows
float32 near the end of a 1000-step schedule); slice data is float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "NoiseSchedule",
    "build_linear_schedule",
    "forward_diffuse",
    "transition_step",
    "reverse_step",
    "posterior_std",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable per-step schedule arrays, indexed directly by t.

    All arrays have length ``t_max + 1``; index 0 holds the t = 0 convention
    slot (beta_0 = 0, alpha_0 = 1, abar_0 = 1, posterior_var_0 = 0) so that
    ``alpha_bars[t]`` is abar_t without off-by-one bookkeeping.
    """

    t_max: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_vars: np.ndarray

    def __post_init__(self):
        n = self.t_max + 1
        for name in ("betas", "alphas", "alpha_bars", "posterior_vars"):
            arr = getattr(self, name)
            if arr.shape != (n,):
                raise ValueError(f"{name} must have shape ({n},), got {arr.shape}")
            arr.setflags(write=False)


def build_linear_schedule(
    t_max: int, beta_start: float = 1e-4, beta_end: float = 0.02
) -> NoiseSchedule:
    """Build a schedule with beta_t linear from beta_start (t=1) to beta_end (t=T).

    Raises ValueError unless 0 < beta_start <= beta_end < 1 and t_max >= 1.
    """
    if not isinstance(t_max, (int, np.integer)) or t_max < 1:
        raise ValueError(f"t_max must be a positive integer, got {t_max!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = np.zeros(t_max + 1, dtype=np.float64)
    betas[1:] = np.linspace(beta_start, beta_end, t_max)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    posterior_vars = np.zeros(t_max + 1, dtype=np.float64)
    posterior_vars[1:] = (
        (1.0 - alpha_bars[:-1]) / (1.0 - alpha_bars[1:]) * betas[1:]
    )
    return NoiseSchedule(
        t_max=int(t_max),
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        posterior_vars=posterior_vars,
    )


def _check_step(t: int, lo: int, schedule: NoiseSchedule) -> int:
    if not isinstance(t, (int, np.integer)):
        raise ValueError(f"time step must be an integer, got {t!r}")
    if not (lo <= t <= schedule.t_max):
        raise ValueError(
            f"time step {t} out of range [{lo}, {schedule.t_max}]"
        )
    return int(t)


def _as_f32(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float32)


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def forward_diffuse(x0, t: int, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Jump directly to x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    t = _check_step(t, 0, schedule)
    x0 = _as_f32(x0)
    eps = _as_f32(eps)
    _check_same_shape(x0, eps, "forward_diffuse")
    abar = schedule.alpha_bars[t]
    c0 = np.float32(math.sqrt(abar))
    c1 = np.float32(math.sqrt(1.0 - abar))
    return c0 * x0 + c1 * eps


def transition_step(x_prev, t: int, z, schedule: NoiseSchedule) -> np.ndarray:
    """Single forward transition x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) z."""
    t = _check_step(t, 1, schedule)
    x_prev = _as_f32(x_prev)
    z = _as_f32(z)
    _check_same_shape(x_prev, z, "transition_step")
    beta = schedule.betas[t]
    c0 = np.float32(math.sqrt(1.0 - beta))
    c1 = np.float32(math.sqrt(beta))
    return c0 * x_prev + c1 * z


def reverse_step(x_t, t: int, eps_hat, z, schedule: NoiseSchedule) -> np.ndarray:
    """One reverse update given the predicted noise eps_hat.

    The Gaussian mean is computed internally as
    (x_t - beta_t / sqrt(1 - abar_t) eps_hat) / sqrt(alpha_t) and the
    posterior std scales the extra noise z; sigma_1 = 0, so the final step
    is deterministic.
    """
    t = _check_step(t, 1, schedule)
    x_t = _as_f32(x_t)
    eps_hat = _as_f32(eps_hat)
    z = _as_f32(z)
    _check_same_shape(x_t, eps_hat, "reverse_step")
    _check_same_shape(x_t, z, "reverse_step")
    abar = schedule.alpha_bars[t]
    c_inv = np.float32(1.0 / math.sqrt(schedule.alphas[t]))
    c_eps = np.float32(schedule.betas[t] / math.sqrt(1.0 - abar))
    sigma = np.float32(math.sqrt(schedule.posterior_vars[t]))
    mean = c_inv * (x_t - c_eps * eps_hat)
    return mean + sigma * z


def posterior_std(t: int, schedule: NoiseSchedule) -> float:
    """sigma_t = sqrt((1 - abar_{t-1}) / (1 - abar_t) * beta_t)."""
    t = _check_step(t, 1, schedule)
    return float(math.sqrt(schedule.posterior_vars[t]))
