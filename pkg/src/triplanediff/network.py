"""Small convolutional encoder-decoder with hand-written backpropagation.

The net predicts per-pixel noise from the concatenation of the noisy slice,
the condition channels, and broadcast sinusoidal features of t / T.  Three
resolution levels (full, 1/2, 1/4) with skip connections:

    enc1a -> enc1b -> pool -> enc2 -> pool -> mid
    mid -up-> [.,enc2] -> dec2 -up-> [.,enc1b] -> dec1 -> out

All convolutions are 3x3, stride 1, zero padding; activations are SiLU
(smooth, so central finite differences converge cleanly); down/up sampling
is 2x2 average pooling / nearest-neighbour.  Spatial dims must be divisible
by 4.  Parameters live in one flat float64 vector; layer order is fixed and
is also the serialization order of checkpoints.

Forward/backward run in float64: gradient checks against central
differences with step 1e-3 would drown in float32 rounding.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import expit

__all__ = ["NetworkConfig", "DenoiserParams", "init_params", "forward_batch", "backward_batch"]


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture hyperparameters; fixes layer shapes and parameter layout."""

    cond_channels: int
    base_filters: int = 16
    time_channels: int = 8

    def __post_init__(self):
        if self.cond_channels < 1:
            raise ValueError(f"cond_channels must be >= 1, got {self.cond_channels}")
        if self.base_filters < 1:
            raise ValueError(f"base_filters must be >= 1, got {self.base_filters}")
        if self.time_channels < 2 or self.time_channels % 2:
            raise ValueError(
                f"time_channels must be even and >= 2, got {self.time_channels}"
            )

    @property
    def in_channels(self) -> int:
        return 1 + self.cond_channels + self.time_channels

    @cached_property
    def layer_shapes(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        c, f = self.in_channels, self.base_filters
        convs = [
            ("enc1a", c, f),
            ("enc1b", f, f),
            ("enc2", f, 2 * f),
            ("mid", 2 * f, 2 * f),
            ("dec2", 4 * f, f),
            ("dec1", 2 * f, f),
            ("out", f, 1),
        ]
        shapes: list[tuple[str, tuple[int, ...]]] = []
        for name, c_in, c_out in convs:
            shapes.append((f"{name}.w", (c_out, c_in, 3, 3)))
            shapes.append((f"{name}.b", (c_out,)))
        return tuple(shapes)

    @cached_property
    def param_count(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.layer_shapes)

    @cached_property
    def param_layout(self) -> dict[str, tuple[slice, tuple[int, ...]]]:
        layout = {}
        offset = 0
        for name, shape in self.layer_shapes:
            size = int(np.prod(shape))
            layout[name] = (slice(offset, offset + size), shape)
            offset += size
        return layout


@dataclass(frozen=True)
class DenoiserParams:
    """Flat parameter vector plus the layout metadata needed to interpret it."""

    config: NetworkConfig
    vector: np.ndarray

    def __post_init__(self):
        vec = np.array(self.vector, dtype=np.float64, copy=True)
        if vec.ndim != 1 or vec.size != self.config.param_count:
            raise ValueError(
                f"parameter vector must be flat with {self.config.param_count} "
                f"entries, got shape {vec.shape}"
            )
        if not np.isfinite(vec).all():
            raise ValueError("parameter vector contains non-finite values")
        vec.setflags(write=False)
        object.__setattr__(self, "vector", vec)

    def view(self, name: str) -> np.ndarray:
        sl, shape = self.config.param_layout[name]
        return self.vector[sl].reshape(shape)


def init_params(config: NetworkConfig, seed: int) -> DenoiserParams:
    """Small uniform weights, U(-1/sqrt(fan_in), +1/sqrt(fan_in)); zero biases."""
    rng = np.random.default_rng(seed)
    parts = []
    for name, shape in config.layer_shapes:
        if name.endswith(".b"):
            parts.append(np.zeros(shape, dtype=np.float64).ravel())
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            bound = 1.0 / np.sqrt(fan_in)
            parts.append(rng.uniform(-bound, bound, size=shape).ravel())
    return DenoiserParams(config=config, vector=np.concatenate(parts))


def time_features(t: np.ndarray, total_steps: int, channels: int) -> np.ndarray:
    """Sinusoidal features of t / T at geometric frequencies, shape (B, channels)."""
    u = np.asarray(t, dtype=np.float64) / float(total_steps)
    feats = np.empty((u.shape[0], channels), dtype=np.float64)
    for k in range(channels // 2):
        w = np.pi * (2.0**k)
        feats[:, 2 * k] = np.sin(w * u)
        feats[:, 2 * k + 1] = np.cos(w * u)
    return feats


def _assemble_input(x_t, t, y, config: NetworkConfig, total_steps: int) -> np.ndarray:
    b, h, w = x_t.shape
    q = config.cond_channels
    inp = np.empty((b, config.in_channels, h, w), dtype=np.float64)
    inp[:, 0] = x_t
    inp[:, 1 : 1 + q] = np.moveaxis(y, 3, 1)
    feats = time_features(t, total_steps, config.time_channels)
    inp[:, 1 + q :] = feats[:, :, None, None]
    return inp


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (C*9, B*H*W) patch matrix for 3x3 same-padded conv."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((c, 9, b, h, w), dtype=x.dtype)
    p = 0
    for di in range(3):
        for dj in range(3):
            cols[:, p] = np.moveaxis(xp[:, :, di : di + h, dj : dj + w], 1, 0)
            p += 1
    return cols.reshape(c * 9, b * h * w)


def _conv_forward(x, wmat, bias):
    b, _, h, w = x.shape
    cols = _im2col(x)
    o = wmat.shape[0]
    out = wmat.reshape(o, -1) @ cols + bias[:, None]
    return np.moveaxis(out.reshape(o, b, h, w), 0, 1), cols


def _conv_backward(gout, cols, wmat, x_shape):
    b, c, h, w = x_shape
    o = wmat.shape[0]
    g2 = np.moveaxis(gout, 1, 0).reshape(o, b * h * w)
    db = g2.sum(axis=1)
    dw = (g2 @ cols.T).reshape(wmat.shape)
    dcols = (wmat.reshape(o, -1).T @ g2).reshape(c, 9, b, h, w)
    dxp = np.zeros((b, c, h + 2, w + 2), dtype=gout.dtype)
    p = 0
    for di in range(3):
        for dj in range(3):
            dxp[:, :, di : di + h, dj : dj + w] += np.moveaxis(dcols[:, p], 0, 1)
            p += 1
    return dxp[:, :, 1 : 1 + h, 1 : 1 + w], dw, db


def _silu(a):
    s = expit(a)
    return a * s, s


def _silu_backward(g, a, s):
    return g * (s * (1.0 + a * (1.0 - s)))


def _avgpool2(x):
    b, c, h, w = x.shape
    return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _avgpool2_backward(g):
    return np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25


def _upsample2(x):
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def _upsample2_backward(g):
    b, c, h2, w2 = g.shape
    return g.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))


def forward_batch(
    x_t: np.ndarray,
    t: np.ndarray,
    y: np.ndarray,
    params: DenoiserParams,
    total_steps: int,
    need_cache: bool = False,
):
    """Run the net on a batch; returns (output (B, H, W), cache-or-None)."""
    cfg = params.config
    b, h, w = x_t.shape
    if h % 4 or w % 4:
        raise ValueError(f"spatial dims must be divisible by 4, got ({h}, {w})")
    if y.shape != (b, h, w, cfg.cond_channels):
        raise ValueError(
            f"condition shape {y.shape} incompatible with "
            f"({b}, {h}, {w}, {cfg.cond_channels})"
        )
    pv = params.view
    inp = _assemble_input(
        np.asarray(x_t, dtype=np.float64), t, np.asarray(y, dtype=np.float64),
        cfg, total_steps,
    )

    a1, cols1 = _conv_forward(inp, pv("enc1a.w"), pv("enc1a.b"))
    h1, s1 = _silu(a1)
    a2, cols2 = _conv_forward(h1, pv("enc1b.w"), pv("enc1b.b"))
    h2, s2 = _silu(a2)
    p1 = _avgpool2(h2)
    a3, cols3 = _conv_forward(p1, pv("enc2.w"), pv("enc2.b"))
    h3, s3 = _silu(a3)
    p2 = _avgpool2(h3)
    a4, cols4 = _conv_forward(p2, pv("mid.w"), pv("mid.b"))
    h4, s4 = _silu(a4)
    u2 = _upsample2(h4)
    c2 = np.concatenate([u2, h3], axis=1)
    a5, cols5 = _conv_forward(c2, pv("dec2.w"), pv("dec2.b"))
    h5, s5 = _silu(a5)
    u1 = _upsample2(h5)
    c1 = np.concatenate([u1, h2], axis=1)
    a6, cols6 = _conv_forward(c1, pv("dec1.w"), pv("dec1.b"))
    h6, s6 = _silu(a6)
    out, cols7 = _conv_forward(h6, pv("out.w"), pv("out.b"))

    cache = None
    if need_cache:
        cache = {
            "shapes": (inp.shape, h1.shape, p1.shape, p2.shape, c2.shape, c1.shape, h6.shape),
            "cols": (cols1, cols2, cols3, cols4, cols5, cols6, cols7),
            "pre": (a1, a2, a3, a4, a5, a6),
            "sig": (s1, s2, s3, s4, s5, s6),
        }
    return out[:, 0], cache


def backward_batch(gout: np.ndarray, cache: dict, params: DenoiserParams) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. the flat parameter vector.

    `gout` is dLoss/dOutput with shape (B, H, W); the input-gradient path is
    followed only as far as needed for parameter gradients.
    """
    cfg = params.config
    pv = params.view
    inp_shape, h1_shape, p1_shape, p2_shape, c2_shape, c1_shape, h6_shape = cache["shapes"]
    cols1, cols2, cols3, cols4, cols5, cols6, cols7 = cache["cols"]
    a1, a2, a3, a4, a5, a6 = cache["pre"]
    s1, s2, s3, s4, s5, s6 = cache["sig"]
    f = cfg.base_filters

    grads: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    g = gout[:, None]
    dh6, dw, db = _conv_backward(g, cols7, pv("out.w"), h6_shape)
    grads["out"] = (dw, db)

    da6 = _silu_backward(dh6, a6, s6)
    dc1, dw, db = _conv_backward(da6, cols6, pv("dec1.w"), c1_shape)
    grads["dec1"] = (dw, db)
    du1, dh2_skip = dc1[:, :f], dc1[:, f:]
    dh5 = _upsample2_backward(du1)

    da5 = _silu_backward(dh5, a5, s5)
    dc2, dw, db = _conv_backward(da5, cols5, pv("dec2.w"), c2_shape)
    grads["dec2"] = (dw, db)
    du2, dh3_skip = dc2[:, : 2 * f], dc2[:, 2 * f :]
    dh4 = _upsample2_backward(du2)

    da4 = _silu_backward(dh4, a4, s4)
    dp2, dw, db = _conv_backward(da4, cols4, pv("mid.w"), p2_shape)
    grads["mid"] = (dw, db)
    dh3 = _avgpool2_backward(dp2) + dh3_skip

    da3 = _silu_backward(dh3, a3, s3)
    dp1, dw, db = _conv_backward(da3, cols3, pv("enc2.w"), p1_shape)
    grads["enc2"] = (dw, db)
    dh2 = _avgpool2_backward(dp1) + dh2_skip

    da2 = _silu_backward(dh2, a2, s2)
    dh1, dw, db = _conv_backward(da2, cols2, pv("enc1b.w"), h1_shape)
    grads["enc1b"] = (dw, db)

    da1 = _silu_backward(dh1, a1, s1)
    _, dw, db = _conv_backward(da1, cols1, pv("enc1a.w"), inp_shape)
    grads["enc1a"] = (dw, db)

    flat = np.empty(cfg.param_count, dtype=np.float64)
    layout = cfg.param_layout
    for layer in ("enc1a", "enc1b", "enc2", "mid", "dec2", "dec1", "out"):
        dw, db = grads[layer]
        flat[layout[f"{layer}.w"][0]] = dw.ravel()
        flat[layout[f"{layer}.b"][0]] = db
    return flat
