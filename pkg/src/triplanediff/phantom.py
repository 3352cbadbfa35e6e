"""Synthetic paired volumes: a multi-echo decay condition stack and a
deterministic target contrast, desk-scale stand-ins for clinical data.

A tissue field is a set of random ellipsoids over an empty background, each
carrying a proton density in [0, 1] and a decay time constant t2* in
[5, 200] ms.  Echo channel q holds

    signal_q = proton_density * exp(-TE_q / t2*)  (+ optional Gaussian noise)

for echo times TE_q = TE1 + (q-1) * spacing.  The target contrast is the
fixed smooth map

    target = proton_density * (1 - exp(-TE_c / t2*)),   TE_c = 40 ms

which saturates in 1/t2* and is exactly recoverable from the noiseless
decay (a log-linear fit returns proton density and t2*), so the translation
task the pair defines is well-posed.  All generators are deterministic per
seed / generator state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .volume import PlaneAxis, Volume

__all__ = [
    "EchoTrain",
    "TissueField",
    "make_tissue_field",
    "render_condition",
    "render_target",
    "generate_pair",
    "fit_echo_decay",
    "EchoDecayMeanMap",
    "split_dataset",
    "inject_slice_artifacts",
    "PairEntry",
    "write_manifest",
    "read_manifest",
]

T2STAR_MIN_MS = 5.0
T2STAR_MAX_MS = 200.0
CONTRAST_TE_MS = 40.0


@dataclass(frozen=True)
class EchoTrain:
    """Echo times TE_q = te1_ms + (q-1) * spacing_ms, q = 1..n_echoes."""

    te1_ms: float = 4.0
    spacing_ms: float = 4.0
    n_echoes: int = 10

    def __post_init__(self):
        if self.n_echoes < 1:
            raise ValueError(f"need at least one echo, got {self.n_echoes}")
        if self.te1_ms <= 0 or self.spacing_ms <= 0:
            raise ValueError("echo times must be positive and strictly increasing")

    @property
    def times_ms(self) -> np.ndarray:
        return self.te1_ms + self.spacing_ms * np.arange(self.n_echoes)


@dataclass(frozen=True)
class TissueField:
    """Per-voxel tissue parameters; background has zero proton density."""

    proton_density: np.ndarray
    t2star_ms: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        pd = np.asarray(self.proton_density, dtype=np.float32)
        t2 = np.asarray(self.t2star_ms, dtype=np.float32)
        labels = np.asarray(self.labels)
        if not (pd.shape == t2.shape == labels.shape):
            raise ValueError("tissue field arrays must share one shape")
        if pd.min() < 0 or pd.max() > 1:
            raise ValueError("proton density must lie in [0, 1]")
        if t2.min() < T2STAR_MIN_MS or t2.max() > T2STAR_MAX_MS:
            raise ValueError(
                f"t2* must lie in [{T2STAR_MIN_MS}, {T2STAR_MAX_MS}] ms"
            )
        object.__setattr__(self, "proton_density", pd)
        object.__setattr__(self, "t2star_ms", t2)
        object.__setattr__(self, "labels", labels)

    @property
    def foreground_fraction(self) -> float:
        return float(np.mean(self.labels > 0))


def _ellipsoid_mask(n: int, center, semi_axes) -> np.ndarray:
    grid = np.indices((n, n, n), dtype=np.float64)
    acc = np.zeros((n, n, n), dtype=np.float64)
    for d in range(3):
        acc += ((grid[d] - center[d]) / semi_axes[d]) ** 2
    return acc <= 1.0


def make_tissue_field(n: int, rng: np.random.Generator,
                      n_structures: int = 4) -> TissueField:
    """Random head-like ellipsoid with `n_structures` internal structures."""
    if n < 8:
        raise ValueError(f"volume side must be >= 8 for ellipsoid placement, got {n}")
    pd = np.zeros((n, n, n), dtype=np.float32)
    t2 = np.full((n, n, n), 50.0, dtype=np.float32)  # inert where pd = 0
    labels = np.zeros((n, n, n), dtype=np.int16)

    center = rng.uniform(0.47 * n, 0.53 * n, size=3)
    semi = rng.uniform(0.30 * n, 0.40 * n, size=3)
    head = _ellipsoid_mask(n, center, semi)
    pd[head] = rng.uniform(0.55, 0.8)
    t2[head] = rng.uniform(40.0, 80.0)
    labels[head] = 1

    for idx in range(n_structures):
        c = rng.uniform(0.3 * n, 0.7 * n, size=3)
        s = rng.uniform(0.08 * n, 0.2 * n, size=3)
        inner = _ellipsoid_mask(n, c, s) & head
        pd[inner] = rng.uniform(0.3, 1.0)
        t2[inner] = rng.uniform(10.0, 160.0)
        labels[inner] = idx + 2
    return TissueField(proton_density=pd, t2star_ms=t2, labels=labels)


def render_condition(field: TissueField, echo_train: EchoTrain,
                     noise_sigma: float, rng: np.random.Generator) -> Volume:
    """Per-echo decay channels, optionally with additive Gaussian noise."""
    if noise_sigma < 0:
        raise ValueError(f"noise sigma must be >= 0, got {noise_sigma}")
    times = echo_train.times_ms
    pd = field.proton_density.astype(np.float64)
    t2 = field.t2star_ms.astype(np.float64)
    signal = pd[..., None] * np.exp(-times / t2[..., None])
    if noise_sigma > 0:
        signal = signal + noise_sigma * rng.standard_normal(signal.shape)
    return Volume(signal.astype(np.float32))


def render_target(field: TissueField,
                  contrast_te_ms: float = CONTRAST_TE_MS) -> Volume:
    """Deterministic target contrast pd * (1 - exp(-TE_c / t2*))."""
    pd = field.proton_density.astype(np.float64)
    t2 = field.t2star_ms.astype(np.float64)
    return Volume((pd * (1.0 - np.exp(-contrast_te_ms / t2))).astype(np.float32))


def generate_pair(seed, n: int, echo_train: EchoTrain | None = None,
                  noise_sigma: float = 0.01,
                  n_structures: int = 4) -> tuple[Volume, Volume]:
    """Seeded (condition, target) pair; bit-identical for equal seeds."""
    echo_train = echo_train or EchoTrain()
    rng = np.random.default_rng(seed)
    field = make_tissue_field(n, rng, n_structures=n_structures)
    condition = render_condition(field, echo_train, noise_sigma, rng)
    target = render_target(field)
    return condition, target


def fit_echo_decay(y: np.ndarray, times_ms: np.ndarray,
                   floor: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel weighted log-linear fit of the decay channels.

    Returns (proton density estimate, t2* estimate in ms).  Weights are the
    squared clipped signals, which counteracts the log-transform noise
    amplification at late echoes; on noiseless data the fit is exact.
    """
    y = np.asarray(y, dtype=np.float64)
    times = np.asarray(times_ms, dtype=np.float64)
    if y.shape[-1] != times.shape[0]:
        raise ValueError(
            f"last axis ({y.shape[-1]}) must match echo count ({times.shape[0]})"
        )
    s = np.clip(y, floor, None)
    logs = np.log(s)
    w = s * s
    w_sum = w.sum(axis=-1)
    t_mean = (w * times).sum(axis=-1) / w_sum
    l_mean = (w * logs).sum(axis=-1) / w_sum
    t_dev = times - t_mean[..., None]
    denom = (w * t_dev**2).sum(axis=-1)
    denom = np.where(denom <= 0, 1.0, denom)
    slope = (w * t_dev * (logs - l_mean[..., None])).sum(axis=-1) / denom
    slope = np.minimum(slope, -1.0 / 1e4)  # decay can only go down
    t2star = np.clip(-1.0 / slope, 1.0, 1e4)
    pd = np.clip(np.exp(l_mean + slope * (0.0 - t_mean)), 0.0, 2.0)
    return pd, t2star


class EchoDecayMeanMap:
    """Condition-to-target-mean map built from the decay fit; suitable as the
    mean map of a GaussianTargetModel."""

    def __init__(self, echo_train: EchoTrain | None = None,
                 contrast_te_ms: float = CONTRAST_TE_MS):
        self.echo_train = echo_train or EchoTrain()
        self.contrast_te_ms = contrast_te_ms

    def __call__(self, y: np.ndarray) -> np.ndarray:
        pd, t2star = fit_echo_decay(y, self.echo_train.times_ms)
        est = pd * (1.0 - np.exp(-self.contrast_te_ms / t2star))
        return est.astype(np.float32)


def split_dataset(items: Sequence, counts: Sequence[int],
                  seed: int = 0) -> tuple[list, list, list]:
    """Disjoint deterministic (train, validation, test) split by counts."""
    counts = [int(c) for c in counts]
    if len(counts) != 3 or any(c <= 0 for c in counts):
        raise ValueError(f"need three positive counts, got {counts}")
    if sum(counts) > len(items):
        raise ValueError(
            f"cannot split {len(items)} items into groups of {counts}"
        )
    order = np.random.default_rng(seed).permutation(len(items))
    picked = [items[i] for i in order]
    a, b, c = counts
    return picked[:a], picked[a : a + b], picked[a + b : a + b + c]


def inject_slice_artifacts(v: Volume, axis: PlaneAxis, amplitude: float,
                           rng: np.random.Generator,
                           noise_fraction: float = 0.5) -> Volume:
    """Add an independent random offset plus noise to each slice along `axis`.

    Reproduces the stripe pattern that slice-independent 2D generation
    leaves in the two orthogonal plane views.  Offsets are N(0, amplitude^2)
    scalars per slice; the per-voxel noise std is amplitude * noise_fraction.
    """
    if amplitude < 0:
        raise ValueError(f"amplitude must be >= 0, got {amplitude}")
    if amplitude == 0:
        return Volume(v.data)
    data = v.data.copy()
    moved = np.moveaxis(data, axis.dim, 0)
    for i in range(moved.shape[0]):
        offset = amplitude * rng.standard_normal()
        noise = amplitude * noise_fraction * rng.standard_normal(moved[i].shape)
        moved[i] += np.float32(offset) + noise.astype(np.float32)
    return Volume(data)


@dataclass(frozen=True)
class PairEntry:
    """One manifest line: pair id, condition path, target path, split name."""

    pair_id: str
    condition_path: str
    target_path: str
    split: str


def write_manifest(path, entries: Sequence[PairEntry]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for e in entries:
            f.write(f"{e.pair_id}\t{e.condition_path}\t{e.target_path}\t{e.split}\n")


def read_manifest(path) -> list[PairEntry]:
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}: malformed manifest line: {line!r}")
            entries.append(PairEntry(*parts))
    return entries
