"""Estimators that turn trajectory ensembles into verdicts.

Histograms and total-variation distances between laws on the circle, noise
floors for those distances, time averages with batch-means errors, coupling
gaps and exponential fits of TV decay.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, stats

from .correlation_sde import CorrelationPath, simulate_ensemble, wrap_angle
from .errors import BinMismatch, DomainError, NoiseFloorError, TimestampMismatch
from .invariant_measure import StationaryDensity
from .noise import derive_seed
from .params import ModelParams

N_BATCHES = 32


@dataclass(frozen=True)
class Histogram:
    """Counts over consecutive bins with the given edges."""

    edges: np.ndarray
    counts: np.ndarray
    total: int

    @property
    def n_bins(self) -> int:
        return len(self.counts)

    @property
    def masses(self) -> np.ndarray:
        if self.total == 0:
            return np.zeros(self.n_bins)
        return self.counts / self.total


@dataclass(frozen=True)
class CircularHistogram(Histogram):
    """Histogram over ``n_bins`` equal arcs partitioning (-pi, pi]."""

    @classmethod
    def from_counts(cls, counts) -> "CircularHistogram":
        counts = np.asarray(counts, dtype=np.int64)
        return cls(circular_edges(len(counts)), counts, int(counts.sum()))


def circular_edges(n_bins: int) -> np.ndarray:
    return np.linspace(-math.pi, math.pi, n_bins + 1)


def histogram(angles, n_bins: int) -> CircularHistogram:
    """Bin wrapped angles into the arcs ``(-pi + k w, -pi + (k+1) w]``, ``w = 2 pi / n_bins``."""
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    theta = wrap_angle(np.asarray(angles, dtype=float).ravel())
    w = 2 * math.pi / n_bins
    idx = np.clip(np.ceil((theta + math.pi) / w).astype(np.int64) - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    return CircularHistogram(circular_edges(n_bins), counts, int(counts.sum()))


def line_histogram(values, edges) -> Histogram:
    edges = np.asarray(edges, dtype=float)
    counts, _ = np.histogram(np.asarray(values, dtype=float).ravel(), bins=edges)
    return Histogram(edges, counts, int(counts.sum()))


def distance_histogram(h, n_bins: int) -> Histogram:
    """Histogram of ``||psi_1 - psi_2|| = sqrt(2 - 2 Re h)`` on [0, 2]."""
    d = np.sqrt(np.maximum(2 - 2 * np.real(h), 0.0))
    return line_histogram(d, np.linspace(0.0, 2.0, n_bins + 1))


def _masses(p) -> np.ndarray:
    if isinstance(p, Histogram):
        return p.masses
    p = np.asarray(p, dtype=float)
    s = p.sum()
    return p / s if s > 0 else p


def tv_distance(p, q) -> float:
    """``(1/2) sum |p_i - q_i|`` over normalized bin masses.

    ``p`` and ``q`` are histograms or arrays of bin masses on a common binning.
    """
    if isinstance(p, Histogram) and isinstance(q, Histogram):
        if p.edges.shape != q.edges.shape or not np.allclose(p.edges, q.edges, rtol=0, atol=1e-12):
            raise BinMismatch("histograms have different bin edges")
    elif len(_masses(p)) != len(_masses(q)):
        raise BinMismatch(f"{len(_masses(p))} bins vs {len(_masses(q))} bins")
    return float(min(1.0, 0.5 * np.abs(_masses(p) - _masses(q)).sum()))


# -- noise floors -------------------------------------------------------------

@dataclass(frozen=True)
class NoiseFloor:
    """Null distribution of TV between a sampled histogram and its exact masses.

    Under the null each bin count is binomial; by the normal approximation
    ``|p_hat_i - p_i|`` has mean ``sqrt(2 v_i / pi)`` and variance
    ``(1 - 2/pi) v_i`` with ``v_i = p_i (1 - p_i) s`` (``s = 1/n`` for one
    sample against exact masses, ``1/n_1 + 1/n_2`` for two samples).
    """

    mean: float
    sd: float

    def level(self, n_sigma: float) -> float:
        return self.mean + n_sigma * self.sd


def _floor(p, scale: float) -> NoiseFloor:
    v = p * (1 - p) * scale
    return NoiseFloor(0.5 * float(np.sqrt(2 * v / math.pi).sum()),
                      0.5 * math.sqrt((1 - 2 / math.pi) * float(v.sum())))


def noise_floor(masses, n: int) -> NoiseFloor:
    """Floor for an ``n``-sample histogram against exact bin ``masses``.

    For ``m`` equal masses the mean is close to ``sqrt(m / (2 pi n))``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    return _floor(np.asarray(masses, dtype=float), 1.0 / n)


def two_sample_noise_floor(p: Histogram, q: Histogram) -> NoiseFloor:
    """Floor for TV between two independent histograms of the same law (pooled masses)."""
    if p.total < 1 or q.total < 1:
        raise ValueError("both histograms must be nonempty")
    pooled = (p.counts + q.counts) / (p.total + q.total)
    return _floor(pooled, 1.0 / p.total + 1.0 / q.total)


def chi_square_pvalue(hist: Histogram, masses, min_expected: float = 5.0) -> float:
    """Pearson goodness-of-fit p-value; bins with small expectation are merged into neighbours."""
    masses = np.asarray(masses, dtype=float)
    expected = masses / masses.sum() * hist.total
    obs, exp = [], []
    o_acc = e_acc = 0.0
    for o, e in zip(hist.counts, expected):
        o_acc += o
        e_acc += e
        if e_acc >= min_expected:
            obs.append(o_acc)
            exp.append(e_acc)
            o_acc = e_acc = 0.0
    if e_acc > 0:
        obs[-1] += o_acc
        exp[-1] += e_acc
    return float(stats.chisquare(obs, exp).pvalue)


# -- time averages ------------------------------------------------------------

def _values(path: CorrelationPath, f: Callable) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(path.t, dtype=float)
    if len(t) < 2:
        raise ValueError("path needs at least two records")
    dt = np.diff(t)
    if not np.allclose(dt, dt[0], rtol=1e-9, atol=0):
        raise ValueError("path must be sampled at a uniform stride")
    return t, np.asarray(f(np.asarray(path.h)), dtype=float)


def ergodic_average(path: CorrelationPath, f: Callable = np.real) -> float:
    """Trapezoidal time average of ``f(h)`` along ``path``."""
    t, y = _values(path, f)
    return float(integrate.trapezoid(y, t) / (t[-1] - t[0]))


def batch_means_se(path: CorrelationPath, f: Callable = np.real,
                   n_batches: int = N_BATCHES) -> float:
    """Standard error of :func:`ergodic_average` from ``n_batches`` contiguous batch means."""
    t, y = _values(path, f)
    n = len(y) - 1
    if n < n_batches:
        raise ValueError("path too short for the number of batches")
    cuts = np.linspace(0, n, n_batches + 1).round().astype(int)
    means = np.array([integrate.trapezoid(y[a:b + 1], t[a:b + 1]) / (t[b] - t[a])
                      for a, b in zip(cuts[:-1], cuts[1:])])
    return float(means.std(ddof=1) / math.sqrt(n_batches))


# -- coupling ----------------------------------------------------------------

def coupling_gap(path_x: CorrelationPath, path_g: CorrelationPath,
                 K: float) -> tuple[np.ndarray, np.ndarray]:
    """Gap ``|h^x(t_i) - g(t_i)|`` and its analytic envelope.

    The envelope is the square root of
    ``|x - g(0)|^2 / (1 - |x|^2) * exp(-2K int_0^t Re g)``, which bounds the
    squared gap.  ``path_g`` must carry its running drift integral.
    """
    tx = np.asarray(path_x.t, dtype=float)
    tg = np.asarray(path_g.t, dtype=float)
    if tx.shape != tg.shape or not np.allclose(tx, tg, rtol=0, atol=1e-12):
        raise TimestampMismatch("paths are recorded at different times")
    hx = np.asarray(path_x.h)
    g = np.asarray(path_g.h)
    gap = np.abs(hx - g)
    x = hx[0]
    if abs(x) >= 1:
        # both on the circle: only the trivial envelope is available
        return gap, np.where(gap[0] == 0, 0.0, np.full_like(gap, 2.0))
    c = abs(x - g[0]) ** 2 / (1 - abs(x) ** 2)
    D = np.asarray(path_g.drift_integral, dtype=float) - path_g.drift_integral[0]
    return gap, np.sqrt(c * np.exp(-2 * K * D))


# -- TV decay -----------------------------------------------------------------

@dataclass
class DecayFit:
    """``TV(t) ~ c exp(-gamma_star t)`` fitted on the window above the noise floor."""

    gamma_star: float
    c: float
    r_squared: float
    times: np.ndarray = field(repr=False)
    tv: np.ndarray = field(repr=False)
    floor: float = 0.0
    window: np.ndarray = field(default=None, repr=False)


def fit_exponential(t, y) -> tuple[float, float, float]:
    """Least squares of ``log y`` on ``t``; returns ``(rate, prefactor, r^2)``."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise ValueError("ordinates must be positive")
    res = stats.linregress(t, np.log(y))
    return -res.slope, math.exp(res.intercept), res.rvalue ** 2


def tv_curve(params: ModelParams, x: complex, times, n_traj: int, n_bins: int,
             dt: float | None = None, master_seed: int = 0, workers: int = 1,
             density: StationaryDensity | None = None) -> np.ndarray:
    """TV between the empirical law of ``g^x(t)`` and the stationary law at each time."""
    if abs(abs(x) - 1) > 1e-12:
        raise DomainError("start must lie on the unit circle")
    dt = dt or params.dt_max
    sd = density or StationaryDensity.from_params(params)
    masses = sd.bin_masses(circular_edges(n_bins))
    times = np.asarray(times, dtype=float)
    T = float(np.ceil(times.max() / dt - 1e-9) * dt)
    ens = simulate_ensemble(x, params, T, dt, master_seed, n_traj=n_traj,
                            record_times=times, workers=workers)
    rec = {round(t / dt): k for k, t in enumerate(ens.times)}
    out = []
    for t in times:
        col = ens.h[:, rec[round(t / dt)]]
        out.append(tv_distance(histogram(np.angle(col), n_bins), masses))
    return np.array(out)


def tv_decay_fit(params: ModelParams, x_starts: Sequence[complex], T: float, n_traj: int,
                 n_bins: int, dt: float | None = None, n_times: int = 24,
                 floor_factor: float = 2.0, master_seed: int = 0,
                 workers: int = 1) -> DecayFit:
    """Fit ``sup_x TV(delta_x P_t, mu) <= c exp(-gamma_star t)`` on a geometric grid in [1, T].

    Each start gets its own ensemble (seeded from ``master_seed`` and the start
    index).  The fit window is the leading run of grid times whose TV exceeds
    ``floor_factor`` times the mean multinomial noise floor.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if not x_starts:
        raise ValueError("need at least one start")
    dt = dt or params.dt_max
    sd = StationaryDensity.from_params(params)
    masses = sd.bin_masses(circular_edges(n_bins))
    times = np.unique(np.round(np.geomspace(1.0, T, n_times) / dt)) * dt
    curves = [tv_curve(params, x, times, n_traj, n_bins, dt, derive_seed(master_seed, i),
                       workers, sd) for i, x in enumerate(x_starts)]
    tv = np.max(curves, axis=0)
    floor = noise_floor(masses, n_traj).mean
    above = tv > floor_factor * floor
    stop = int(np.argmin(above)) if not above.all() else len(tv)
    window = np.arange(stop)
    if len(window) < 4:
        raise NoiseFloorError(f"only {len(window)} grid points above {floor_factor:g}x the "
                              f"noise floor {floor:.3g}")
    g, c, r2 = fit_exponential(times[window], tv[window])
    if not g > 0:
        raise NoiseFloorError(f"fitted rate {g:.3g} is not positive")
    return DecayFit(g, c, r2, times, tv, floor, window)


def escape_statistics(params: ModelParams, x: complex, radii, T, n_traj: int,
                      dt: float | None = None, master_seed: int = 0,
                      workers: int = 1) -> np.ndarray:
    """Fractions ``P(|h^x(T)| <= r)`` for each radius, estimated from ``n_traj`` paths.

    ``T`` may be a scalar or a sequence; the result has shape ``(len(radii),)``
    or ``(len(T), len(radii))`` accordingly.
    """
    if abs(x) >= 1:
        raise DomainError("x must lie in the open unit disc")
    radii = np.asarray(radii, dtype=float)
    if np.any(np.diff(radii) <= 0) or np.any((radii <= 0) | (radii >= 1)):
        raise ValueError("radii must be ascending in (0, 1)")
    scalar = np.ndim(T) == 0
    Ts = np.atleast_1d(np.asarray(T, dtype=float))
    dt = dt or params.dt_max
    ens = simulate_ensemble(x, params, float(Ts.max()), dt, master_seed, n_traj=n_traj,
                            record_times=Ts, workers=workers)
    col = {round(t / dt): k for k, t in enumerate(ens.times)}
    # the log-defect resolves moduli that round to 1
    mod = np.sqrt(-np.expm1(ens.log_defect))
    out = np.array([[np.mean(mod[:, col[round(t / dt)]] <= r) for r in radii] for t in Ts])
    return out[0] if scalar else out
