"""The stationary law of the correlation on the unit circle.

On the circle the correlation is ``exp(i theta)`` with
``dtheta = -2K sin(theta) dt + sqrt(2) eps dW``, whose unique invariant law has
density proportional to ``exp(kappa cos theta)`` in ``theta``, with
``kappa = 2K / eps^2``.  Everything here depends on ``(K, eps)`` only through
``kappa``.

Integrals of ``exp(kappa cos theta)`` are computed in log form: the maximum of
``kappa cos theta`` over the integration range is factored out before adaptive
Gauss-Kronrod quadrature, so arcs far from ``theta = 0`` do not underflow.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy import integrate, optimize

from .errors import DomainError, QuadratureError, UnderflowError
from .noise import NoiseStream
from .params import TOL_BALL, ModelParams

_EPSREL = 1e-13
_ERR_MAX = 1e-8


def _quad(f, a, b, points=()):
    pts = [p for p in points if a < p < b]
    with warnings.catch_warnings():
        # roundoff warnings at the 1e-13 target are judged by the error estimate
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, err = integrate.quad(f, a, b, epsabs=0.0, epsrel=_EPSREL, limit=500,
                                  points=pts or None)
    if err > _ERR_MAX * abs(val):
        raise QuadratureError(f"quadrature on [{a:g}, {b:g}] reached only {err:.2e}")
    return val


def _max_cos(a: float, b: float) -> float:
    """Maximum of cos over [a, b] (any real a <= b)."""
    if b - a >= 2 * math.pi:
        return 1.0
    k = math.ceil(a / (2 * math.pi))
    if 2 * math.pi * k <= b:
        return 1.0
    return max(math.cos(a), math.cos(b))


def _peaks(a: float, b: float) -> list[float]:
    k0 = math.ceil(a / (2 * math.pi))
    k1 = math.floor(b / (2 * math.pi))
    return [2 * math.pi * k for k in range(k0, k1 + 1)]


def _breakpoints(kappa: float, a: float, b: float) -> list[float]:
    """Peaks of the integrand plus a geometric ladder resolving their width.

    At large kappa the mass sits within ``1/sqrt(kappa)`` of an interior peak,
    or within ``1/(kappa |sin|)`` of an endpoint where cos is maximal.
    """
    peaks = _peaks(a, b)
    centers = [(p, 1 / math.sqrt(kappa)) for p in peaks] if kappa > 0 else []
    if not peaks and kappa > 0:
        end = a if math.cos(a) >= math.cos(b) else b
        centers.append((end, min(1 / math.sqrt(kappa), 1 / (kappa * abs(math.sin(end))))))
    pts = list(peaks)
    for c, w in centers:
        for m in (1, 4, 16, 64, 256):
            pts += [c - m * w, c + m * w]
    return sorted(pts)


def log_weight_integral(kappa: float, a: float, b: float, f=None) -> float:
    """``log int_a^b f(theta) exp(kappa cos theta) dtheta`` for a nonnegative ``f``."""
    if b <= a:
        return -math.inf
    top = kappa * _max_cos(a, b)
    if f is None:
        g = lambda th: math.exp(kappa * math.cos(th) - top)  # noqa: E731
    else:
        g = lambda th: f(th) * math.exp(kappa * math.cos(th) - top)  # noqa: E731
    val = _quad(g, a, b, _breakpoints(kappa, a, b))
    if val <= 0:
        return -math.inf
    return top + math.log(val)


@dataclass(frozen=True)
class StationaryDensity:
    """Stationary density on (-pi, pi]; immutable and shareable."""

    kappa: float
    log_gamma: float

    @classmethod
    def from_kappa(cls, kappa: float) -> "StationaryDensity":
        if not (math.isfinite(kappa) and kappa >= 0):
            raise DomainError(f"kappa must be finite and nonnegative, got {kappa!r}")
        kappa = float(kappa)
        return cls(kappa, log_weight_integral(kappa, -math.pi, math.pi))

    @classmethod
    def from_params(cls, params: ModelParams) -> "StationaryDensity":
        if params.eps <= 0:
            raise DomainError("the stationary law requires eps > 0")
        return cls.from_kappa(params.kappa)

    def log_mass(self, a: float, b: float) -> float:
        """Log of the probability of the angular interval [a, b]."""
        return log_weight_integral(self.kappa, a, b) - self.log_gamma

    def cdf(self, theta) -> np.ndarray:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        out = np.array([math.exp(self.log_mass(-math.pi, t)) if t > -math.pi else 0.0
                        for t in np.minimum(theta, math.pi)])
        return out

    def ppf(self, q: float) -> float:
        """Angle ``theta`` with ``P(Theta <= theta) = q``."""
        if not 0 <= q <= 1:
            raise ValueError("q must lie in [0, 1]")
        if q == 0:
            return -math.pi
        if q == 1:
            return math.pi
        return optimize.brentq(lambda t: self.cdf(t)[0] - q, -math.pi, math.pi,
                               xtol=1e-14, rtol=1e-14)

    def bin_masses(self, edges) -> np.ndarray:
        """Probabilities of consecutive angular bins given by ``edges``."""
        edges = np.asarray(edges, dtype=float)
        return np.array([math.exp(self.log_mass(a, b)) for a, b in zip(edges[:-1], edges[1:])])


def density(theta, sd: StationaryDensity):
    """``exp(kappa cos theta - log_gamma)``."""
    return np.exp(sd.kappa * np.cos(theta) - sd.log_gamma)


def normalizing_constant(params: ModelParams) -> float:
    """``int_{-pi}^{pi} exp((2K/eps^2) cos theta) dtheta``; overflows to inf for kappa > ~709."""
    return math.exp(StationaryDensity.from_params(params).log_gamma)


def mean_re(sd: StationaryDensity, tol: float = 1e-10) -> float:
    """Stationary mean of ``Re h = cos theta``.

    Computed twice: directly as ``int cos(theta) p(theta)``, and after an
    integration by parts as ``kappa int sin^2(theta) p(theta)``, which is
    manifestly positive.  The routes must agree to ``tol``.
    """
    k = sd.kappa
    if k == 0:
        return 0.0
    pos = math.exp(log_weight_integral(k, -math.pi / 2, math.pi / 2, math.cos) - sd.log_gamma)
    neg = 0.0
    for a, b in ((-math.pi, -math.pi / 2), (math.pi / 2, math.pi)):
        neg += math.exp(log_weight_integral(k, a, b, lambda t: -math.cos(t)) - sd.log_gamma)
    direct = pos - neg
    by_parts = k * math.exp(log_weight_integral(k, -math.pi, math.pi,
                                                lambda t: math.sin(t) ** 2) - sd.log_gamma)
    if abs(direct - by_parts) > tol:
        raise QuadratureError(f"mean_re routes disagree: {direct!r} vs {by_parts!r}")
    return by_parts


def sample(sd: StationaryDensity, n: int, noise: NoiseStream) -> np.ndarray:
    """Exact draws by rejection from the uniform law on (-pi, pi].

    A proposal ``theta`` is accepted with probability ``exp(kappa (cos theta - 1))``;
    the expected acceptance rate is ``Gamma / (2 pi exp(kappa))``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rate = math.exp(sd.log_gamma - sd.kappa) / (2 * math.pi)
    out = np.empty(n)
    filled = 0
    while filled < n:
        m = int(1.2 * (n - filled) / rate) + 64
        u = noise.uniforms(2 * m)
        theta = math.pi - 2 * math.pi * u[:m]
        keep = theta[u[m:] < np.exp(sd.kappa * (np.cos(theta) - 1))]
        take = min(len(keep), n - filled)
        out[filled:filled + take] = keep[:take]
        filled += take
    return out


def acceptance_rate(sd: StationaryDensity) -> float:
    return math.exp(sd.log_gamma - sd.kappa) / (2 * math.pi)


# -- large deviations ---------------------------------------------------------

def ldp_rate(x: complex) -> float:
    """Rate ``2 (1 - Re x)`` of a point on the unit circle."""
    if abs(abs(x) - 1) > TOL_BALL:
        raise DomainError(f"|x| = {abs(x):.17g} is not on the unit circle")
    return 2.0 * (1.0 - complex(x).real)


Arc = tuple[float, float]


def _arcs(F: Iterable[Arc]) -> list[Arc]:
    arcs = [(float(a), float(b)) for a, b in F]
    if not arcs or any(b <= a for a, b in arcs):
        raise ValueError("F must be a nonempty union of intervals with a < b")
    return arcs


def log_measure(F: Iterable[Arc], kappa: float) -> float:
    """``log mu(F)`` for a finite union of disjoint angular intervals."""
    sd = StationaryDensity.from_kappa(kappa)
    logs = [log_weight_integral(kappa, a, b) for a, b in _arcs(F)]
    top = max(logs)
    if top == -math.inf:
        raise UnderflowError("mu(F) underflows even in log form")
    return top + math.log(sum(math.exp(v - top) for v in logs)) - sd.log_gamma


def ldp_empirical_slope(F: Iterable[Arc], kappas) -> np.ndarray:
    """``(eps^2/K) log mu(F) = (2/kappa) log mu(F)`` for each kappa."""
    arcs = _arcs(F)
    return np.array([2.0 / k * log_measure(arcs, k) for k in kappas])


def ldp_limit(F: Iterable[Arc]) -> float:
    """``-inf_F I = 2 (sup_F cos - 1)``, the common limit of the slopes."""
    return 2.0 * (max(_max_cos(a, b) for a, b in _arcs(F)) - 1.0)


def ldp_bounds(F: Iterable[Arc], kappa: float, n_sub: int = 2000) -> tuple[float, float]:
    """Finite-kappa lower and upper bounds on ``(2/kappa) log mu(F)``.

    Upper: bound the integrand on ``F`` by its maximum over the closure, which
    gives ``(2/kappa) log|F| + 2 sup cos``.  Lower: restrict to a subinterval
    ``U`` of the interior and bound the integrand below by its minimum on ``U``,
    maximized over a family of ``U``.  Both carry ``-(2/kappa) log Gamma`` and
    converge to the large-deviation limit as kappa grows.
    """
    arcs = _arcs(F)
    log_gamma = StationaryDensity.from_kappa(kappa).log_gamma
    total = sum(b - a for a, b in arcs)
    sup_cos = max(_max_cos(a, b) for a, b in arcs)
    upper = 2.0 / kappa * (math.log(total) + kappa * sup_cos - log_gamma)
    best = -math.inf
    for a, b in arcs:
        grid = np.linspace(a, b, n_sub + 1)
        cos_g = np.cos(grid)
        # first minimum of cos (odd multiple of pi) strictly right of each node
        nxt = (2 * np.floor((grid + math.pi) / (2 * math.pi)) + 1) * math.pi
        for i in range(n_sub):
            v = grid[i + 1:]
            # min of cos over [u, v] is at an endpoint unless a minimum lies inside
            lo = np.where(v > nxt[i], -1.0, np.minimum(cos_g[i], cos_g[i + 1:]))
            cand = np.log(v - grid[i]) + kappa * lo
            best = max(best, float(cand.max()))
    lower = 2.0 / kappa * (best - log_gamma)
    return lower, upper


def distance_quantile(sd: StationaryDensity, q: float) -> float:
    """``q``-quantile of ``||psi_1 - psi_2|| = sqrt(2 - 2 cos theta) = 2 |sin(theta/2)|``.

    The distance is increasing in ``|theta|`` and the law is even, so the
    quantile is ``2 sin(a/2)`` with ``mu([-a, a]) = q``.
    """
    if not 0 < q < 1:
        raise ValueError("q must lie in (0, 1)")
    f = lambda a: 2 * math.exp(sd.log_mass(0.0, a)) - q  # noqa: E731
    a = optimize.brentq(f, 0.0, math.pi, xtol=1e-14, rtol=1e-14)
    return 2 * math.sin(a / 2)


def write_density_table(sd: StationaryDensity, path, n: int = 2001) -> np.ndarray:
    """Tabulate ``theta, pdf, cdf`` on ``n`` equispaced angles of [-pi, pi] as CSV."""
    theta = np.linspace(-math.pi, math.pi, n)
    pdf = density(theta, sd)
    cdf = np.concatenate([[0.0], np.cumsum(sd.bin_masses(theta))])
    cdf[-1] = 1.0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["theta", "pdf", "cdf"])
        for row in zip(theta, pdf, cdf):
            w.writerow([repr(float(v)) for v in row])
    return np.column_stack([theta, pdf, cdf])
