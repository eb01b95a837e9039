"""Physical configuration shared by every module."""

from __future__ import annotations

import math
from dataclasses import dataclass

# |h0| within this distance of 1 selects the exact boundary scheme.
TOL_BALL = 1e-12


@dataclass(frozen=True)
class ModelParams:
    """Coupling strength ``K``, noise strength ``eps`` and oscillator count ``N``.

    ``eps == 0`` is tolerated so that the deterministic limit can be integrated
    with the same code; anything that needs the invariant law requires ``eps > 0``.
    """

    K: float
    eps: float
    N: int = 2

    def __post_init__(self):
        if not (math.isfinite(self.K) and self.K > 0):
            raise ValueError(f"K must be positive, got {self.K!r}")
        if not (math.isfinite(self.eps) and self.eps >= 0):
            raise ValueError(f"eps must be nonnegative, got {self.eps!r}")
        if int(self.N) != self.N or self.N < 2:
            raise ValueError(f"N must be an integer >= 2, got {self.N!r}")

    @property
    def kappa(self) -> float:
        """Concentration 2K/eps^2 of the stationary law on the circle."""
        if self.eps == 0:
            return math.inf
        return 2.0 * self.K / self.eps**2

    @property
    def dt_max(self) -> float:
        limits = [1e-2, 0.1 / self.K]
        if self.eps > 0:
            limits.append(0.1 / self.eps**2)
        return min(limits)

    def scaled(self, c: float) -> "ModelParams":
        """Parameters whose law at time c*t matches this one's at time t."""
        return ModelParams(self.K / c, self.eps / math.sqrt(c), self.N)
