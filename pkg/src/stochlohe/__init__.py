"""Simulation and statistical verification of Schrödinger-Lohe oscillators under common noise.

The two-oscillator correlation ``h = <psi_1, psi_2>`` solves a closed SDE on
the unit disc; the toolkit integrates it, integrates the full field
equations, evaluates the stationary law on the circle in closed form, and
estimates convergence and synchronization statistics from ensembles.
"""

__version__ = "0.1.0"

from .correlation_sde import (BoundaryState, CorrelationPath, CorrelationState, EnsembleResult,
                              deterministic_solution, ito_drift, modulus_identity_residual,
                              simulate_ensemble, simulate_increments, simulate_path,
                              step_boundary, step_interior, step_split)
from .ergodic_stats import (CircularHistogram, DecayFit, Histogram, NoiseFloor, batch_means_se,
                            coupling_gap, distance_histogram, ergodic_average, escape_statistics,
                            histogram, noise_floor, tv_decay_fit, tv_distance,
                            two_sample_noise_floor)
from .errors import (BinMismatch, ConfigError, DomainError, MassDefectError, NoiseFloorError,
                     QuadratureError, StepRejectionExhausted, StochLoheError, TimestampMismatch,
                     UnderflowError)
from .invariant_measure import (StationaryDensity, density, distance_quantile, ldp_bounds,
                                ldp_empirical_slope, ldp_rate, mean_re, normalizing_constant,
                                sample)
from .lohe_spde import (Grid, SyncMetrics, WaveField, correlation, gaussian_packet, simulate_spde,
                        step_spde, sync_metrics)
from .noise import NoiseStream, derive_seed
from .params import TOL_BALL, ModelParams

__all__ = [name for name in dir() if not name.startswith("_")]
