"""Integrators for the two-oscillator correlation SDE.

The correlation ``h = <psi_1, psi_2>`` solves the Stratonovich equation

    dh = K (1 - h^2) dt + sqrt(2) i eps h o dW

on the closed unit disc.  The disc interior and the unit circle are both
invariant, and they are integrated by different schemes:

* interior: stochastic Heun on the Stratonovich form, with step rejection and
  Brownian-bridge halving if a proposal leaves the disc.  Away from the origin
  the step is taken in the coordinates ``(arg h, log(1 - |h|^2))``, which keeps
  the distance to the circle exactly representable after ``|h|`` has rounded to
  one in double precision (interior paths approach the circle exponentially);
* boundary: stochastic Heun on the angle ``theta`` of ``h = exp(i theta)``,
  ``dtheta = -2K sin(theta) dt + sqrt(2) eps dW``, so ``|h| = 1`` by construction.

A second scheme, ``scheme="splitting"``, composes exact flows: half a step of
the deterministic flow, which is the disc automorphism
``h -> (h cosh a + sinh a) / (h sinh a + cosh a)`` with ``a = K dt / 2``, the
exact noise rotation ``h -> h exp(i sqrt(2) eps dW)``, and another half step.
Interior and boundary points are moved by the same maps, so relations between
coupled trajectories that hold for automorphisms hold to rounding.  The drift
integral is accumulated exactly along the deterministic sub-flows.
"""

from __future__ import annotations

import cmath
import math
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, StepRejectionExhausted
from .noise import BRIDGE_TAG, NoiseStream, split_increment
from .params import TOL_BALL, ModelParams

MAX_HALVINGS = 40
# Below this modulus the Cartesian form is used; the polar chart is singular at 0.
R_SWITCH = 0.5
SQRT2 = math.sqrt(2.0)
_CHUNK = 512


def ito_drift(h, params: ModelParams):
    """Drift of the Ito form: the Stratonovich drift plus the correction ``-eps^2 h``."""
    return params.K * (1 - h * h) - params.eps**2 * h


def strat_drift(h, K: float):
    return K * (1 - h * h)


def wrap_angle(theta):
    """Reduce angles into (-pi, pi]."""
    wrapped = math.pi - np.mod(math.pi - np.asarray(theta, dtype=float), 2 * math.pi)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class CorrelationState:
    """A point of the closed disc with its time and ``int_0^t Re h(s) ds``.

    ``log_defect`` is ``log(1 - |h|^2)``, tracked alongside ``h`` because the
    difference ``1 - |h|^2`` underflows long before an interior path is
    allowed to touch the circle; it is ``-inf`` for boundary states.
    """

    h: complex
    t: float = 0.0
    drift_integral: float = 0.0
    log_defect: float = field(default=None)

    def __post_init__(self):
        if self.log_defect is None:
            a2 = abs(self.h) ** 2
            object.__setattr__(self, "log_defect", math.log1p(-a2) if a2 < 1 else -math.inf)

    @property
    def on_boundary(self) -> bool:
        return self.log_defect == -math.inf

    @property
    def modulus_defect(self) -> float:
        """``1 - |h|^2`` computed from the tracked logarithm."""
        return math.exp(self.log_defect)


@dataclass(frozen=True)
class BoundaryState:
    theta: float
    t: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @property
    def h(self) -> complex:
        return complex(math.cos(self.theta), math.sin(self.theta))


# -- vectorized kernels -------------------------------------------------------

def _heun_cartesian(h, K, eps, dt, dW):
    b = 1j * SQRT2 * eps
    a0 = K * (1 - h * h)
    pred = h + a0 * dt + b * h * dW
    a1 = K * (1 - pred * pred)
    return h + 0.5 * (a0 + a1) * dt + 0.5 * b * (h + pred) * dW


def _polar_drift(theta, ell, K):
    r = np.sqrt(-np.expm1(ell))
    return -K * (r + 1.0 / r) * np.sin(theta), -2.0 * K * r * np.cos(theta)


def _heun_polar(theta, ell, K, eps, dt, dW):
    noise = SQRT2 * eps * dW
    a0, c0 = _polar_drift(theta, ell, K)
    tp = theta + a0 * dt + noise
    lp = ell + c0 * dt
    # A predictor that crosses the origin is rejected through the final value.
    with np.errstate(invalid="ignore", divide="ignore"):
        a1, c1 = _polar_drift(tp, np.minimum(lp, 0.0), K)
    return theta + 0.5 * (a0 + a1) * dt + noise, ell + 0.5 * (c0 + c1) * dt


def _interior_step(h, ell, K, eps, dt, dW):
    """One unrejected interior step for arrays; returns ``(h, ell, ok)``."""
    cart = -np.expm1(ell) < R_SWITCH**2
    if cart.all():
        return _cartesian_update(h, K, eps, dt, dW)
    if not cart.any():
        return _polar_update(h, ell, K, eps, dt, dW)
    h_new = np.empty_like(h)
    ell_new = np.empty_like(ell)
    ok = np.empty(h.shape, dtype=bool)
    h_new[cart], ell_new[cart], ok[cart] = _cartesian_update(h[cart], K, eps, dt, dW[cart])
    pol = ~cart
    h_new[pol], ell_new[pol], ok[pol] = _polar_update(h[pol], ell[pol], K, eps, dt, dW[pol])
    return h_new, ell_new, ok


def _cartesian_update(h, K, eps, dt, dW):
    hc = _heun_cartesian(h, K, eps, dt, dW)
    a2 = hc.real**2 + hc.imag**2
    ok = a2 < 1
    with np.errstate(invalid="ignore", divide="ignore"):
        ell = np.log1p(-np.minimum(a2, 1.0))
    return hc, ell, ok


def _polar_update(h, ell, K, eps, dt, dW):
    th, el = _heun_polar(np.angle(h), ell, K, eps, dt, dW)
    with np.errstate(invalid="ignore"):
        r = np.sqrt(-np.expm1(el))
    ok = np.isfinite(el) & (el <= 0)
    return r * np.exp(1j * th), el, ok


def _boundary_step(theta, K, eps, dt, dW):
    noise = SQRT2 * eps * dW
    a0 = -2.0 * K * np.sin(theta)
    pred = theta + a0 * dt + noise
    return wrap_angle(theta + 0.5 * (a0 - 2.0 * K * np.sin(pred)) * dt + noise)


def _split_half(h, ell, D, K, dt):
    a = 0.5 * K * dt
    c, s = math.cosh(a), math.sinh(a)
    q = h * s + c
    lq = np.log(np.abs(q))
    return (h * c + s) / q, ell - 2.0 * lq, D + lq / K


def _split_step(h, ell, D, K, eps, dt, dW):
    """Strang step ``drift(dt/2), rotation, drift(dt/2)`` on arrays; never leaves the disc."""
    h, ell, D = _split_half(h, ell, D, K, dt)
    h = h * np.exp(1j * SQRT2 * eps * dW)
    h, ell, D = _split_half(h, ell, D, K, dt)
    # pin the modulus to the tracked defect (exactly 1 on the circle)
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.sqrt(-np.expm1(ell)) / np.abs(h)
    h = np.where(np.isfinite(scale), h * scale, h)
    return h, ell, D


def _refine(h, ell, D, K, eps, dt, dW, bridge, depth, max_halvings):
    """Replace one rejected step by two half steps on the Brownian bridge."""
    if depth >= max_halvings:
        raise StepRejectionExhausted(
            f"{max_halvings} halvings still leave the unit disc (dt={dt:g})")
    z = float(bridge.normals(1)[0])
    half = 0.5 * dt
    for piece in split_increment(dW, dt, z):
        hn, en, ok = _interior_step(np.array([h]), np.array([ell]), K, eps, half, np.array([piece]))
        if ok[0]:
            D += 0.5 * half * (h.real + hn[0].real)
            h, ell = complex(hn[0]), float(en[0])
        else:
            h, ell, D = _refine(h, ell, D, K, eps, half, piece, bridge, depth + 1, max_halvings)
    return h, ell, D


# -- scalar API ---------------------------------------------------------------

def _check_dt(dt, params):
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt!r}")
    if dt > params.dt_max * (1 + 1e-12):
        raise ValueError(f"dt={dt:g} exceeds dt_max={params.dt_max:g}")


def step_interior(state: CorrelationState, params: ModelParams, dt: float, dW: float,
                  bridge: NoiseStream | None = None,
                  max_halvings: int = MAX_HALVINGS) -> CorrelationState:
    """Advance an interior state by one stochastic Heun step.

    ``bridge`` supplies the midpoint draws used if the step has to be halved;
    by default a fixed auxiliary stream is used so the call stays deterministic.
    """
    if state.on_boundary or abs(state.h) >= 1:
        raise DomainError("step_interior requires |h| < 1")
    _check_dt(dt, params)
    h0 = np.array([complex(state.h)])
    hn, en, ok = _interior_step(h0, np.array([state.log_defect]), params.K, params.eps, dt,
                                np.array([float(dW)]))
    if ok[0]:
        D = state.drift_integral + 0.5 * dt * (state.h.real + hn[0].real)
        return CorrelationState(complex(hn[0]), state.t + dt, D, float(en[0]))
    if bridge is None:
        bridge = NoiseStream(BRIDGE_TAG, 0)
    try:
        h, ell, D = _refine(complex(state.h), state.log_defect, state.drift_integral,
                            params.K, params.eps, dt, float(dW), bridge, 0, max_halvings)
    except StepRejectionExhausted as exc:
        raise StepRejectionExhausted(str(exc), t=state.t) from None
    return CorrelationState(h, state.t + dt, D, ell)


def step_boundary(state: BoundaryState, params: ModelParams, dt: float, dW: float) -> BoundaryState:
    """Advance the angle by one Heun step (additive noise: Ito equals Stratonovich)."""
    _check_dt(dt, params)
    theta = _boundary_step(state.theta, params.K, params.eps, dt, float(dW))
    return BoundaryState(theta, state.t + dt)


def step_split(state: CorrelationState, params: ModelParams, dt: float,
               dW: float) -> CorrelationState:
    """Advance an interior or boundary state by one splitting step."""
    _check_dt(dt, params)
    h, ell, D = _split_step(np.array([complex(state.h)]), np.array([state.log_defect]),
                            state.drift_integral, params.K, params.eps, dt, float(dW))
    return CorrelationState(complex(h[0]), state.t + dt, float(D[0]), float(ell[0]))


def deterministic_solution(h0: complex, K: float, t: float) -> complex:
    """Closed-form solution of ``dh/dt = K (1 - h^2)``.

    Writing ``w = 1/(1 - h) - 1/2`` linearizes the equation to ``w' = 2K w``::

        h(t) = 1 - 1 / ((1/(1 - h0) - 1/2) exp(2 K t) + 1/2)
    """
    h0 = complex(h0)
    if abs(h0) > 1 + TOL_BALL:
        raise DomainError(f"|h0| = {abs(h0):.17g} exceeds 1")
    if t < 0:
        raise ValueError("t must be nonnegative")
    if h0 == 1:
        return 1 + 0j
    w0 = 1 / (1 - h0) - 0.5
    if w0 == 0:  # h0 = -1, the unstable equilibrium
        return h0
    return 1 - 1 / (w0 * cmath.exp(2 * K * t) + 0.5)


def modulus_identity_residual(state: CorrelationState, h0: complex, params: ModelParams) -> float:
    """Distance of ``|h(t)|^2`` from ``(|h0|^2 - 1) exp(-2K int Re h) + 1``."""
    predicted = (abs(h0) ** 2 - 1) * math.exp(-2 * params.K * state.drift_integral) + 1
    return abs(abs(state.h) ** 2 - predicted)


# -- paths and ensembles ------------------------------------------------------

@dataclass
class CorrelationPath(Sequence):
    """Recorded states of one trajectory, stored column-wise.

    Indexing yields :class:`CorrelationState` objects, so the path can be used
    wherever a sequence of states is expected.
    """

    t: np.ndarray
    h: np.ndarray
    drift_integral: np.ndarray
    log_defect: np.ndarray
    boundary: bool = False
    rejections: int = 0
    min_log_defect: float = 0.0

    def __len__(self):
        return len(self.t)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        return CorrelationState(complex(self.h[i]), float(self.t[i]),
                                float(self.drift_integral[i]), float(self.log_defect[i]))


@dataclass
class EnsembleResult:
    """Recorded values of many trajectories: arrays of shape (n_traj, n_records)."""

    times: np.ndarray
    h: np.ndarray
    drift_integral: np.ndarray
    log_defect: np.ndarray
    boundary: np.ndarray
    stream_ids: np.ndarray
    rejections: np.ndarray
    min_log_defect: np.ndarray

    @property
    def n_traj(self) -> int:
        return self.h.shape[0]

    def path(self, i: int) -> CorrelationPath:
        return CorrelationPath(self.times, self.h[i], self.drift_integral[i], self.log_defect[i],
                               bool(self.boundary[i]), int(self.rejections[i]),
                               float(self.min_log_defect[i]))


def _is_boundary(h0) -> np.ndarray:
    return np.abs(h0) > 1 - TOL_BALL


SCHEMES = ("heun", "splitting")


def _check_scheme(scheme):
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")


def _integrate_block(h0, params, dt, n_steps, record_steps, draw, bridge_for, stream_ids,
                     scheme="heun"):
    """Integrate trajectories with initial values ``h0`` for ``n_steps`` steps.

    ``draw(n)`` returns the next ``n`` increments of every trajectory as an
    array of shape ``(M, n)``; ``bridge_for(i, step)`` returns the auxiliary
    stream used if step ``step`` of trajectory ``i`` must be halved.
    """
    K, eps = params.K, params.eps
    h0 = np.asarray(h0, dtype=complex)
    M = h0.shape[0]
    bnd = _is_boundary(h0)
    inn = ~bnd
    theta = np.angle(h0[bnd])
    h = h0.copy()
    h[bnd] = np.exp(1j * theta)
    a2 = np.minimum(np.abs(h0) ** 2, 1.0)
    with np.errstate(divide="ignore"):
        ell = np.where(bnd, -np.inf, np.log1p(-a2))
    D = np.zeros(M)
    rejections = np.zeros(M, dtype=np.int64)
    min_ell = ell.copy()

    R = len(record_steps)
    out_h = np.empty((M, R), dtype=complex)
    out_D = np.empty((M, R))
    out_ell = np.empty((M, R))
    rec = 0

    def record(step):
        nonlocal rec
        while rec < R and record_steps[rec] == step:
            out_h[:, rec] = h
            out_D[:, rec] = D
            out_ell[:, rec] = ell
            rec += 1

    all_bnd = bool(bnd.all())
    all_inn = bool(inn.all())
    record(0)
    step = 0
    if scheme == "splitting":
        while step < n_steps:
            n = min(_CHUNK, n_steps - step)
            dW = draw(n)
            for j in range(n):
                h, ell, D = _split_step(h, ell, D, K, eps, dt, dW[:, j])
                np.minimum(min_ell, ell, out=min_ell)
                record(step + j + 1)
            step += n
        return out_h, out_D, out_ell, bnd, rejections, min_ell
    while step < n_steps:
        n = min(_CHUNK, n_steps - step)
        dW = draw(n)
        for j in range(n):
            w = dW[:, j]
            if all_bnd:
                theta = _boundary_step(theta, K, eps, dt, w)
                hb = np.exp(1j * theta)
                D += 0.5 * dt * (h.real + hb.real)
                h = hb
            elif bnd.any():
                tn = _boundary_step(theta, K, eps, dt, w[bnd])
                hb = np.exp(1j * tn)
                D[bnd] += 0.5 * dt * (h[bnd].real + hb.real)
                h[bnd] = hb
                theta = tn
            if all_inn:
                hn, en, ok = _interior_step(h, ell, K, eps, dt, w)
                Dn = D + 0.5 * dt * (h.real + hn.real)
                if ok.all():
                    h, ell, D = hn, en, Dn
                    np.minimum(min_ell, en, out=min_ell)
                    record(step + j + 1)
                    continue
            if inn.any():
                hi, ei = h[inn], ell[inn]
                hn, en, ok = _interior_step(hi, ei, K, eps, dt, w[inn])
                Dn = D[inn] + 0.5 * dt * (hi.real + hn.real)
                if not ok.all():
                    idx = np.flatnonzero(inn)
                    for k in np.flatnonzero(~ok):
                        i = idx[k]
                        try:
                            hk, ek, Dk = _refine(complex(hi[k]), float(ei[k]), float(D[i]), K, eps,
                                                 dt, float(w[i]), bridge_for(i, step + j), 0,
                                                 MAX_HALVINGS)
                        except StepRejectionExhausted as exc:
                            raise StepRejectionExhausted(
                                f"{exc} at t={(step + j) * dt:g} in stream {stream_ids[i]}",
                                t=(step + j) * dt, stream_id=int(stream_ids[i])) from None
                        hn[k], en[k], Dn[k] = hk, ek, Dk
                        rejections[i] += 1
                h[inn], ell[inn], D[inn] = hn, en, Dn
                min_ell[inn] = np.minimum(min_ell[inn], en)
            record(step + j + 1)
        step += n
    return out_h, out_D, out_ell, bnd, rejections, min_ell


def _record_steps(T, dt, record_times=None, record_stride=None):
    n_steps = int(round(T / dt))
    if abs(n_steps * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"T={T:g} is not a multiple of dt={dt:g}")
    if record_times is not None:
        steps = np.unique(np.round(np.asarray(record_times, dtype=float) / dt).astype(np.int64))
        if steps.size and (steps[0] < 0 or steps[-1] > n_steps):
            raise ValueError("record times outside [0, T]")
    else:
        stride = int(record_stride or 1)
        if stride < 1:
            raise ValueError("record_stride must be >= 1")
        steps = np.arange(0, n_steps + 1, stride, dtype=np.int64)
    return n_steps, steps


def _check_h0(h0):
    if np.any(np.abs(h0) > 1 + TOL_BALL):
        raise DomainError("initial values must lie in the closed unit disc")


def simulate_path(h0: complex, params: ModelParams, T: float, dt: float, noise: NoiseStream,
                  record_stride: int = 1, scheme: str = "heun") -> CorrelationPath:
    """Integrate one trajectory, recording every ``record_stride``-th step.

    Initial values within ``TOL_BALL`` of the circle use the boundary scheme.
    The stream's counter advances by the number of increments consumed.
    """
    _check_h0(h0)
    _check_dt(dt, params)
    _check_scheme(scheme)
    n_steps, steps = _record_steps(T, dt, record_stride=record_stride)
    out = _integrate_block(np.array([complex(h0)]), params, dt, n_steps, steps,
                           lambda n: noise.increments(n, dt)[None, :],
                           lambda i, step: noise.spawn(step), np.array([noise.stream_id]),
                           scheme)
    h, D, ell, bnd, rej, min_ell = out
    return CorrelationPath(steps * dt, h[0], D[0], ell[0], bool(bnd[0]), int(rej[0]),
                           float(min_ell[0]))


def simulate_increments(h0, params: ModelParams, dt: float, dW, record_stride: int = 1,
                        bridge: NoiseStream | None = None, scheme: str = "heun"):
    """Integrate along prescribed increments.

    ``dW`` of shape ``(n_steps,)`` drives one trajectory and gives a
    :class:`CorrelationPath`; shape ``(M, n_steps)`` drives ``M`` trajectories
    (``h0`` scalar or of length ``M``) and gives an :class:`EnsembleResult`.
    """
    _check_dt(dt, params)
    _check_scheme(scheme)
    dW = np.asarray(dW, dtype=float)
    single = dW.ndim == 1
    dW = np.atleast_2d(dW)
    M = dW.shape[0]
    h0 = np.broadcast_to(np.asarray(h0, dtype=complex), (M,)).copy()
    _check_h0(h0)
    n_steps, steps = _record_steps(dW.shape[1] * dt, dt, record_stride=record_stride)
    bridge = bridge or NoiseStream(BRIDGE_TAG, 1)
    pos = 0

    def draw(n):
        nonlocal pos
        chunk = dW[:, pos:pos + n]
        pos += n
        return chunk

    h, D, ell, bnd, rej, min_ell = _integrate_block(
        h0, params, dt, n_steps, steps, draw,
        lambda i, step: bridge.spawn((i << 40) + step), np.full(M, -1), scheme)
    if single:
        return CorrelationPath(steps * dt, h[0], D[0], ell[0], bool(bnd[0]), int(rej[0]),
                               float(min_ell[0]))
    return EnsembleResult(steps * dt, h, D, ell, bnd, np.full(M, -1), rej, min_ell)


def simulate_ensemble(h0, params: ModelParams, T: float, dt: float, master_seed: int,
                      n_traj: int | None = None, stream_ids=None, record_times=None,
                      record_stride: int | None = None, workers: int = 1,
                      block_size: int = 2048, scheme: str = "heun") -> EnsembleResult:
    """Integrate independent trajectories, trajectory ``i`` driven by stream ``stream_ids[i]``.

    ``h0`` is a scalar or one value per trajectory.  Reusing a stream id in
    ``stream_ids`` drives two trajectories with the same Brownian path, which is
    how synchronous couplings are built.  Trajectories are processed in blocks
    of fixed size and merged in order, so the output does not depend on
    ``workers``.
    """
    _check_dt(dt, params)
    _check_scheme(scheme)
    if stream_ids is None:
        if n_traj is None:
            raise ValueError("give n_traj or stream_ids")
        stream_ids = np.arange(n_traj, dtype=np.int64)
    stream_ids = np.asarray(stream_ids, dtype=np.int64)
    M = len(stream_ids)
    h0 = np.broadcast_to(np.asarray(h0, dtype=complex), (M,)).copy()
    _check_h0(h0)
    n_steps, steps = _record_steps(T, dt, record_times, record_stride)

    def run_block(lo):
        ids = stream_ids[lo:lo + block_size]
        streams = [NoiseStream(master_seed, int(s)) for s in ids]

        def draw(n):
            return np.stack([s.increments(n, dt) for s in streams])

        return _integrate_block(h0[lo:lo + block_size], params, dt, n_steps, steps, draw,
                                lambda i, step: streams[i].spawn(step), ids, scheme)

    starts = range(0, M, block_size)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run_block, starts))
    else:
        parts = [run_block(lo) for lo in starts]
    h, D, ell, bnd, rej, min_ell = (np.concatenate(col) for col in zip(*parts))
    return EnsembleResult(steps * dt, h, D, ell, bnd, stream_ids, rej, min_ell)
