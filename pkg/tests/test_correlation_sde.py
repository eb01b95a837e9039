import cmath
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from stochlohe.correlation_sde import (BoundaryState, CorrelationState, deterministic_solution,
                                       ito_drift, modulus_identity_residual, simulate_ensemble,
                                       simulate_increments, simulate_path, step_boundary,
                                       step_interior, step_split)
from stochlohe.errors import DomainError, StepRejectionExhausted
from stochlohe.noise import NoiseStream
from stochlohe.params import ModelParams


def rk4_reference(h0, K, t, n=4000):
    sol = integrate.solve_ivp(lambda s, y: [K * (1 - complex(y[0], y[1]) ** 2).real,
                                            K * (1 - complex(y[0], y[1]) ** 2).imag],
                              (0, t), [h0.real, h0.imag], method="RK45", rtol=1e-12, atol=1e-14)
    return complex(sol.y[0, -1], sol.y[1, -1])


# -- drift --------------------------------------------------------------------

def test_ito_drift_examples():
    assert ito_drift(0, ModelParams(1, 1)) == pytest.approx(1 + 0j)
    assert ito_drift(1, ModelParams(1, 0.5)) == pytest.approx(-0.25 + 0j)
    assert ito_drift(1j, ModelParams(1, 1)) == pytest.approx(2 - 1j)


def test_heun_limit_matches_ito_euler_maruyama():
    # Euler-Maruyama with the Ito drift and Heun on the Stratonovich form share
    # a strong limit; Euler-Maruyama with the uncorrected drift does not
    p = ModelParams(1.0, 1.0)
    dt, n, M = 2.0**-12, 2**12, 64
    dW = np.random.default_rng(3).standard_normal((M, n)) * math.sqrt(dt)
    heun = simulate_increments(0.3, p, dt, dW, record_stride=n).h[:, -1]
    b = 1j * math.sqrt(2) * p.eps
    h_ito = np.full(M, 0.3 + 0j)
    h_str = h_ito.copy()
    for k in range(n):
        h_ito = h_ito + ito_drift(h_ito, p) * dt + b * h_ito * dW[:, k]
        h_str = h_str + p.K * (1 - h_str**2) * dt + b * h_str * dW[:, k]
    err_ito = np.mean(np.abs(heun - h_ito))
    err_str = np.mean(np.abs(heun - h_str))
    assert err_ito < 0.03
    assert err_ito < 0.1 * err_str


# -- single steps -------------------------------------------------------------

def test_step_interior_from_origin_without_noise():
    s = step_interior(CorrelationState(0j), ModelParams(1, 1), 1e-3, 0.0)
    assert s.h == pytest.approx(1e-3, abs=1e-6)
    assert s.t == pytest.approx(1e-3)
    assert s.drift_integral == pytest.approx(0.5e-6, rel=1e-3)


def test_step_interior_rejects_boundary_and_large_dt():
    with pytest.raises(DomainError):
        step_interior(CorrelationState(1 + 0j), ModelParams(1, 1), 1e-3, 0.0)
    with pytest.raises(ValueError):
        step_interior(CorrelationState(0j), ModelParams(1, 1), 0.5, 0.0)


def test_rejected_step_is_refined_or_exhausted():
    p = ModelParams(1.0, 1.0)
    state = CorrelationState(0.49 + 0j)
    with pytest.raises(StepRejectionExhausted):
        step_interior(state, p, 0.01, 50.0, max_halvings=0)
    s = step_interior(state, p, 0.01, 50.0)
    assert abs(s.h) < 1 and math.isfinite(s.log_defect)
    assert s.t == pytest.approx(0.01)


def test_step_boundary_examples():
    p = ModelParams(1.0, 1.0)
    assert step_boundary(BoundaryState(0.0), p, 1e-3, 0.0).theta == 0.0
    assert step_boundary(BoundaryState(math.pi), p, 1e-3, 0.0).theta == pytest.approx(math.pi)
    th = step_boundary(BoundaryState(math.pi / 2), p, 1e-3, 0.0).theta
    assert th == pytest.approx(math.pi / 2 - 2e-3, abs=1e-8)


@settings(max_examples=50, deadline=None)
@given(st.floats(-10, 10), st.floats(-0.3, 0.3))
def test_boundary_angle_is_wrapped(theta, dW):
    s = step_boundary(BoundaryState(theta), ModelParams(2.0, 1.0), 0.01, dW)
    assert -math.pi < s.theta <= math.pi
    assert abs(abs(s.h) - 1) <= 1e-15


# -- closed form --------------------------------------------------------------

def test_deterministic_solution_fixed_points():
    for K in (0.5, 3.0):
        for t in (0.0, 1.0, 50.0):
            assert deterministic_solution(1, K, t) == 1
            assert deterministic_solution(-1, K, t) == -1


def test_deterministic_solution_from_origin_is_tanh():
    assert deterministic_solution(0, 1.0, 2.0) == pytest.approx(math.tanh(2.0), abs=1e-14)
    assert deterministic_solution(0, 1.0, 1.0) == pytest.approx(math.tanh(1.0), abs=1e-14)
    assert deterministic_solution(0, 1.0, 1.0) == pytest.approx(0.76159, abs=1e-5)
    assert deterministic_solution(0, 1.0, 2.0).real == pytest.approx(1 - 2 / (math.exp(4) + 1))


@pytest.mark.parametrize("h0", [0.5, -0.9, 0.3 + 0.6j, -0.2 - 0.7j])
def test_deterministic_solution_matches_rk(h0):
    for t in (0.3, 1.7):
        assert deterministic_solution(h0, 1.3, t) == pytest.approx(rk4_reference(h0, 1.3, t),
                                                                   abs=1e-9)


def test_deterministic_solution_domain():
    with pytest.raises(DomainError):
        deterministic_solution(1.01, 1.0, 1.0)
    assert deterministic_solution(0.5, 1.0, 1.0).imag == 0


def test_heun_is_second_order_on_the_ode():
    p = ModelParams(1.0, 0.0)
    errs = []
    for dt in (4e-3, 2e-3, 1e-3):
        n = round(2.0 / dt)
        path = simulate_increments(0.5, p, dt, np.zeros(n))
        ref = np.array([deterministic_solution(0.5, 1.0, t) for t in path.t])
        errs.append(np.max(np.abs(path.h - ref)))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders > 1.8)


def test_monotone_attraction_without_noise():
    p = ModelParams(2.0, 0.0)
    for h0 in (-0.95, -0.3, 0.0, 0.8):
        path = simulate_increments(h0, p, 1e-3, np.zeros(3000), record_stride=10)
        assert np.all(np.abs(path.h.imag) <= 1e-15)
        assert np.all(np.diff(path.h.real) > 0)
        assert path.h[-1].real < 1


# -- modulus identity ---------------------------------------------------------

def test_modulus_identity_deterministic():
    p = ModelParams(1.0, 0.0)
    path = simulate_increments(0.5, p, 1e-3, np.zeros(1000))
    res = max(modulus_identity_residual(s, 0.5, p) for s in path)
    assert res <= 1e-4
    # the drift integral matches the exact one, log cosh form of int tanh
    exact = integrate.quad(lambda t: deterministic_solution(0.5, 1.0, t).real, 0, 1)[0]
    assert path.drift_integral[-1] == pytest.approx(exact, abs=1e-6)


def test_modulus_identity_stochastic():
    p = ModelParams(1.0, 0.5)
    ens = simulate_ensemble(0.3, p, 5.0, 1e-4, master_seed=21, n_traj=200, record_stride=500)
    res = np.array([max(modulus_identity_residual(s, 0.3, p) for s in ens.path(i))
                    for i in range(ens.n_traj)])
    assert np.quantile(res, 0.99) <= 1e-2


def test_modulus_identity_residual_shrinks_with_dt():
    p = ModelParams(1.0, 0.5)
    rng = np.random.default_rng(8)
    fine = rng.standard_normal((32, 2**12)) * math.sqrt(2.0**-12)
    out = []
    for k in (4, 2, 0):
        dW = fine.reshape(32, -1, 2**k).sum(axis=2)
        ens = simulate_increments(0.3, p, 2.0**-12 * 2**k, dW)
        out.append(np.mean([modulus_identity_residual(ens.path(i)[-1], 0.3, p)
                            for i in range(32)]))
    assert out[0] > out[1] > out[2]


def test_boundary_modulus_identity_is_exact():
    p = ModelParams(1.0, 1.0)
    path = simulate_path(1j, p, 5.0, 0.01, NoiseStream(4, 0))
    assert path.boundary
    assert np.all(np.abs(path.h) == pytest.approx(1.0, abs=1e-15))
    assert all(modulus_identity_residual(s, 1j, p) <= 1e-15 for s in path)


# -- paths --------------------------------------------------------------------

def test_strong_convergence_order():
    p = ModelParams(1.0, 0.5)
    M, T = 32, 1.0
    base = [2.0**-k for k in (7, 8, 9, 10)]
    dt_ref = base[0] / 2**10
    n_ref = round(T / dt_ref)
    dW = np.random.default_rng(17).standard_normal((M, n_ref)) * math.sqrt(dt_ref)
    ref = simulate_increments(0.9, p, dt_ref, dW, record_stride=n_ref).h[:, -1]
    errs = []
    for dt in base:
        r = round(dt / dt_ref)
        coarse = dW.reshape(M, -1, r).sum(axis=2)
        h = simulate_increments(0.9, p, dt, coarse, record_stride=coarse.shape[1]).h[:, -1]
        errs.append(np.mean(np.abs(h - ref)))
    slope = np.polyfit(np.log(base), np.log(errs), 1)[0]
    assert slope >= 0.5


def test_boundary_start_stays_on_circle():
    for h0 in (1 + 0j, -1 + 0j, cmath.exp(0.7j)):
        path = simulate_path(h0, ModelParams(1.0, 1.0), 10.0, 0.01, NoiseStream(9, 1))
        assert path.boundary
        assert np.max(np.abs(np.abs(path.h) - 1)) <= 1e-15


def test_path_is_reproducible_and_stream_dependent():
    p = ModelParams(1.0, 0.8)
    a = simulate_path(0.2j, p, 2.0, 0.01, NoiseStream(5, 3))
    b = simulate_path(0.2j, p, 2.0, 0.01, NoiseStream(5, 3))
    c = simulate_path(0.2j, p, 2.0, 0.01, NoiseStream(5, 4))
    assert np.array_equal(a.h, b.h)
    assert not np.array_equal(a.h, c.h)


def test_ensemble_rows_match_single_paths():
    p = ModelParams(1.0, 0.8)
    ens = simulate_ensemble(0.1, p, 1.0, 0.01, master_seed=5, stream_ids=[2, 7])
    for i, sid in enumerate([2, 7]):
        single = simulate_path(0.1, p, 1.0, 0.01, NoiseStream(5, sid))
        assert np.array_equal(ens.h[i], single.h)


def test_ensemble_independent_of_workers():
    p = ModelParams(1.0, 0.8)
    a = simulate_ensemble(0.1, p, 1.0, 0.01, 5, n_traj=300, workers=1, block_size=64)
    b = simulate_ensemble(0.1, p, 1.0, 0.01, 5, n_traj=300, workers=4, block_size=64)
    assert np.array_equal(a.h, b.h) and np.array_equal(a.drift_integral, b.drift_integral)


def test_record_grid_must_divide():
    with pytest.raises(ValueError):
        simulate_path(0.1, ModelParams(1, 1), 1.005, 0.01, NoiseStream(0, 0))
    with pytest.raises(DomainError):
        simulate_path(1.5, ModelParams(1, 1), 1.0, 0.01, NoiseStream(0, 0))


def test_time_scaling_law():
    p, c = ModelParams(1.0, 0.5), 2.0
    q = p.scaled(c)
    a = simulate_ensemble(0.3 + 0.2j, p, 2.0, 0.01, master_seed=1, n_traj=10_000,
                          record_stride=200)
    b = simulate_ensemble(0.3 + 0.2j, q, 2.0 * c, 0.01, master_seed=2, n_traj=10_000,
                          record_stride=400)
    for f in (np.real, np.imag):
        assert stats.ks_2samp(f(a.h[:, -1]), f(b.h[:, -1])).pvalue > 0.01


def test_mean_modulus_approaches_one():
    ens = simulate_ensemble(0j, ModelParams(1.0, 0.8), 10.0, 0.01, master_seed=3,
                            n_traj=10_000, record_stride=1000)
    assert np.mean(np.abs(ens.h[:, -1])) >= 0.9


# -- splitting scheme ---------------------------------------------------------

def test_split_step_keeps_disc_and_circle():
    p = ModelParams(1.0, 1.0)
    s = step_split(CorrelationState(0.999 + 0j), p, 0.01, 3.0)
    assert abs(s.h) < 1
    b = step_split(CorrelationState(cmath.exp(2j)), p, 0.01, 0.05)
    assert b.on_boundary and abs(abs(b.h) - 1) <= 1e-15


def test_split_step_is_exact_without_noise():
    # the drift half steps are exact Mobius flows of the ODE
    s = CorrelationState(0.5 + 0j)
    for _ in range(10):
        s = step_split(s, ModelParams(1.0, 0.0), 0.01, 0.0)
    assert s.h == pytest.approx(deterministic_solution(0.5, 1.0, 0.1), abs=1e-14)


def test_splitting_modulus_identity_to_rounding():
    p = ModelParams(1.0, 1.0)
    path = simulate_path(0.5, p, 20.0, 0.01, NoiseStream(6, 0), scheme="splitting")
    assert max(modulus_identity_residual(s, 0.5, p) for s in path) <= 1e-12


def test_schemes_share_the_strong_limit():
    p = ModelParams(1.0, 0.5)
    dt = 2.0**-12
    dW = np.random.default_rng(4).standard_normal((16, 2**12)) * math.sqrt(dt)
    a = simulate_increments(0.6j, p, dt, dW, record_stride=2**12).h[:, -1]
    b = simulate_increments(0.6j, p, dt, dW, record_stride=2**12, scheme="splitting").h[:, -1]
    assert np.max(np.abs(a - b)) < 1e-3
    with pytest.raises(ValueError):
        simulate_increments(0.6j, p, dt, dW, scheme="euler")
