"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Thresholds are the stated ones; nothing here is tuned to make a criterion pass.
"""

import math
import os

import numpy as np
import pytest
from scipy import special

from stochlohe.correlation_sde import (deterministic_solution, simulate_ensemble,
                                       simulate_increments, simulate_path)
from stochlohe.ergodic_stats import (batch_means_se, chi_square_pvalue, circular_edges,
                                     coupling_gap, distance_histogram, ergodic_average,
                                     escape_statistics, histogram, noise_floor, tv_decay_fit,
                                     tv_distance, two_sample_noise_floor)
from stochlohe.experiment_runner import cross_oracle_table, parse_config, run
from stochlohe.invariant_measure import (StationaryDensity, distance_quantile, ldp_bounds,
                                         ldp_empirical_slope, mean_re, sample)
from stochlohe.noise import NoiseStream
from stochlohe.params import ModelParams

pytestmark = pytest.mark.slow

WORKERS = min(8, os.cpu_count() or 1)


def on_circle(theta):
    return np.cos(theta) + 1j * np.sin(theta)


def test_c01_deterministic_oracle(verdict):
    worst, orders, bad = 0.0, [], []
    for K in (0.5, 1.0, 4.0):
        for h0 in (-0.9, 0.0, 0.5, 0.99):
            errs = []
            for dt in (2e-3, 1e-3, 5e-4):
                path = simulate_increments(h0, ModelParams(K, 0.0), dt, np.zeros(round(10 / dt)))
                ref = np.array([deterministic_solution(h0, K, t) for t in path.t])
                errs.append(float(np.max(np.abs(path.h - ref))))
            if errs[1] > 1e-6:
                bad.append(f"K={K:g},h0={h0:g}:{errs[1]:.2e}")
            worst = max(worst, errs[1])
            orders += [math.log2(errs[0] / errs[1]), math.log2(errs[1] / errs[2])]
    order_ok = all(abs(o - 2) <= 0.2 for o in orders)
    ok = verdict(1, "deterministic oracle", worst <= 1e-6 and order_ok,
                 f"max error at dt=1e-3 {worst:.3g} (<= 1e-6), observed orders "
                 f"{min(orders):.3f}..{max(orders):.3f}; over tolerance: {', '.join(bad) or 'none'}")
    assert ok


def test_c02_cross_oracle(verdict):
    cfg = parse_config("[experiment]\nkind = cross_oracle\n",
                       ["K=1", "eps=0.5", "T=5", "dt=0.001", "n_points=256", "length=40",
                        "halvings=3", "master_seed=2"])
    rows, _, _ = cross_oracle_table(cfg)
    errs = [r[2] for r in rows]
    dec = all(b < a for a, b in zip(errs, errs[1:]))
    ok = verdict(2, "cross-oracle", errs[0] <= 0.05 and dec,
                 "sup errors over dt=1e-3/2^k: " + ", ".join(f"{e:.3g}" for e in errs))
    assert ok


def test_c03_mass_conservation(verdict):
    cfg = parse_config("[experiment]\nkind = cross_oracle\n",
                       ["K=1", "eps=0.5", "T=5", "dt=0.001", "n_points=256", "length=40",
                        "halvings=1", "master_seed=3", "tol_mass_step=1"])
    rows, _, _ = cross_oracle_table(cfg)
    defect, lr = rows[0][3], rows[0][4]
    ok = verdict(3, "mass conservation", defect <= 1e-8 and lr <= 1e-3,
                 f"max pre-rescale defect {defect:.3g} (<= 1e-8), sum |log rescale| {lr:.3g} "
                 f"(<= 1e-3) at dt=1e-3, T=5")
    assert ok


def test_c04_ball_invariance(verdict):
    p = ModelParams(1.0, 1.0)
    starts = 0.95 * on_circle(np.linspace(-3, 3, 10))
    ens = simulate_ensemble(starts, p, 1000.0, 0.01, master_seed=4, n_traj=10,
                            record_stride=100)
    interior_ok = bool(np.all(np.isfinite(ens.min_log_defect)))
    bnd = simulate_ensemble(on_circle(np.linspace(-3, 3, 10)), p, 1000.0, 0.01, master_seed=5,
                            n_traj=10, record_stride=1)
    dev = float(np.max(np.abs(np.abs(bnd.h) - 1)))
    ok = verdict(4, "ball invariance", interior_ok and dev <= 4 * np.finfo(float).eps,
                 f"10^6 interior steps, no exhausted rejection, {int(ens.rejections.sum())} "
                 f"refined steps, min log(1-|h|^2) = {ens.min_log_defect.min():.3g}; "
                 f"boundary max ||h|-1| = {dev:.2g} over 10^6 steps")
    assert ok


def test_c05_stationary_density(verdict):
    sd = StationaryDensity.from_kappa(2.0)
    masses = sd.bin_masses(circular_edges(100))
    draws = sample(sd, 10**6, NoiseStream(5, 0))
    pval = chi_square_pvalue(histogram(draws, 100), masses)
    n, n_bins = 10**4, 50
    start = sample(sd, n, NoiseStream(5, 1))
    ens = simulate_ensemble(on_circle(start), ModelParams(1.0, 1.0), 10.0, 0.01, master_seed=6,
                            n_traj=n, record_times=[1.0, 5.0, 10.0], workers=WORKERS)
    bm = sd.bin_masses(circular_edges(n_bins))
    level = noise_floor(bm, n).level(3)
    col = {round(t / 0.01): k for k, t in enumerate(ens.times)}
    tvs = [tv_distance(histogram(np.angle(ens.h[:, col[s]]), n_bins), bm) for s in (100, 500, 1000)]
    ok = verdict(5, "stationary density", pval > 1e-3 and max(tvs) <= level,
                 f"chi2 p = {pval:.3g} (> 0.001); TV at t=1,5,10: "
                 + ", ".join(f"{v:.4f}" for v in tvs) + f" (<= 3 sigma floor {level:.4f})")
    assert ok


def test_c06_mean_re(verdict):
    sd = StationaryDensity.from_kappa(2.0)
    m = mean_re(sd)
    oracle = float(special.i1(2.0) / special.i0(2.0))
    p = ModelParams(1.0, 1.0)
    g0 = on_circle(sample(sd, 1, NoiseStream(6, 0))[0])
    path = simulate_path(g0, p, 1000.0, 0.01, NoiseStream(6, 1))
    avg, se = ergodic_average(path), batch_means_se(path)
    ok = verdict(6, "stationary mean of Re", abs(m - oracle) <= 1e-10 and abs(avg - m) <= 3 * se,
                 f"quadrature {m:.12f} vs Bessel {oracle:.12f}; ergodic average {avg:.5f} "
                 f"+- {se:.5f} (3 SE)")
    assert ok


def test_c07_convergence_from_interior(verdict):
    p = ModelParams(1.0, 0.5)
    Ts = [5.0, 10.0, 20.0, 40.0]
    n = 10**4
    frac = escape_statistics(p, 0.0, [0.9], Ts, n, dt=0.01, master_seed=7, workers=WORKERS)[:, 0]
    se = np.sqrt(frac * (1 - frac) / n)
    rise = [frac[i + 1] - frac[i] - 2 * math.hypot(se[i], se[i + 1]) for i in range(3)]
    ok = verdict(7, "convergence from the interior", frac[2] <= 0.05 and max(rise) <= 0,
                 "P(|h(T)| <= 0.9) at T=5,10,20,40: " + ", ".join(f"{f:.4f}" for f in frac)
                 + " (T=20 <= 0.05, nonincreasing within 2 sigma)")
    assert ok


def test_c08_coupling_gap(verdict):
    p = ModelParams(1.0, 1.0)
    n = 1000
    sd = StationaryDensity.from_params(p)
    g0 = on_circle(sample(sd, n, NoiseStream(8, 0)))
    ids = np.arange(n)
    ens = simulate_ensemble(np.r_[np.full(n, 0.5 + 0j), g0], p, 100.0, 0.01, master_seed=8,
                            stream_ids=np.r_[ids, ids], record_stride=10, workers=WORKERS,
                            scheme="splitting")
    terminal, excess = [], -math.inf
    for i in range(n):
        gap, bound = coupling_gap(ens.path(i), ens.path(n + i), p.K)
        terminal.append(gap[-1])
        excess = max(excess, float(np.max(gap - bound)))
    share = float(np.mean(np.array(terminal) <= 1e-3))
    ok = verdict(8, "coupling gap", share >= 0.99 and excess <= 1e-6,
                 f"terminal gap <= 1e-3 in {100 * share:.1f}% of runs (>= 99%); "
                 f"max(gap - bound) = {excess:.3g} (<= 1e-6)")
    assert ok


def test_c09_tv_decay(verdict):
    p = ModelParams(1.0, 1.0)
    fits = [tv_decay_fit(p, [x], 20.0, 10**5, 50, dt=0.01, master_seed=9 + i, workers=WORKERS)
            for i, x in enumerate((-1.0, 1j))]
    g = [f.gamma_star for f in fits]
    ratio = max(g) / min(g)
    ok = verdict(9, "TV exponential decay",
                 g[0] > 0 and fits[0].r_squared >= 0.9 and ratio <= 2,
                 f"gamma* from -1: {g[0]:.3f} (r^2 {fits[0].r_squared:.4f}), from i: {g[1]:.3f} "
                 f"(r^2 {fits[1].r_squared:.4f}); ratio {ratio:.3f} (<= 2); "
                 f"fit windows end at t={fits[0].times[fits[0].window[-1]]:.2f}, "
                 f"{fits[1].times[fits[1].window[-1]]:.2f}")
    assert ok


def test_c10_large_deviations(verdict):
    F = [(math.pi / 2, math.pi)]
    ks = [8.0, 32.0, 128.0, 512.0]
    slopes = ldp_empirical_slope(F, ks)
    bounds = [ldp_bounds(F, k) for k in ks]
    inside = all(lo <= s <= hi for s, (lo, hi) in zip(slopes, bounds))
    ok = verdict(10, "large deviations", inside and abs(slopes[-1] + 2) <= 0.1,
                 "slopes " + ", ".join(f"{s:.4f}" for s in slopes)
                 + f"; all within bounds: {inside}; |slope(512) + 2| = {abs(slopes[-1] + 2):.4f}")
    assert ok


def test_c11_kappa_collapse(verdict):
    n, n_bins = 10**5, 50
    hists = []
    for i, (K, eps) in enumerate([(1.0, 0.5), (4.0, 1.0)]):
        p = ModelParams(K, eps)
        start = sample(StationaryDensity.from_params(p), n, NoiseStream(11, i))
        ens = simulate_ensemble(on_circle(start), p, 5.0, 0.01, master_seed=110 + i, n_traj=n,
                                record_stride=500, workers=WORKERS)
        hists.append(distance_histogram(ens.h[:, -1], n_bins))
    tv = tv_distance(*hists)
    lim = 2 * two_sample_noise_floor(*hists).mean
    qs = [distance_quantile(StationaryDensity.from_kappa(k), 0.99) for k in (2, 8, 32, 128)]
    dec = all(b < a for a, b in zip(qs, qs[1:]))
    ok = verdict(11, "kappa collapse and concentration", tv <= lim and dec and qs[-1] <= 0.25,
                 f"TV of distance laws {tv:.4f} (<= 2x two-sample floor {lim:.4f}); 0.99-quantiles "
                 + ", ".join(f"{q:.4f}" for q in qs) + " (decreasing, last <= 0.25)")
    assert ok


def test_c12_phase_synchronization(verdict, tmp_path):
    cfg = parse_config("[experiment]\nkind = spde_run\n",
                       ["K=1", "eps=0.3", "T=50", "dt=0.001", "n_traj=200", "n_points=64",
                        "length=20", "record_stride=100", "master_seed=12",
                        f"out={tmp_path / 'sync'}"])
    m = run(cfg)
    checks = {c["name"]: c for c in m.checks}
    c = checks["phase_sync_final_quarter"]
    ok = verdict(12, "phase synchronization", m.status == "ok" and c["passed"],
                 f"fraction with phase distance < 0.05 over t in [37.5, 50]: {c['value']:.3f} "
                 f"(>= 0.95); max defect {m.summary['max_defect']:.2g}")
    assert ok


def test_c13_reproducibility(verdict, tmp_path):
    configs = {
        "sde_ensemble": ["K=1", "eps=0.5", "T=40", "dt=0.01", "n_traj=10000",
                         "record_times=5, 10, 20, 40", "master_seed=7"],
        "boundary_ensemble": ["K=1", "eps=1", "h0=-1", "T=20", "dt=0.01", "n_traj=10000",
                              "master_seed=9"],
    }
    same, detail = True, []
    for kind, args in configs.items():
        digests = []
        for w in (1, 2, 8):
            cfg = parse_config(f"[experiment]\nkind = {kind}\n",
                               args + [f"workers={w}", f"out={tmp_path / f'{kind}-{w}'}"])
            digests.append(run(cfg).outputs)
        same &= digests[0] == digests[1] == digests[2]
        detail.append(f"{kind}: {len(digests[0])} files, identical={digests[0] == digests[1] == digests[2]}")
    ok = verdict(13, "reproducibility", same, "; ".join(detail) + " under 1, 2 and 8 workers")
    assert ok
