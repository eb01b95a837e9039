"""Command-line front end.

Each subcommand maps to an experiment kind; every config key is also a flag
(``n_traj`` is ``--n-traj``), applied after ``--config`` and before ``--set``
overrides.  Exit status: 0 when every check passes, 1 when a check fails,
2 on a configuration or usage error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
from scipy.integrate import trapezoid

from . import __version__
from .errors import ConfigError, StochLoheError
from .experiment_runner import SCHEMA, Check, parse_config, run

ENV_OUTPUT_ROOT = "STOCHLOHE_OUTPUT_ROOT"

COMMANDS = {
    "path": ("sde_path", "integrate one correlation path and write it as CSV"),
    "ensemble": ("sde_ensemble", "ensemble from h0: escape fractions inside the disc, "
                 "or TV against the stationary law if |h0| = 1"),
    "spde": ("spde_run", "ensemble of field simulations with synchronization metrics"),
    "oracle": ("cross_oracle", "field correlation against the SDE along one Brownian path"),
    "stationary": ("stationary_check", "sampler, stationarity, mean and ergodic-average checks"),
    "tvdecay": ("tv_decay", "fit the exponential decay of TV from boundary starts"),
    "ldp": ("ldp_table", "large-deviation slopes with finite-kappa bounds"),
    "sweep": ("sweep", "run an experiment over a grid of (K, eps) and summarize by kappa"),
    "density": (None, "tabulate theta, pdf, cdf of the stationary law"),
    "verify": (None, "run a fast battery of invariant checks"),
}

log = logging.getLogger("stochlohe")


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="PATH", help="INI config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (section.key or key), repeatable")
    parser.add_argument("--json", action="store_true", help="print a machine-readable summary")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging")
    parser.add_argument("--no-resume", action="store_true",
                        help="recompute even if the output directory holds this run")
    cfg = parser.add_argument_group("config keys")
    for section, keys in SCHEMA.items():
        for key, spec in keys.items():
            if key == "kind":
                continue
            cfg.add_argument(_flag(key), dest=f"key_{key}", metavar="V",
                             help=f"[{section}] {spec.help}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stochlohe", description=__doc__.split("\n")[0],
                                formatter_class=argparse.RawDescriptionHelpFormatter,
                                epilog=f"Output root for runs without --out: ${ENV_OUTPUT_ROOT} "
                                       "(default ./runs).")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text, description=help_text)
        if name == "density":
            sp.add_argument("--K", required=True, type=float, help="coupling strength")
            sp.add_argument("--eps", required=True, type=float, help="noise intensity")
            sp.add_argument("--out", required=True, metavar="CSV", help="output table")
            sp.add_argument("--rows", type=int, default=2001, help="number of angles")
            sp.add_argument("--json", action="store_true", help="print a machine-readable summary")
            sp.add_argument("-v", "--verbose", action="count", default=0, help="more logging")
        elif name == "verify":
            sp.add_argument("--suite", choices=["core"], default="core", help="check battery")
            sp.add_argument("--json", action="store_true", help="print a machine-readable summary")
            sp.add_argument("-v", "--verbose", action="count", default=0, help="more logging")
        else:
            _common(sp)
    return p


def _overrides(args) -> list[str]:
    out = []
    for section, keys in SCHEMA.items():
        for key in keys:
            v = getattr(args, f"key_{key}", None)
            if v is not None:
                out.append(f"{key}={v}")
    return out + list(args.set)


def _report(args, checks: list[Check], extra: dict) -> int:
    passed = all(c.passed for c in checks)
    if args.json:
        print(json.dumps({"command": args.command, "passed": passed, **extra,
                          "checks": [c.__dict__ for c in checks]}, default=str, sort_keys=True))
    else:
        for c in checks:
            print(c.line())
    return 0 if passed else 1


def cmd_run(args) -> int:
    kind = COMMANDS[args.command][0]
    text = None if args.config else "[experiment]\nkind = %s\n" % kind
    if args.command == "ensemble":
        # the start decides between the interior and the boundary experiment
        probe = parse_config(text, ["kind=sde_path"] + _overrides(args), path=args.config)
        if abs(abs(probe["h0"]) - 1) <= 1e-12:
            kind = "boundary_ensemble"
    overrides = [f"kind={kind}"] + _overrides(args)
    cfg = parse_config(text, overrides, path=args.config)
    given_out = any(o.split("=", 1)[0].strip() in ("out", "outputs.out") for o in overrides)
    if not given_out and not (args.config and _file_sets_out(args.config)):
        root = Path(os.environ.get(ENV_OUTPUT_ROOT, "runs"))
        cfg = cfg.replace(out=str(root / f"{cfg.kind}-{cfg.data_hash()[:10]}"))
    log.info("running %s into %s", cfg.kind, cfg.out)
    m = run(cfg, resume=not args.no_resume, overwrite=True)
    checks = [Check(**c) for c in m.checks]
    if m.error:
        checks.append(Check("run", False, detail=f"{m.error['type']}: {m.error['message']}"))
    if not args.json:
        print(f"{m.kind}: {m.directory} ({'resumed' if m.resumed else f'{m.wall_time:.1f}s'})")
    return _report(args, checks, {"directory": m.directory, "status": m.status,
                                  "outputs": m.outputs, "summary": m.summary})


def _file_sets_out(path) -> bool:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read(path, encoding="utf-8")
    return cp.has_option("outputs", "out")


def cmd_density(args) -> int:
    from .invariant_measure import StationaryDensity, write_density_table
    from .params import ModelParams
    try:
        sd = StationaryDensity.from_params(ModelParams(args.K, args.eps))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if args.rows < 3:
        raise ConfigError("--rows must be >= 3")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    table = write_density_table(sd, out, args.rows)
    gp = out.with_suffix(".gp")
    gp.write_text(f"set datafile separator ','\nset key autotitle columnhead\n"
                  f"plot '{out.name}' using 1:2 with lines title 'pdf', "
                  f"'' using 1:3 with lines axes x1y2 title 'cdf'\n", encoding="utf-8")
    total = float(trapezoid(table[:, 1], table[:, 0]))
    check = Check("pdf_integrates_to_one", abs(total - 1) <= 1e-8, abs(total - 1), 1e-8,
                  f"kappa={sd.kappa:g}")
    if not args.json:
        print(f"density: {out} ({args.rows} rows), template {gp}")
    return _report(args, [check], {"out": str(out), "kappa": sd.kappa})


def core_checks() -> list[Check]:
    """Fast invariants of a healthy build."""
    from scipy import special

    from .correlation_sde import deterministic_solution, simulate_increments, simulate_path
    from .ergodic_stats import CircularHistogram, tv_distance
    from .invariant_measure import StationaryDensity, ldp_bounds, ldp_empirical_slope, mean_re
    from .lohe_spde import Grid, WaveField, packets_with_overlap, simulate_spde
    from .noise import NoiseStream, derive_seed
    from .params import ModelParams

    checks = []
    p0 = ModelParams(1.0, 0.0)
    path = simulate_increments(0.5, p0, 1e-3, np.zeros(10_000))
    ref = np.array([deterministic_solution(0.5, 1.0, t) for t in path.t])
    err = float(np.max(np.abs(path.h - ref)))
    checks.append(Check("deterministic_oracle", err <= 1e-6, err, 1e-6, "K=1, h0=0.5, T=10"))

    p = ModelParams(1.0, 1.0)
    ip = simulate_path(0.3 + 0.4j, p, 20.0, 0.01, NoiseStream(1, 0))
    ok = bool(np.all(np.isfinite(ip.log_defect)))
    checks.append(Check("ball_invariance", ok, float(ip.min_log_defect),
                        detail="min log(1-|h|^2), finite iff |h| < 1"))
    bp = simulate_path(-1.0 + 0j, p, 20.0, 0.01, NoiseStream(1, 1))
    dev = float(np.max(np.abs(np.abs(bp.h) - 1)))
    checks.append(Check("boundary_modulus", dev <= 1e-12, dev, 1e-12))

    a = NoiseStream(7, 3).normals(1000)
    s = NoiseStream(7, 3)
    b = np.concatenate([s.normals(333), s.normals(667)])
    checks.append(Check("noise_chunk_invariance", bool(np.array_equal(a, b))))
    seeds = {derive_seed(0, i) for i in range(10_000)}
    checks.append(Check("derived_seeds_distinct", len(seeds) == 10_000, len(seeds), 10_000))

    sd = StationaryDensity.from_kappa(2.0)
    m = mean_re(sd)
    oracle = float(special.i1(2.0) / special.i0(2.0))
    checks.append(Check("mean_re_bessel", abs(m - oracle) <= 1e-10, abs(m - oracle), 1e-10))
    theta = np.linspace(-math.pi, math.pi, 2001)
    total = float(trapezoid(np.exp(2 * np.cos(theta) - sd.log_gamma), theta))
    checks.append(Check("density_normalized", abs(total - 1) <= 1e-8, abs(total - 1), 1e-8))

    F = [(math.pi / 2, math.pi)]
    ks = [8.0, 32.0, 128.0, 512.0]
    slopes = ldp_empirical_slope(F, ks)
    inside = all(lo <= s_ <= hi for s_, (lo, hi) in zip(slopes, (ldp_bounds(F, k) for k in ks)))
    checks.append(Check("ldp_sandwich", inside))
    checks.append(Check("ldp_limit", abs(slopes[-1] + 2) <= 0.1, abs(float(slopes[-1]) + 2), 0.1))

    u = CircularHistogram.from_counts([1, 1, 0, 0])
    v = CircularHistogram.from_counts([0, 0, 1, 1])
    w = CircularHistogram.from_counts([1, 1, 1, 1])
    tv_ok = tv_distance(u, v) == 1.0 and tv_distance(u, w) == 0.5 and tv_distance(w, w) == 0.0
    checks.append(Check("tv_hand_values", tv_ok))

    g = Grid(1, 64, 20.0)
    f = WaveField.from_psi(g, packets_with_overlap(g, 2.0), eps=0.5)
    db = np.random.default_rng(0).standard_normal((2, 200)) * math.sqrt(1e-3)
    run_ = simulate_spde(f, ModelParams(1.0, 0.5), 1e-3, db)
    checks.append(Check("spde_mass_defect", run_.max_defect <= 1e-8, run_.max_defect, 1e-8))
    return checks


def cmd_verify(args) -> int:
    return _report(args, core_checks(), {"suite": args.suite})


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "density":
            return cmd_density(args)
        if args.command == "verify":
            return cmd_verify(args)
        return cmd_run(args)
    except ConfigError as exc:
        print(f"stochlohe: config error: {exc}", file=sys.stderr)
        return 2
    except StochLoheError as exc:
        print(f"stochlohe: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
