"""Configuration, execution and persistence of experiments.

A config is an INI file (``key = value`` lines under ``[section]`` headers,
UTF-8, ``#`` or ``;`` comments).  Every key belongs to exactly one section,
key names are unique across sections, and anything not in :data:`SCHEMA` is
rejected.  Example::

    [experiment]
    kind = sde_path

    [model]
    K = 1
    eps = 0.2

    [numerics]
    T = 10
    h0 = 0

    [outputs]
    out = runs/figure1

A run writes one directory holding ``manifest.json`` and CSV data.  The
directory is assembled under a temporary name and renamed into place, so a
run directory is either complete or absent.  Data files depend only on the
config (never on ``workers`` or timing), and their SHA-256 digests are listed
in the manifest.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import json
import math
import os
import shutil
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
from scipy import special

from . import __version__
from .correlation_sde import (SCHEMES, deterministic_solution, simulate_ensemble,
                              simulate_increments, simulate_path)
from .ergodic_stats import (batch_means_se, chi_square_pvalue, circular_edges, distance_histogram,
                            ergodic_average, histogram, noise_floor, tv_decay_fit, tv_distance,
                            two_sample_noise_floor, Histogram)
from .errors import ConfigError, NoiseFloorError, StochLoheError
from .invariant_measure import (StationaryDensity, distance_quantile, ldp_bounds,
                                ldp_empirical_slope, ldp_limit, mean_re, sample)
from .lohe_spde import Grid, WaveField, gaussian_packet, simulate_spde, sync_metrics, write_snapshot
from .noise import NoiseStream, derive_seed, increment_block
from .params import ModelParams

MANIFEST_SCHEMA = 1
KINDS = ("sde_path", "sde_ensemble", "boundary_ensemble", "spde_run", "cross_oracle",
         "stationary_check", "tv_decay", "ldp_table", "sweep")

# stream ids reserved for auxiliary draws
SAMPLER_STREAM = 1 << 40
INIT_STREAM = (1 << 40) + 1
ERGODIC_STREAM = (1 << 40) + 2


# -- value parsers ------------------------------------------------------------

def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _complex(v: str) -> complex:
    return complex(v.strip().replace(" ", "").replace("i", "j"))


def _list(parse):
    def inner(v: str):
        return tuple(parse(x) for x in v.split(",") if x.strip())
    return inner


def _pairs(v: str):
    out = []
    for item in v.split(","):
        if item.strip():
            a, b = item.split(":")
            out.append((float(a), float(b)))
    return tuple(out)


def _optional(parse):
    def inner(v: str):
        return None if v.strip().lower() in ("", "none", "auto") else parse(v)
    return inner


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: str | None
    help: str


SCHEMA: dict[str, dict[str, Key]] = {
    "experiment": {
        "kind": Key(str, None, "experiment kind: " + ", ".join(KINDS)),
    },
    "model": {
        "K": Key(float, None, "coupling strength K > 0"),
        "eps": Key(float, None, "noise intensity eps >= 0"),
        "N": Key(int, "2", "number of oscillators (SPDE kinds)"),
    },
    "numerics": {
        "dt": Key(_optional(float), "auto", "time step (auto: largest allowed)"),
        "T": Key(float, "10", "final time"),
        "h0": Key(_complex, "0", "initial correlation, a point of the closed unit disc"),
        "record_stride": Key(int, "1", "record every n-th step"),
        "scheme": Key(str, "heun", "correlation scheme: " + ", ".join(SCHEMES)),
        "n_points": Key(int, "256", "grid points per dimension (SPDE)"),
        "length": Key(float, "40", "periodic box length (SPDE)"),
        "dim": Key(int, "1", "spatial dimension, 1 or 2 (SPDE)"),
        "width": Key(float, "1", "Gaussian packet width (SPDE)"),
        "separation": Key(float, "2", "spread of packet centres (SPDE)"),
        "momentum": Key(float, "0.5", "packet momentum magnitude (SPDE)"),
        "halvings": Key(int, "3", "dt halvings in the cross-oracle"),
        "tol_mass_step": Key(float, "1e-8", "per-step mass defect tolerance (SPDE)"),
    },
    "ensemble": {
        "n_traj": Key(int, "1000", "number of trajectories"),
        "master_seed": Key(int, "0", "master seed of all noise streams"),
        "workers": Key(int, "1", "worker threads (does not change results)"),
    },
    "analysis": {
        "record_times": Key(_optional(_list(float)), "auto", "times at which ensembles are examined"),
        "radii": Key(_list(float), "0.9", "radii of the escape statistics"),
        "escape_time": Key(float, "20", "time of the escape-fraction check"),
        "escape_max": Key(float, "0.05", "largest admissible escape fraction"),
        "n_bins": Key(int, "50", "histogram bins"),
        "n_samples": Key(int, "1000000", "exact samples for the sampler check"),
        "starts": Key(_list(_complex), "-1, 1j", "boundary starting points for TV decay"),
        "n_times": Key(int, "24", "geometric time grid size for TV decay"),
        "floor_factor": Key(float, "2", "multiple of the noise floor used as cutoff"),
        "sigma": Key(float, "3", "noise-floor standard deviations for stationarity"),
        "min_r_squared": Key(float, "0.9", "smallest admissible r^2 of a decay fit"),
        "max_rate_ratio": Key(float, "2", "largest admissible ratio of fitted rates"),
        "kappas": Key(_list(float), "8, 32, 128, 512", "concentrations for the LDP table"),
        "arc_degrees": Key(_list(float), "90, 180", "angular interval F in degrees"),
        "ldp_tol": Key(float, "0.1", "tolerance against the LDP limit at the largest kappa"),
        "oracle_tol": Key(float, "1e-6", "tolerance against the deterministic closed form"),
        "oracle_error_max": Key(float, "0.05", "largest admissible cross-oracle error"),
        "sync_tol": Key(float, "0.05", "phase-distance threshold of synchronization"),
        "sync_fraction": Key(float, "0.95", "smallest admissible synchronized fraction"),
        "ergodic_T": Key(float, "1000", "length of the ergodic-average path"),
        "quantile": Key(float, "0.99", "quantile level of the distance statistic"),
    },
    "outputs": {
        "out": Key(str, "runs/out", "output directory"),
        "snapshots": Key(_bool, "false", "also write binary field snapshots (SPDE)"),
    },
    "sweep": {
        "grid": Key(_optional(_pairs), "none", "grid points K:eps separated by commas"),
        "base_kind": Key(str, "stationary_check", "experiment run at each grid point"),
    },
}

SECTION_OF = {k: s for s, keys in SCHEMA.items() for k in keys}
assert len(SECTION_OF) == sum(len(v) for v in SCHEMA.values()), "duplicate config key"

# keys that do not influence data files
_VOLATILE = {"workers", "out"}


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment settings, keyed by (section-unique) key name."""

    values: dict
    overrides: tuple = ()

    def __getitem__(self, key):
        return self.values[key]

    @property
    def kind(self) -> str:
        return self.values["kind"]

    @property
    def params(self) -> ModelParams:
        return ModelParams(self["K"], self["eps"], self["N"])

    @property
    def dt(self) -> float:
        return self["dt"] if self["dt"] is not None else self.params.dt_max

    @property
    def out(self) -> Path:
        return Path(self["out"])

    def replace(self, **changes) -> "ExperimentConfig":
        vals = dict(self.values)
        vals.update(changes)
        return validate(vals, self.overrides)

    def echo(self) -> dict:
        """JSON-ready copy of all values, grouped by section."""
        out: dict = {s: {} for s in SCHEMA}
        for k, v in self.values.items():
            out[SECTION_OF[k]][k] = _jsonable(v)
        return out

    def to_ini(self) -> str:
        lines = []
        for s, keys in SCHEMA.items():
            lines.append(f"[{s}]")
            for k in keys:
                lines.append(f"{k} = {_format(self.values[k])}")
            lines.append("")
        return "\n".join(lines)

    def data_hash(self) -> str:
        vals = {k: _jsonable(v) for k, v in self.values.items() if k not in _VOLATILE}
        return hashlib.sha256(json.dumps(vals, sort_keys=True).encode()).hexdigest()


def _jsonable(v):
    if isinstance(v, complex):
        return _format(v)
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    return v


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, complex):
        return f"{v.real!r}{v.imag:+}j" if v.imag else repr(v.real)
    if isinstance(v, tuple):
        return ", ".join(f"{_format(x[0])}:{_format(x[1])}" if isinstance(x, tuple) else _format(x)
                         for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _resolve(key: str) -> tuple[str, str]:
    if "." in key:
        s, k = key.split(".", 1)
        if s not in SCHEMA or k not in SCHEMA[s]:
            raise ConfigError(f"unknown config key {key!r}")
        return s, k
    if key not in SECTION_OF:
        raise ConfigError(f"unknown config key {key!r}")
    return SECTION_OF[key], key


def parse_config(text: str | None = None, overrides=(), path=None) -> ExperimentConfig:
    """Parse INI ``text`` (or the file at ``path``), apply ``key=value`` overrides, validate."""
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                   inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        if path is not None:
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh)
        elif text is not None:
            cp.read_string(text)
    except (configparser.Error, OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    raw: dict[str, str] = {}
    for s in cp.sections():
        if s not in SCHEMA:
            raise ConfigError(f"unknown section [{s}]")
        for k, v in cp.items(s):
            if k not in SCHEMA[s]:
                raise ConfigError(f"unknown key {k!r} in section [{s}]")
            raw[k] = v
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, v = item.split("=", 1)
        _, k = _resolve(key.strip())
        raw[k] = v.strip()
    vals = {}
    for s, keys in SCHEMA.items():
        for k, spec in keys.items():
            text_v = raw.get(k, spec.default)
            if text_v is None:
                raise ConfigError(f"missing required key {s}.{k}")
            try:
                vals[k] = spec.parse(text_v)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {s}.{k}: {text_v!r} ({exc})") from None
    return validate(vals, tuple(overrides))


def validate(vals: dict, overrides=()) -> ExperimentConfig:
    """Check every value against the preconditions of the modules it feeds."""
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    need(vals["kind"] in KINDS, f"unknown kind {vals['kind']!r}")
    try:
        params = ModelParams(vals["K"], vals["eps"], vals["N"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    dt = vals["dt"] if vals["dt"] is not None else params.dt_max
    need(dt > 0 and dt <= params.dt_max * (1 + 1e-12),
         f"dt={dt:g} must lie in (0, {params.dt_max:g}]")
    need(vals["T"] > 0, "T must be positive")
    need(abs(round(vals["T"] / dt) * dt - vals["T"]) <= 1e-9 * max(1.0, vals["T"]),
         f"T={vals['T']:g} is not a multiple of dt={dt:g}")
    need(abs(vals["h0"]) <= 1 + 1e-12, "h0 must lie in the closed unit disc")
    need(vals["record_stride"] >= 1, "record_stride must be >= 1")
    need(vals["scheme"] in SCHEMES, f"scheme must be one of {SCHEMES}")
    need(vals["n_points"] >= 4 and vals["length"] > 0, "grid needs n_points >= 4, length > 0")
    need(vals["dim"] in (1, 2), "dim must be 1 or 2")
    need(vals["width"] > 0, "width must be positive")
    need(vals["halvings"] >= 1, "halvings must be >= 1")
    need(vals["n_traj"] >= 1, "n_traj must be >= 1")
    need(vals["workers"] >= 1, "workers must be >= 1")
    need(0 <= vals["master_seed"] < 2**64, "master_seed must fit in 64 bits")
    rt = vals["record_times"]
    need(rt is None or all(0 <= t <= vals["T"] for t in rt), "record_times must lie in [0, T]")
    need(all(0 < r < 1 for r in vals["radii"]) and list(vals["radii"]) == sorted(vals["radii"]),
         "radii must be ascending in (0, 1)")
    need(vals["n_bins"] >= 2, "n_bins must be >= 2")
    need(vals["n_samples"] >= 1, "n_samples must be >= 1")
    need(len(vals["starts"]) >= 1, "need at least one start")
    need(len(vals["arc_degrees"]) == 2 and vals["arc_degrees"][0] < vals["arc_degrees"][1],
         "arc_degrees must be two ascending angles")
    need(all(k > 0 for k in vals["kappas"]), "kappas must be positive")
    need(0 < vals["quantile"] < 1, "quantile must lie in (0, 1)")
    if vals["kind"] in ("stationary_check", "tv_decay", "ldp_table", "boundary_ensemble"):
        need(params.eps > 0, f"{vals['kind']} requires eps > 0")
    if vals["kind"] == "boundary_ensemble":
        need(abs(abs(vals["h0"]) - 1) <= 1e-12, "boundary_ensemble needs |h0| = 1")
    if vals["kind"] == "sde_ensemble":
        need(abs(vals["h0"]) < 1, "sde_ensemble needs |h0| < 1")
    if vals["kind"] == "tv_decay":
        need(vals["T"] >= 1, "tv_decay needs T >= 1")
    if vals["kind"] == "sweep":
        need(bool(vals["grid"]), "sweep needs a nonempty grid")
        need(vals["base_kind"] in KINDS and vals["base_kind"] != "sweep",
             f"bad base_kind {vals['base_kind']!r}")
        for K, eps in vals["grid"]:
            try:
                ModelParams(K, eps, vals["N"])
            except ValueError as exc:
                raise ConfigError(f"grid point {K}:{eps}: {exc}") from None
    return ExperimentConfig(dict(vals), tuple(overrides))


# -- outputs ------------------------------------------------------------------

@dataclass
class Check:
    name: str
    passed: bool
    value: Any = None
    threshold: Any = None
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        s = f"{tag} {self.name}"
        if self.value is not None:
            s += f": {self.value:.6g}" if isinstance(self.value, float) else f": {self.value}"
        if self.threshold is not None:
            s += f" (threshold {self.threshold})"
        if self.detail:
            s += f" [{self.detail}]"
        return s


@dataclass
class RunManifest:
    kind: str
    config: dict
    overrides: list
    seeds: dict
    wall_time: float
    checks: list
    outputs: dict
    status: str = "ok"
    error: dict | None = None
    summary: dict = field(default_factory=dict)
    version: str = __version__
    schema: int = MANIFEST_SCHEMA
    config_hash: str = ""
    directory: str = ""
    resumed: bool = False

    @property
    def passed(self) -> bool:
        return self.status == "ok" and all(c["passed"] for c in self.checks)

    def check_lines(self) -> list[str]:
        lines = [Check(**c).line() for c in self.checks]
        if self.error:
            lines.append(f"FAIL run: {self.error['type']}: {self.error['message']}")
        return lines

    def to_json(self) -> str:
        d = {k: v for k, v in self.__dict__.items() if k not in ("directory", "resumed")}
        return json.dumps(d, indent=2, sort_keys=True, default=_json_default)

    @classmethod
    def load(cls, path) -> "RunManifest":
        d = json.loads(Path(path).read_text())
        m = cls(**d)
        m.directory = str(Path(path).parent)
        return m


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, complex):
        return _format(o)
    raise TypeError(f"cannot serialize {type(o)}")


def _num(x) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return repr(float(x))


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else _num(v) for v in row])


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def verify_manifest(directory) -> RunManifest | None:
    """Load the manifest of a finished run if all listed outputs match their digests."""
    path = Path(directory) / "manifest.json"
    if not path.is_file():
        return None
    try:
        m = RunManifest.load(path)
    except (ValueError, TypeError, KeyError):
        return None
    for name, digest in m.outputs.items():
        f = Path(directory) / name
        if not f.is_file() or sha256_file(f) != digest:
            return None
    return m


GNUPLOT = {
    "sde_path": ("path.csv", "plot 'path.csv' using 1:2 with lines title 'Re h', \\\n"
                 "     '' using 1:3 with lines title 'Im h', '' using 1:4 with lines title '|h|'"),
    "sde_ensemble": ("escape.csv", "plot 'escape.csv' using 1:3:4 with yerrorbars title 'P(|h|<=r)'"),
    "boundary_ensemble": ("tv.csv", "set logscale y\nplot 'tv.csv' using 1:2 with linespoints title 'TV', "
                          "'' using 1:3 with lines title 'noise floor'"),
    "spde_run": ("sync.csv", "plot 'sync.csv' using 1:3 with lines title 'max phase distance', "
                 "'' using 1:2 with lines title 'median phase distance'"),
    "cross_oracle": ("oracle.csv", "set logscale xy\nplot 'oracle.csv' using 2:3 with linespoints title 'sup error'"),
    "stationary_check": ("sampler_hist.csv", "plot 'sampler_hist.csv' using (($1+$2)/2):4 with boxes title "
                         "'empirical', '' using (($1+$2)/2):5 with lines title 'exact'"),
    "tv_decay": ("tv_decay.csv", "set logscale y\nplot for [i=2:*] 'tv_decay.csv' using 1:i with linespoints "
                 "title columnheader(i)"),
    "ldp_table": ("ldp.csv", "set logscale x\nplot 'ldp.csv' using 1:2 with linespoints title 'slope', "
                  "'' using 1:3 with lines title 'lower', '' using 1:4 with lines title 'upper'"),
    "sweep": ("summary.csv", "plot 'summary.csv' using 4:8 with linespoints title 'quantile (quadrature)'"),
}


def write_gnuplot(directory, kind: str) -> str:
    data, body = GNUPLOT[kind]
    text = (f"# gnuplot template for {data}\nset datafile separator ','\nset key autotitle columnhead\n"
            f"set terminal pngcairo size 900,600\nset output '{kind}.png'\n{body}\n")
    Path(directory, "plot.gp").write_text(text, encoding="utf-8")
    return "plot.gp"


# -- experiments --------------------------------------------------------------

@dataclass
class Outcome:
    checks: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)


def _record_times(cfg: ExperimentConfig, default) -> np.ndarray:
    times = cfg["record_times"] if cfg["record_times"] is not None else default
    times = sorted({float(t) for t in times if t <= cfg["T"] + 1e-12})
    return np.round(np.array(times) / cfg.dt) * cfg.dt


def _col(times, ens_times, dt) -> list[int]:
    index = {int(round(t / dt)): k for k, t in enumerate(ens_times)}
    return [index[int(round(t / dt))] for t in times]


def _seed_info(master: int, n: int) -> dict:
    return {"master_seed": master, "stream_ids": [0, n],
            "first_keys": [derive_seed(master, i) for i in range(min(n, 4))]}


def exp_sde_path(cfg: ExperimentConfig, d: Path) -> Outcome:
    p, dt = cfg.params, cfg.dt
    seed = cfg["master_seed"]
    path = simulate_path(cfg["h0"], p, cfg["T"], dt, NoiseStream(seed, 0), cfg["record_stride"],
                         cfg["scheme"])
    h = path.h
    write_csv(d / "path.csv", ["t", "re_h", "im_h", "abs_h", "log_defect", "drift_integral"],
              zip(path.t, h.real, h.imag, np.abs(h), path.log_defect, path.drift_integral))
    out = Outcome(seeds=_seed_info(seed, 1), summary={"rejections": path.rejections})
    if path.boundary:
        dev = float(np.max(np.abs(np.abs(h) - 1)))
        out.checks.append(Check("boundary_modulus", dev <= 1e-12, dev, 1e-12))
    else:
        ok = bool(np.all(np.isfinite(path.log_defect)))
        out.checks.append(Check("ball_invariance", ok, float(path.min_log_defect),
                                detail="min log(1-|h|^2), finite iff |h| < 1"))
    if p.eps == 0:
        ref = np.array([deterministic_solution(cfg["h0"], p.K, t) for t in path.t])
        err = float(np.max(np.abs(h - ref)))
        out.checks.append(Check("deterministic_oracle", err <= cfg["oracle_tol"], err,
                                cfg["oracle_tol"]))
    return out


def exp_sde_ensemble(cfg: ExperimentConfig, d: Path) -> Outcome:
    p, dt, n = cfg.params, cfg.dt, cfg["n_traj"]
    T = cfg["T"]
    times = _record_times(cfg, [T / 8, T / 4, T / 2, T])
    ens = simulate_ensemble(cfg["h0"], p, T, dt, cfg["master_seed"], n_traj=n, record_times=times,
                            workers=cfg["workers"], scheme=cfg["scheme"])
    cols = _col(times, ens.times, dt)
    mod = np.sqrt(-np.expm1(ens.log_defect[:, cols]))
    radii = cfg["radii"]
    frac = np.array([[np.mean(mod[:, c] <= r) for r in radii] for c in range(len(times))])
    se = np.sqrt(frac * (1 - frac) / n)
    write_csv(d / "escape.csv", ["t", "radius", "fraction", "se"],
              [(t, r, frac[i, j], se[i, j]) for i, t in enumerate(times)
               for j, r in enumerate(radii)])
    last = ens.h[:, -1]
    write_csv(d / "final.csv", ["traj", "re_h", "im_h", "log_defect"],
              zip(range(n), last.real, last.imag, ens.log_defect[:, -1]))
    out = Outcome(seeds=_seed_info(cfg["master_seed"], n),
                  summary={"rejections": int(ens.rejections.sum())})
    ok = bool(np.all(np.isfinite(ens.min_log_defect)))
    out.checks.append(Check("ball_invariance", ok, float(ens.min_log_defect.min()),
                            detail="min log(1-|h|^2), finite iff |h| < 1"))
    rise = max((frac[i + 1, -1] - frac[i, -1]
                - 2 * math.hypot(se[i, -1], se[i + 1, -1]) for i in range(len(times) - 1)),
               default=-1.0)
    out.checks.append(Check("escape_nonincreasing", rise <= 0, float(rise), 0,
                            f"r={radii[-1]:g}, within 2 sigma"))
    t_chk = cfg["escape_time"]
    hit = [i for i, t in enumerate(times) if abs(t - t_chk) < 0.5 * dt]
    if hit:
        f = float(frac[hit[0], -1])
        out.checks.append(Check(f"escape_fraction_t{t_chk:g}", f <= cfg["escape_max"], f,
                                cfg["escape_max"], f"r={radii[-1]:g}"))
    return out


def _masses(cfg, sd):
    return sd.bin_masses(circular_edges(cfg["n_bins"]))


def _tv_rows(ens, times, cfg, masses):
    floor = noise_floor(masses, ens.n_traj)
    rows = []
    for t, c in zip(times, _col(times, ens.times, cfg.dt)):
        rows.append((t, tv_distance(histogram(np.angle(ens.h[:, c]), cfg["n_bins"]), masses),
                     floor.mean, floor.sd))
    return rows, floor


def exp_boundary_ensemble(cfg: ExperimentConfig, d: Path) -> Outcome:
    p, dt, n = cfg.params, cfg.dt, cfg["n_traj"]
    times = _record_times(cfg, np.geomspace(min(1.0, cfg["T"]), cfg["T"], 12))
    ens = simulate_ensemble(cfg["h0"], p, cfg["T"], dt, cfg["master_seed"], n_traj=n,
                            record_times=times, workers=cfg["workers"], scheme=cfg["scheme"])
    sd = StationaryDensity.from_params(p)
    masses = _masses(cfg, sd)
    rows, floor = _tv_rows(ens, times, cfg, masses)
    write_csv(d / "tv.csv", ["t", "tv", "floor_mean", "floor_sd"], rows)
    hist = histogram(np.angle(ens.h[:, -1]), cfg["n_bins"])
    e = hist.edges
    write_csv(d / "hist_final.csv", ["lo", "hi", "count", "mass", "exact_mass"],
              zip(e[:-1], e[1:], hist.counts, hist.masses, masses))
    out = Outcome(seeds=_seed_info(cfg["master_seed"], n))
    dev = float(np.max(np.abs(np.abs(ens.h) - 1)))
    out.checks.append(Check("boundary_modulus", dev <= 1e-12, dev, 1e-12))
    lim = cfg["floor_factor"] * floor.mean
    out.checks.append(Check("tv_final_below_floor", rows[-1][1] <= lim, rows[-1][1], lim,
                            f"t={times[-1]:g}"))
    return out


def _spde_initial(cfg: ExperimentConfig, grid: Grid) -> np.ndarray:
    N = cfg["N"]
    centers = np.linspace(-cfg["separation"] / 2, cfg["separation"] / 2, N)
    moms = np.linspace(cfg["momentum"], -cfg["momentum"], N)
    return np.stack([gaussian_packet(grid, c, cfg["width"], m) for c, m in zip(centers, moms)])


def _spde_drive(fields, p, dt, n_steps, seed, ids, stride, tol, chunk=2000):
    """Run ``simulate_spde`` in chunks of increments; returns (times, h, final, max_defect, log_rescale)."""
    lead = fields.phi.shape[:-fields.grid.d]
    ts, hs = [np.array([fields.t])], None
    pos, mx, lr = 0, 0.0, 0.0
    while pos < n_steps:
        m = min(chunk, n_steps - pos)
        db = increment_block(seed, ids, pos, m, dt).reshape(lead + (m,))
        run = simulate_spde(fields, p, dt, db, record_stride=1, tol_mass_step=tol)
        fields = run.final
        h = run.h if hs is None else run.h[..., 1:]
        hs = [h] if hs is None else hs + [h]
        ts.append(run.times[1:])
        mx = max(mx, run.max_defect)
        lr = lr + run.log_rescale
        pos += m
    t = np.concatenate(ts)
    h = np.concatenate(hs, axis=-1)
    keep = np.arange(0, len(t), stride)
    return t[keep], h[..., keep], fields, mx, lr


def exp_spde_run(cfg: ExperimentConfig, d: Path) -> Outcome:
    p, dt, n, N = cfg.params, cfg.dt, cfg["n_traj"], cfg["N"]
    grid = Grid(cfg["dim"], cfg["n_points"], cfg["length"])
    psi0 = np.broadcast_to(_spde_initial(cfg, grid), (n, N) + grid.shape)
    fields = WaveField.from_psi(grid, psi0, np.zeros((n, N)), p.eps)
    n_steps = int(round(cfg["T"] / dt))
    t, h, final, mx, lr = _spde_drive(fields, p, dt, n_steps, cfg["master_seed"],
                                      np.arange(n * N), cfg["record_stride"], cfg["tol_mass_step"])
    dist = np.sqrt(np.maximum(2 - 2 * np.abs(h), 0.0))
    write_csv(d / "sync.csv", ["t", "median_phase_distance", "max_phase_distance", "mean_abs_h"],
              zip(t, np.median(dist, axis=0), dist.max(axis=0), np.abs(h).mean(axis=0)))
    m = sync_metrics(final, p.eps)
    rows = [(i, j, k, m.l2_dist[i, j, k], m.phase_min_dist[i, j, k])
            for i in range(n) for j in range(N) for k in range(j + 1, N)]
    write_csv(d / "final_metrics.csv", ["traj", "j", "k", "l2_distance", "phase_distance"], rows)
    if cfg["snapshots"]:
        write_snapshot(WaveField(grid, final.phi[0], final.beta[0], final.t), p.eps,
                       d / "snapshot_traj0")
    out = Outcome(seeds=_seed_info(cfg["master_seed"], n * N),
                  summary={"max_defect": mx, "max_log_rescale": float(np.max(lr))})
    out.checks.append(Check("mass_defect_per_step", mx <= cfg["tol_mass_step"], mx,
                            cfg["tol_mass_step"]))
    out.checks.append(Check("log_rescale", float(np.max(lr)) <= 1e-3, float(np.max(lr)), 1e-3))
    tail = dist[:, t >= 0.75 * cfg["T"] - 1e-12]
    frac = float(np.mean(tail.max(axis=1) < cfg["sync_tol"]))
    out.checks.append(Check("phase_sync_final_quarter", frac >= cfg["sync_fraction"], frac,
                            cfg["sync_fraction"], f"phase distance < {cfg['sync_tol']:g}"))
    return out


def cross_oracle_table(cfg: ExperimentConfig):
    """SPDE correlation against the SDE along the same Brownian path at successive dt halvings.

    The oscillators are driven by ``beta_1, beta_2``; the correlation then
    follows the SDE with ``W = (beta_1 - beta_2) / sqrt(2)``, integrated as a
    reference with a step 8 times finer than the finest SPDE step.
    """
    p, dt0, H = cfg.params, cfg.dt, cfg["halvings"]
    if cfg["N"] != 2:
        raise ConfigError("cross_oracle needs N = 2")
    grid = Grid(cfg["dim"], cfg["n_points"], cfg["length"])
    T = cfg["T"]
    n0 = int(round(T / dt0))
    fine = 8 * 2**H
    dt_ref = dt0 / fine
    db_ref = increment_block(cfg["master_seed"], [0, 1], 0, n0 * fine, dt_ref)
    dW = (db_ref[0] - db_ref[1]) / math.sqrt(2)
    psi0 = _spde_initial(cfg, grid)
    h_start = grid.inner(psi0[0], psi0[1])
    ref = simulate_increments(h_start, p, dt_ref, dW, record_stride=fine)
    rows, traces = [], []
    for lev in range(H + 1):
        m = 2**lev
        dt = dt0 / m
        db = db_ref.reshape(2, n0 * m, fine // m).sum(axis=-1)
        fields = WaveField.from_psi(grid, psi0, np.zeros(2), p.eps)
        run = simulate_spde(fields, p, dt, db, record_stride=m, tol_mass_step=cfg["tol_mass_step"])
        err = float(np.max(np.abs(run.h - ref.h)))
        rows.append((lev, dt, err, run.max_defect, float(run.log_rescale)))
        traces.append(run.h)
    return rows, ref, traces[0]


def exp_cross_oracle(cfg: ExperimentConfig, d: Path) -> Outcome:
    rows, ref, h0 = cross_oracle_table(cfg)
    write_csv(d / "oracle.csv", ["level", "dt", "sup_error", "max_defect", "log_rescale"], rows)
    write_csv(d / "trace.csv", ["t", "re_h_spde", "im_h_spde", "re_h_sde", "im_h_sde"],
              zip(ref.t, h0.real, h0.imag, ref.h.real, ref.h.imag))
    errs = [r[2] for r in rows]
    out = Outcome(seeds=_seed_info(cfg["master_seed"], 2), summary={"sup_errors": errs})
    out.checks.append(Check("cross_oracle_error", errs[0] <= cfg["oracle_error_max"], errs[0],
                            cfg["oracle_error_max"], f"dt={rows[0][1]:g}"))
    dec = all(b < a for a, b in zip(errs, errs[1:]))
    out.checks.append(Check("cross_oracle_decreasing", dec, detail=", ".join(f"{e:.3g}" for e in errs)))
    mx = max(r[3] for r in rows)
    out.checks.append(Check("mass_defect_per_step", mx <= cfg["tol_mass_step"], mx,
                            cfg["tol_mass_step"]))
    lr = max(r[4] for r in rows)
    out.checks.append(Check("log_rescale", lr <= 1e-3, lr, 1e-3))
    return out


def exp_stationary_check(cfg: ExperimentConfig, d: Path) -> Outcome:
    p, dt, n = cfg.params, cfg.dt, cfg["n_traj"]
    seed = cfg["master_seed"]
    sd = StationaryDensity.from_params(p)
    masses = _masses(cfg, sd)
    out = Outcome(seeds=_seed_info(seed, n))
    # exact sampler against the density
    draws = sample(sd, cfg["n_samples"], NoiseStream(seed, SAMPLER_STREAM))
    hist = histogram(draws, cfg["n_bins"])
    e = hist.edges
    width = e[1] - e[0]
    write_csv(d / "sampler_hist.csv", ["lo", "hi", "count", "empirical_pdf", "exact_pdf"],
              zip(e[:-1], e[1:], hist.counts, hist.masses / width, masses / width))
    pval = chi_square_pvalue(hist, masses)
    out.checks.append(Check("sampler_chi2", pval > 1e-3, pval, 1e-3))
    # the law of an ensemble started from the stationary law does not move
    times = _record_times(cfg, [1.0, 5.0, 10.0, cfg["T"]])
    g0 = np.exp(1j * sample(sd, n, NoiseStream(seed, INIT_STREAM)))
    ens = simulate_ensemble(g0, p, cfg["T"], dt, seed, n_traj=n, record_times=times,
                            workers=cfg["workers"], scheme=cfg["scheme"])
    rows, floor = _tv_rows(ens, times, cfg, masses)
    write_csv(d / "tv.csv", ["t", "tv", "floor_mean", "floor_sd"], rows)
    lim = floor.level(cfg["sigma"])
    worst = max(r[1] for r in rows)
    out.checks.append(Check("stationarity_tv", worst <= lim, worst, round(lim, 6),
                            f"max over t in {{{', '.join(f'{t:g}' for t in times)}}}"))
    # mean of Re h: quadrature against the Bessel ratio I1/I0
    mq = mean_re(sd)
    mb = float(special.i1e(sd.kappa) / special.i0e(sd.kappa))
    out.checks.append(Check("mean_re_quadrature", abs(mq - mb) <= 1e-10, abs(mq - mb), 1e-10))
    # ergodic average along one stationary path
    gE = complex(np.exp(1j * sample(sd, 1, NoiseStream(seed, ERGODIC_STREAM + 1))[0]))
    path = simulate_path(gE, p, cfg["ergodic_T"], dt, NoiseStream(seed, ERGODIC_STREAM),
                         scheme=cfg["scheme"])
    avg_re, se_re = ergodic_average(path, np.real), batch_means_se(path, np.real)
    avg_im, se_im = ergodic_average(path, np.imag), batch_means_se(path, np.imag)
    write_csv(d / "ergodic.csv", ["observable", "average", "batch_se", "target"],
              [("re", avg_re, se_re, mq), ("im", avg_im, se_im, 0.0)])
    zr = abs(avg_re - mq) / se_re
    out.checks.append(Check("ergodic_re", zr <= 3, zr, 3, "standard errors from the mean"))
    zi = abs(avg_im) / se_im
    out.checks.append(Check("ergodic_im", zi <= 3, zi, 3, "standard errors from 0"))
    # distance statistic of the final ensemble state
    dh = distance_histogram(ens.h[:, -1], cfg["n_bins"])
    write_csv(d / "dist_hist.csv", ["lo", "hi", "count"], zip(dh.edges[:-1], dh.edges[1:], dh.counts))
    dist = np.sqrt(np.maximum(2 - 2 * ens.h[:, -1].real, 0.0))
    out.summary.update(kappa=sd.kappa, mean_re=mq,
                       q_quadrature=distance_quantile(sd, cfg["quantile"]),
                       q_empirical=float(np.quantile(dist, cfg["quantile"])))
    return out


def exp_tv_decay(cfg: ExperimentConfig, d: Path) -> Outcome:
    p, seed = cfg.params, cfg["master_seed"]
    starts = cfg["starts"]
    out = Outcome(seeds=_seed_info(seed, cfg["n_traj"]))
    fits, curves, grid = [], [], None
    for i, x in enumerate(starts):
        x = x / abs(x)
        try:
            f = tv_decay_fit(p, [x], cfg["T"], cfg["n_traj"], cfg["n_bins"], cfg.dt,
                             cfg["n_times"], cfg["floor_factor"], derive_seed(seed, i),
                             cfg["workers"])
        except NoiseFloorError as exc:
            out.checks.append(Check(f"decay_fit_start{i}", False, detail=str(exc)))
            fits.append(None)
            continue
        grid, floor = f.times, f.floor
        curves.append((i, f.tv))
        fits.append(f)
        ok = f.gamma_star > 0 and f.r_squared >= cfg["min_r_squared"]
        out.checks.append(Check(f"decay_fit_start{i}", ok, f.r_squared, cfg["min_r_squared"],
                                f"x={_format(x)}, gamma*={f.gamma_star:.4g}"))
    if grid is not None:
        write_csv(d / "tv_decay.csv", ["t"] + [f"tv_start{i}" for i, _ in curves] + ["floor"],
                  [(t, *[c[k] for _, c in curves], floor) for k, t in enumerate(grid)])
    write_csv(d / "fits.csv", ["start", "re_x", "im_x", "gamma_star", "c", "r_squared", "window"],
              [(i, x.real, x.imag, f.gamma_star, f.c, f.r_squared, len(f.window))
               for i, (x, f) in enumerate(zip(starts, fits)) if f is not None])
    rates = [f.gamma_star for f in fits if f is not None]
    if len(starts) > 1:
        ratio = max(rates) / min(rates) if len(rates) == len(starts) else math.inf
        out.checks.append(Check("decay_rates_agree", ratio <= cfg["max_rate_ratio"], ratio,
                                cfg["max_rate_ratio"]))
    out.summary["gamma_star"] = rates
    return out


def exp_ldp_table(cfg: ExperimentConfig, d: Path) -> Outcome:
    a, b = (math.radians(x) for x in cfg["arc_degrees"])
    F = [(a, b)]
    kappas = cfg["kappas"]
    slopes = ldp_empirical_slope(F, kappas)
    lim = ldp_limit(F)
    rows = []
    inside = True
    for k, s in zip(kappas, slopes):
        lo, hi = ldp_bounds(F, k)
        inside &= lo <= s <= hi
        rows.append((k, s, lo, hi, lim))
    write_csv(d / "ldp.csv", ["kappa", "slope", "lower", "upper", "limit"], rows)
    out = Outcome(summary={"limit": lim})
    out.checks.append(Check("ldp_sandwich", bool(inside)))
    k_max = int(np.argmax(kappas))
    dev = abs(float(slopes[k_max]) - lim)
    out.checks.append(Check("ldp_limit", dev <= cfg["ldp_tol"], dev, cfg["ldp_tol"],
                            f"kappa={kappas[k_max]:g}"))
    return out


EXPERIMENTS: dict[str, Callable[[ExperimentConfig, Path], Outcome]] = {
    "sde_path": exp_sde_path,
    "sde_ensemble": exp_sde_ensemble,
    "boundary_ensemble": exp_boundary_ensemble,
    "spde_run": exp_spde_run,
    "cross_oracle": exp_cross_oracle,
    "stationary_check": exp_stationary_check,
    "tv_decay": exp_tv_decay,
    "ldp_table": exp_ldp_table,
}


# -- run / sweep ----------------------------------------------------------------

def _error_info(exc: Exception) -> dict:
    return {"type": type(exc).__name__, "message": str(exc),
            "t": getattr(exc, "t", None), "stream_id": getattr(exc, "stream_id", None)}


def _stored_hash(directory) -> str | None:
    try:
        return json.loads((Path(directory) / "manifest.json").read_text())["config_hash"]
    except (OSError, ValueError, KeyError, TypeError):
        return None


def run(config: ExperimentConfig, resume: bool = True, overwrite: bool = False) -> RunManifest:
    """Execute ``config`` into its output directory and return the manifest.

    An existing directory whose manifest matches the config and whose outputs
    verify is reused as is.  Module errors are caught and recorded in the
    manifest with the time and stream id of the failure.
    """
    if config.kind == "sweep":
        return sweep(config, resume=resume)
    target = config.out
    if target.exists():
        done = verify_manifest(target) if resume else None
        if done is not None and done.config_hash == config.data_hash():
            done.resumed = True
            return done
        # a damaged copy of this same run may be replaced, anything else only on request
        if not overwrite and any(target.iterdir()) and _stored_hash(target) != config.data_hash():
            raise ConfigError(f"output directory {target} exists and does not hold this run")
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    start = time.perf_counter()
    status, error = "ok", None
    try:
        outcome = EXPERIMENTS[config.kind](config, tmp)
        write_gnuplot(tmp, config.kind)
    except StochLoheError as exc:
        outcome, status, error = Outcome(), "failed", _error_info(exc)
    outputs = {f.name: sha256_file(f) for f in sorted(tmp.iterdir()) if f.is_file()}
    m = RunManifest(config.kind, config.echo(), list(config.overrides),
                    outcome.seeds, round(time.perf_counter() - start, 3),
                    [c.__dict__ for c in outcome.checks], outputs, status, error,
                    outcome.summary, config_hash=config.data_hash())
    (tmp / "manifest.json").write_text(m.to_json(), encoding="utf-8")
    if target.exists():
        shutil.rmtree(target)
    os.replace(tmp, target)
    m.directory = str(target)
    return m


def _equal(a: float, b: float) -> bool:
    return abs(a - b) <= 1e-12 * max(abs(a), abs(b))


def _load_hist(path) -> Histogram:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    edges = np.r_[data[:, 0], data[-1, 1]]
    counts = data[:, 2].astype(np.int64)
    return Histogram(edges, counts, int(counts.sum()))


def sweep(base: ExperimentConfig, grid=None, resume: bool = True) -> RunManifest:
    """Run ``base_kind`` at each ``(K, eps)`` of the grid and summarize by ``kappa = 2K/eps^2``.

    Point ``i`` uses master seed ``derive_seed(master_seed, i)`` and writes to
    ``point_iii`` inside the sweep directory.  Finished points are skipped on
    rerun; failed points are listed without discarding the others.
    """
    grid = tuple(grid if grid is not None else base["grid"] or ())
    if not grid:
        raise ConfigError("sweep needs a nonempty grid")
    root = base.out
    root.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    points, checks = [], []
    for i, (K, eps) in enumerate(grid):
        try:
            cfg = base.replace(kind=base["base_kind"], K=float(K), eps=float(eps),
                               master_seed=derive_seed(base["master_seed"], i),
                               out=str(root / f"point_{i:03d}"), grid=None)
            m = run(cfg, resume=resume, overwrite=True)
        except (StochLoheError, ValueError) as exc:
            points.append({"index": i, "K": K, "eps": eps, "status": "failed",
                           "error": _error_info(exc)})
            continue
        points.append({"index": i, "K": K, "eps": eps, "status": m.status, "passed": m.passed,
                       "error": m.error, "summary": m.summary, "resumed": m.resumed,
                       "kappa": cfg.params.kappa, "dir": f"point_{i:03d}"})
    # kappa classes in order of first appearance
    classes: list[float] = []
    for pt in points:
        k = 2 * pt["K"] / pt["eps"] ** 2 if pt["eps"] > 0 else math.inf
        pt["kappa"] = k
        match = [c for c, kc in enumerate(classes) if _equal(kc, k)]
        if not match:
            classes.append(k)
        pt["kappa_class"] = match[0] if match else len(classes) - 1
    rows = []
    for pt in points:
        s = pt.get("summary") or {}
        rows.append((pt["index"], pt["K"], pt["eps"], pt["kappa"], pt["kappa_class"], pt["status"],
                     str(pt.get("passed", False)).lower(), s.get("q_quadrature", math.nan),
                     s.get("q_empirical", math.nan)))
    tmp = root / ".summary.csv.tmp"
    write_csv(tmp, ["index", "K", "eps", "kappa", "kappa_class", "status", "passed",
                    "q_quadrature", "q_empirical"], rows)
    os.replace(tmp, root / "summary.csv")
    write_gnuplot(root, "sweep")
    ok_points = [pt for pt in points if pt["status"] == "ok"]
    failed = [pt["index"] for pt in points if pt["status"] != "ok"]
    checks.append(Check("grid_points_completed", not failed, len(ok_points), len(points),
                        f"failed: {failed}" if failed else ""))
    checks.extend(Check(f"point{pt['index']}_checks", bool(pt["passed"])) for pt in ok_points)
    # equal-kappa classes must give statistically indistinguishable distance laws
    for c in range(len(classes)):
        members = [pt for pt in ok_points if pt["kappa_class"] == c
                   and (root / pt["dir"] / "dist_hist.csv").is_file()]
        for a, b in zip(members, members[1:]):
            ha = _load_hist(root / a["dir"] / "dist_hist.csv")
            hb = _load_hist(root / b["dir"] / "dist_hist.csv")
            tv = tv_distance(ha, hb)
            lim = base["floor_factor"] * two_sample_noise_floor(ha, hb).mean
            checks.append(Check(f"kappa_collapse_{a['index']}_{b['index']}", tv <= lim, tv,
                                round(lim, 6), f"kappa={classes[c]:g}"))
    # the distance quantile falls as kappa grows
    qs = {}
    for pt in ok_points:
        q = (pt.get("summary") or {}).get("q_quadrature")
        if q is not None:
            qs.setdefault(pt["kappa_class"], (pt["kappa"], q))
    if len(qs) > 1:
        seq = [q for _, q in sorted(qs.values())]
        checks.append(Check("quantile_decreasing_in_kappa",
                            all(b < a for a, b in zip(seq, seq[1:])),
                            detail=", ".join(f"{q:.4g}" for q in seq)))
    outputs = {name: sha256_file(root / name) for name in ("plot.gp", "summary.csv")}
    status = "ok" if not failed else ("partial" if ok_points else "failed")
    m = RunManifest("sweep", base.echo(), list(base.overrides),
                    {"master_seed": base["master_seed"],
                     "point_seeds": [derive_seed(base["master_seed"], i) for i in range(len(grid))]},
                    round(time.perf_counter() - start, 3), [c.__dict__ for c in checks], outputs,
                    status, None, {"points": points, "kappa_classes": classes},
                    config_hash=base.data_hash())
    tmp = root / ".manifest.json.tmp"
    tmp.write_text(m.to_json(), encoding="utf-8")
    os.replace(tmp, root / "manifest.json")
    m.directory = str(root)
    return m
