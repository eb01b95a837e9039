import json

import numpy as np
import pytest

from stochlohe.errors import ConfigError
from stochlohe.experiment_runner import (SCHEMA, RunManifest, parse_config, run, sweep,
                                         verify_manifest)


def cfg(tmp_path, kind, *overrides, name="run"):
    return parse_config(f"[experiment]\nkind = {kind}\n",
                        [f"out={tmp_path / name}", *overrides])


# -- parsing ------------------------------------------------------------------

def test_parse_file_and_overrides(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[experiment]\nkind = sde_path\n[model]\nK = 2  # inline comment\neps = 0.5\n"
                 "[numerics]\nh0 = 0.1+0.2j\nT = 1\n", encoding="utf-8")
    c = parse_config(path=p, overrides=["model.eps=0.25", "n_traj=7"])
    assert c.params.K == 2.0 and c.params.eps == 0.25
    assert c["h0"] == 0.1 + 0.2j and c["n_traj"] == 7
    assert c.dt == c.params.dt_max
    assert c.overrides == ("model.eps=0.25", "n_traj=7")
    again = parse_config(c.to_ini())
    assert again.values == c.values


@pytest.mark.parametrize("text,overrides", [
    ("[experiment]\nkind = sde_path\n[model]\nK=1\neps=1\nbogus=3\n", []),
    ("[experiment]\nkind = sde_path\n[nowhere]\nx=1\n", []),
    ("[experiment]\nkind = sde_path\n", ["K=1", "eps=1", "colour=red"]),
    ("[experiment]\nkind = sde_path\n", ["K=1", "eps=1", "model.T=3"]),
    ("[experiment]\nkind = sde_path\n", ["K=1"]),
    ("[experiment]\nkind = teleport\n", ["K=1", "eps=1"]),
    ("[experiment]\nkind = sde_path\n", ["K=1", "eps=1", "dt=0.5"]),
    ("[experiment]\nkind = sde_path\n", ["K=1", "eps=1", "T=1.005", "dt=0.01"]),
    ("[experiment]\nkind = sde_path\n", ["K=1", "eps=1", "h0=1.5"]),
    ("[experiment]\nkind = sde_path\n", ["K=-1", "eps=1"]),
    ("[experiment]\nkind = sde_path\n", ["K=1", "eps=one"]),
    ("[experiment]\nkind = sde_ensemble\n", ["K=1", "eps=1", "h0=1"]),
    ("[experiment]\nkind = boundary_ensemble\n", ["K=1", "eps=1", "h0=0.5"]),
    ("[experiment]\nkind = stationary_check\n", ["K=1", "eps=0"]),
    ("[experiment]\nkind = sweep\n", ["K=1", "eps=1"]),
    ("[experiment]\nkind = sde_path\n", ["K=1", "eps=1", "radii=0.9, 0.5"]),
    ("not an ini file", []),
])
def test_parse_rejects(text, overrides):
    with pytest.raises(ConfigError):
        parse_config(text, overrides)


def test_config_keys_are_unique_across_sections():
    names = [k for keys in SCHEMA.values() for k in keys]
    assert len(names) == len(set(names))


def test_data_hash_ignores_workers_and_out(tmp_path):
    a = cfg(tmp_path, "sde_path", "K=1", "eps=1", "workers=1")
    b = cfg(tmp_path, "sde_path", "K=1", "eps=1", "workers=8", name="elsewhere")
    c = cfg(tmp_path, "sde_path", "K=1", "eps=0.9")
    assert a.data_hash() == b.data_hash() != c.data_hash()


# -- runs ---------------------------------------------------------------------

def test_figure_path_run(tmp_path):
    m = run(cfg(tmp_path, "sde_path", "K=1", "eps=0.2", "T=10", "h0=0"))
    assert m.passed and m.status == "ok"
    data = np.loadtxt(tmp_path / "run" / "path.csv", delimiter=",", skiprows=1)
    assert data[0, 0] == 0 and data[-1, 0] == pytest.approx(10.0)
    assert set(m.outputs) >= {"path.csv", "plot.gp"}
    loaded = RunManifest.load(tmp_path / "run" / "manifest.json")
    assert loaded.config["model"]["eps"] == 0.2 and loaded.version == m.version


def test_identical_config_gives_identical_digests(tmp_path):
    args = ("K=1", "eps=0.5", "T=2", "n_traj=300", "record_times=1, 2")
    a = run(cfg(tmp_path, "sde_ensemble", *args, "workers=1", name="a"))
    b = run(cfg(tmp_path, "sde_ensemble", *args, "workers=3", name="b"))
    assert a.outputs == b.outputs
    assert a.outputs.keys() >= {"escape.csv", "final.csv"}


def test_resume_and_refusal(tmp_path):
    c = cfg(tmp_path, "sde_path", "K=1", "eps=0.5", "T=1")
    first = run(c)
    again = run(c)
    assert again.resumed and again.outputs == first.outputs
    # a corrupted output is detected and the run recomputed
    (tmp_path / "run" / "path.csv").write_text("garbage")
    assert verify_manifest(tmp_path / "run") is None
    redo = run(c)
    assert not redo.resumed and redo.outputs == first.outputs
    other = c.replace(eps=0.4)
    with pytest.raises(ConfigError):
        run(other)
    assert run(other, overwrite=True).outputs != first.outputs


def test_no_partial_directory_on_failure(tmp_path):
    c = cfg(tmp_path, "spde_run", "K=1", "eps=0.5", "T=0.01", "dt=0.001", "n_traj=1",
            "n_points=64", "length=20", "tol_mass_step=1e-30")
    m = run(c)
    assert m.status == "failed" and not m.passed
    assert m.error["type"] == "MassDefectError"
    assert json.loads((tmp_path / "run" / "manifest.json").read_text())["status"] == "failed"
    assert not [p for p in tmp_path.iterdir() if p.name.startswith(".run.")]


def test_cross_oracle_errors_decrease(tmp_path):
    m = run(cfg(tmp_path, "cross_oracle", "K=1", "eps=0.5", "T=1", "dt=0.002", "n_points=128",
                "halvings=2"))
    rows = np.loadtxt(tmp_path / "run" / "oracle.csv", delimiter=",", skiprows=1, ndmin=2)
    err = rows[:, 1]
    assert np.all(np.diff(err) < 0)
    assert m.passed


def test_ldp_and_stationary_runs(tmp_path):
    assert run(cfg(tmp_path, "ldp_table", "K=1", "eps=1", name="ldp")).passed
    m = run(cfg(tmp_path, "stationary_check", "K=1", "eps=1", "T=2", "n_traj=2000",
                "n_samples=50000", "ergodic_T=200", "record_times=1, 2", name="st"))
    assert m.passed, m.check_lines()
    assert 0 < m.summary["q_quadrature"] < 2


# -- sweeps -------------------------------------------------------------------

SWEEP = ("K=1", "eps=1", "T=1", "n_traj=3000", "n_samples=20000", "ergodic_T=100",
         "record_times=1", "n_bins=30")


def test_sweep_equal_kappa_classes(tmp_path):
    base = cfg(tmp_path, "sweep", *SWEEP, "grid=1:0.5, 4:1, 1:1")
    m = sweep(base)
    assert m.status == "ok"
    classes = [p["kappa_class"] for p in m.summary["points"]]
    assert classes == [0, 0, 1]
    names = [c["name"] for c in m.checks]
    assert "kappa_collapse_0_1" in names and "quantile_decreasing_in_kappa" in names
    assert m.passed, [c for c in m.checks if not c["passed"]]
    summary = (tmp_path / "run" / "summary.csv").read_text().splitlines()
    assert summary[0].startswith("index,K,eps,kappa,kappa_class") and len(summary) == 4
    # rerun resumes every point
    again = sweep(base)
    assert all(p["resumed"] for p in again.summary["points"])


def test_sweep_partial_failure(tmp_path):
    base = cfg(tmp_path, "sweep", *SWEEP, "dt=0.01", "grid=1:1, 20:1")
    m = sweep(base)
    assert m.status == "partial"
    assert (tmp_path / "run" / "point_000" / "manifest.json").is_file()
    failed = [p for p in m.summary["points"] if p["status"] == "failed"]
    assert [p["index"] for p in failed] == [1]
    assert not m.passed
