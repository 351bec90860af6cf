import json
import subprocess
import sys

import pytest

from outletflow.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main


def _write(tmp_path, name="run.json", **cfg):
    base = {"version": 1, "domain": {"preset": "straight_strip"}, "fluxes": [-1, 1], "p": 3,
            "t": 3, "h": 0.25, "t_list": [2, 4, 8, 16], "verify": {"n_probes": 3}}
    base.update(cfg)
    path = tmp_path / name
    path.write_text(json.dumps(base))
    return str(path)


def test_carrier_verify_strip(tmp_path):
    cfg = _write(tmp_path)
    assert main(["carrier-verify", "--config", cfg, "--out", str(tmp_path / "o"), "--quiet"]) == EXIT_OK
    rows = (tmp_path / "o" / "carrier_report.csv").read_text().splitlines()
    assert len(rows) == 5
    assert (tmp_path / "o" / "carrier.vtk").exists()


def test_carrier_verify_zero_flux(tmp_path):
    cfg = _write(tmp_path, fluxes=[0, 0], t_list=[2, 4])
    assert main(["carrier-verify", "--config", cfg, "--out", str(tmp_path / "o"), "--quiet"]) == EXIT_OK
    rep = json.loads((tmp_path / "o" / "carrier_report.json").read_text())
    assert rep["bounded"] and all(r["ratio_i"] == 0 for r in rep["rows"])


def test_flux_imbalance_is_config_error(tmp_path, caplog):
    cfg = _write(tmp_path, fluxes=[1, 1])
    assert main(["carrier-verify", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "FluxImbalance" in caplog.text


@pytest.mark.parametrize("bad", [
    {"t_list": [4, 2]},
    {"version": 7},
    {"bogus": 1},
    {"domain": {"preset": "nope"}},
    {"domain": "missing.json"},
    {"fluxes": [1, 0, -1]},
    {"solver": {"tolerance": 1}},
])
def test_config_errors(tmp_path, bad):
    cfg = _write(tmp_path, **bad)
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "o"), "--quiet"]) == EXIT_CONFIG


def test_unreadable_config(tmp_path):
    path = tmp_path / "x.json"
    path.write_text("{not json")
    assert main(["solve", "--config", str(path), "--quiet"]) == EXIT_CONFIG
    assert main(["solve", "--config", str(tmp_path / "none.json"), "--quiet"]) == EXIT_CONFIG


def test_solve_zero_flux(tmp_path):
    cfg = _write(tmp_path, fluxes=[0, 0])
    assert main(["solve", "--config", cfg, "--out", str(tmp_path / "o"), "--quiet"]) == EXIT_OK
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["residual"] == 0 and all(r["flux"] == 0 for r in man["fluxes"])
    assert (tmp_path / "o" / "solution.vtk").exists()


def test_solve_strip_writes_fields(tmp_path):
    cfg = _write(tmp_path, p=2, t=4, h=0.125)
    assert main(["solve", "--config", cfg, "--out", str(tmp_path / "o"), "--quiet"]) == EXIT_OK
    assert (tmp_path / "o" / "solution.vtk").read_text().startswith("# vtk DataFile")
    assert (tmp_path / "o" / "convergence.csv").read_text().startswith("iter,phase,residual,step")
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["flux_deviation"] <= 1e-3


def test_non_convergent_solve(tmp_path):
    cfg = _write(tmp_path, fluxes=[-1000, 1000], p=2, t=4, h=0.5, solver={"max_iters": 5})
    assert main(["solve", "--config", cfg, "--out", str(tmp_path / "o"), "--quiet"]) == EXIT_NUMERIC
    log = (tmp_path / "o" / "convergence.csv").read_text().splitlines()
    assert len(log) >= 2


def test_sweep_zero_flux(tmp_path):
    cfg = _write(tmp_path, fluxes=[0, 0], t_list=[2, 4])
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "o"), "--quiet"]) == EXIT_OK
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["fit"]["c1"] == 0 and man["fit"]["c2"] == 0


def test_sweep_strip_is_deterministic(tmp_path):
    cfg = _write(tmp_path, t_list=[4, 8, 16], h=0.125)
    for name in ("a", "b"):
        assert main(["sweep", "--config", cfg, "--out", str(tmp_path / name), "--quiet"]) == EXIT_OK
    for f in ("growth.csv", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["checks"]["growth_fit"] and man["checks"]["cauchy"]
    assert man["fit"]["t"] == 4


def test_seed_override_changes_probe_ratios(tmp_path):
    cfg = _write(tmp_path, t_list=[2, 4])
    main(["carrier-verify", "--config", cfg, "--out", str(tmp_path / "a"), "--seed", "1", "--quiet"])
    main(["carrier-verify", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "2", "--quiet"])
    assert (tmp_path / "a" / "carrier_report.csv").read_text() != (tmp_path / "b" / "carrier_report.csv").read_text()


def test_benchmark_rejects_curved_domain(tmp_path):
    cfg = _write(tmp_path, domain={"preset": "s_channel"})
    assert main(["benchmark-poiseuille", "--config", cfg, "--out", str(tmp_path / "o"), "--quiet"]) == EXIT_CONFIG


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "outletflow", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("carrier-verify", "solve", "sweep", "benchmark-poiseuille"):
        assert cmd in out.stdout
