import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from outletflow.carrier import build_carrier_2d
from outletflow.continuation import (GrowthReport, fit_linear, growth_functionals, run_truncation_sequence,
                                     subdomain_difference, write_report)
from outletflow.errors import SectionNotAligned
from outletflow.geometry import cut_domain, straight_strip
from outletflow.meshing import mesh_cut_domain
from outletflow.solver import SolverConfig, solve_truncated


@pytest.fixture(scope="module")
def strip_sweep():
    return run_truncation_sequence(straight_strip(), [-1.0, 1.0], [4, 8, 16], SolverConfig(p=3.0),
                                   h=0.125, carrier_probes=3)


@pytest.fixture(scope="module")
def small_state():
    dom = straight_strip()
    cd = cut_domain(dom, 4.0)
    mesh = mesh_cut_domain(cd, 0.25)
    return solve_truncated(cd, mesh, build_carrier_2d(dom, [-1.0, 1.0]), SolverConfig(p=3.0))


def test_zero_state_has_zero_functionals():
    dom = straight_strip()
    cd = cut_domain(dom, 3.0)
    mesh = mesh_cut_domain(cd, 0.25)
    state = solve_truncated(cd, mesh, build_carrier_2d(dom, [0.0, 0.0]), SolverConfig(p=3.0))
    taus, y, etas, z = growth_functionals(state)
    assert np.all(y == 0) and np.all(z == 0)
    np.testing.assert_array_equal(taus, [1, 2, 3])
    np.testing.assert_array_equal(etas, [2, 3])


def test_p_term_is_monotone_and_z_is_trapezoid(small_state):
    taus, y, etas, z = growth_functionals(small_state)
    ux, uy = small_state.u
    space = small_state.space
    from outletflow.meshing import region_mask

    G = space.gradients(ux, uy)
    gp = np.sum(G * G, axis=(-2, -1)) ** 1.5
    pterm = [space.integrate(gp[region_mask(space.mesh, t)], region_mask(space.mesh, t)) for t in taus]
    assert np.all(np.diff(pterm) >= 0)
    assert np.all(y >= 0)
    for eta, zv in zip(etas, z):
        j = int(np.flatnonzero(taus == eta)[0])
        assert zv == pytest.approx(0.5 * (y[j - 1] + y[j]))


def test_recomputing_with_the_stored_carrier_is_identical(small_state):
    a = growth_functionals(small_state)
    b = growth_functionals(small_state, build_carrier_2d(straight_strip(), [-1.0, 1.0]))
    np.testing.assert_allclose(a[1], b[1], rtol=1e-12)


def test_off_grid_tau_rejected(small_state):
    with pytest.raises(SectionNotAligned):
        growth_functionals(small_state, tau_grid=[1.0, 2.5])
    with pytest.raises(SectionNotAligned):
        subdomain_difference(small_state, small_state, 2.5)


def test_difference_to_itself_is_zero(small_state):
    assert subdomain_difference(small_state, small_state, 2.0) == pytest.approx(0.0, abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(c1=st.floats(-10, 10), c2=st.floats(-10, 10))
def test_fit_recovers_a_line(c1, c2):
    taus = np.arange(1.0, 9.0)
    a, b = fit_linear(taus, c1 * taus + c2)
    assert a == pytest.approx(c1, abs=1e-9) and b == pytest.approx(c2, abs=1e-9)


def test_zero_flux_sequence():
    states, rep = run_truncation_sequence(straight_strip(), [0.0, 0.0], [2, 4], SolverConfig(p=3.0), h=0.25,
                                          carrier_probes=2)
    assert rep.complete
    assert all(np.abs(s.ux).max() == 0 for s in states)
    assert all(d == 0 for *_, d in rep.differences)
    assert all(r["y"] == 0 for r in rep.rows)
    assert all(rep.checks().values())


def test_rejects_non_increasing_t_list():
    with pytest.raises(ValueError):
        run_truncation_sequence(straight_strip(), [-1.0, 1.0], [4, 2], SolverConfig(p=3.0))


def test_failed_solve_gives_partial_report():
    states, rep = run_truncation_sequence(straight_strip(), [-1e3, 1e3], [2, 3], SolverConfig(p=2.0, max_iters=4),
                                          h=0.5, carrier_check=False)
    assert not rep.complete and states == []
    assert "NonlinearDivergence" in rep.error
    assert rep.runs[0]["converged"] is False


def test_strip_sweep_properties(strip_sweep):
    states, rep = strip_sweep
    assert [s.t for s in states] == [4, 8, 16]
    assert rep.fit_t == 4
    checks = rep.checks()
    assert checks["cauchy"] and checks["y_over_tau"] and checks["growth_fit"]
    assert rep.difference(4, 8, 2.0) >= rep.difference(8, 16, 2.0)
    # y on tau in 2..8 of the t = 8 run lies under the fitted line up to 10 %
    c1, c2 = rep.fit
    taus, y = rep.y_values(8.0)
    sel = (taus >= 2) & (taus <= 8)
    assert np.max(y[sel] / (c1 * taus[sel] + c2)) <= 1.1
    for run in rep.runs:
        assert run["converged"] and run["energy_residual"] <= 1e-6
    assert max(r["flux_error"] for r in rep.rows) <= 1e-3


def test_report_files(strip_sweep, tmp_path):
    _, rep = strip_sweep
    write_report(rep, tmp_path, straight_strip(), SolverConfig(p=3.0), [-1.0, 1.0])
    header = (tmp_path / "growth.csv").read_text().splitlines()[0]
    assert header == ",".join(GrowthReport.CSV_COLUMNS)
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["domain_hash"] == straight_strip().digest()
    assert set(man["fit"]) == {"c1", "c2", "t"}
    assert "seconds" not in json.dumps(man)
