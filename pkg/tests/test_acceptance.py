"""The nine acceptance criteria at their stated tolerances.

Each test prints one PASS/FAIL line; the lines are repeated in the pytest
terminal summary under "acceptance criteria".
"""

import time

import numpy as np
import pytest

from conftest import STRIP_FLUXES, record_acceptance
from outletflow.carrier import build_carrier_2d, carrier_divergence, verify_carrier
from outletflow.carrier3d import build_spherical_carrier
from outletflow.diagnostics import flux_audit, korn_poincare_check, poiseuille_for_flux, profile_error
from outletflow.geometry import cross_section, cut_domain, straight_strip, t_junction
from outletflow.meshing import default_snap, mesh_polygon
from outletflow.solver import monotonicity_gap


def test_criterion_1_poiseuille_recovery(strip_benchmark):
    ok, parts = True, []
    x_half = (1.0 + 8.0) / 3.0  # middle third of the truncated strip
    for p, tol in ((2.0, 0.02), (3.0, 0.03)):
        state, secs = strip_benchmark[p]
        err = profile_error(state, poiseuille_for_flux(p, 1.0, 1.0), (-x_half, x_half))
        ok &= err <= tol and secs <= 60.0
        parts.append(f"p={p:g} error {err:.2e} (<= {tol}) in {secs:.1f}s (<= 60s)")
    assert record_acceptance(1, ok, "; ".join(parts))


def _wall_points(dom, t, n=400):
    pts = [dom.wall_points(i, np.linspace(0, t, n), side) for i in range(dom.k) for side in (-1.0, 1.0)]
    used = {o.edge for o in dom.outlets}
    core = dom.core
    for e in range(len(core)):
        if e not in used:
            pts.append(core[e] + np.linspace(0, 1, n)[:, None] * (core[(e + 1) % len(core)] - core[e]))
    return np.vstack(pts)


def test_criterion_2_carrier_exactness():
    t0 = time.perf_counter()
    flux_err = trace = div_rel = 0.0
    for dom, fluxes in ((straight_strip(), [-1.0, 1.0]), (t_junction(), [1.0, 2.0, -3.0])):
        field = build_carrier_2d(dom, fluxes)
        t = 8.0
        secs = [cross_section(dom, i, s) for i in range(dom.k) for s in default_snap(dom, t)]
        audit = flux_audit(field, secs, expected=fluxes)
        flux_err = max(flux_err, audit.max_error)
        trace = max(trace, float(np.abs(field.velocity(_wall_points(dom, t))).max()))
        cd = cut_domain(dom, t)
        rng = np.random.default_rng(0)
        lo, hi = cd.vertices.min(axis=0), cd.vertices.max(axis=0)
        pts = rng.uniform(lo, hi, size=(20000, 2))
        pts = pts[cd.contains(pts)]
        _, J = field.evaluate(pts)
        div_rel = max(div_rel, float(np.abs(carrier_divergence(field, pts)).max() / np.abs(J).max()))
    secs_used = time.perf_counter() - t0
    ok = flux_err <= 1e-8 and trace <= 1e-12 and div_rel <= 1e-6 and secs_used <= 5.0
    assert record_acceptance(2, ok, f"flux error {flux_err:.1e}, wall trace {trace:.1e}, "
                                    f"FD divergence {div_rel:.1e} relative, {secs_used:.1f}s")


def test_criterion_3_estimate_i_boundedness(strip_carrier, strip):
    rep = verify_carrier(strip_carrier, strip, (2, 4, 8, 16), p=3.0, n_probes=20, seed=0)
    ratios = rep.column("ratio_i")
    spread = rep.spread("ratio_i")
    ok = spread <= 3.0 and np.all(ratios > 0)
    assert record_acceptance(3, ok, "ratios " + ", ".join(f"{r:.3g}" for r in ratios)
                             + f"; spread {spread:.2f} (<= 3)")


def test_criterion_4_monotonicity():
    rng = np.random.default_rng(0)
    n = 100_000
    ok, parts = True, []
    for p in (2.0, 3.0, 4.0):
        x = rng.normal(size=(n, 2, 2)) * rng.lognormal(0, 1, size=(n, 1, 1))
        y = rng.normal(size=(n, 2, 2)) * rng.lognormal(0, 1, size=(n, 1, 1))
        gap, comp = monotonicity_gap(x, y, p)
        c = float(np.min(gap / comp))
        same, _ = monotonicity_gap(x[:1000], x[:1000], p)
        ok &= c > 0 and np.all(same == 0)
        parts.append(f"p={p:g} c={c:.3g}")
    assert record_acceptance(4, ok, "empirical constants " + ", ".join(parts) + "; gap 0 at x = y")


def test_criterion_5_growth_bound(s_channel_sweep):
    _, states, rep, secs = s_channel_sweep
    ok = rep.complete and rep.fit_t == 4 and rep.max_fit_ratio <= 1.1 and secs <= 600
    c1, c2 = rep.fit
    assert record_acceptance(5, ok, f"S-channel max y/(c1 tau + c2) = {rep.max_fit_ratio:.4f} (<= 1.1), "
                                    f"c1={c1:.4g}, c2={c2:.4g}, sweep {secs:.0f}s (<= 600s)")


def test_criterion_6_cauchy(s_channel_sweep):
    _, _, rep, _ = s_channel_sweep
    d48, d816 = rep.difference(4, 8, 2.0), rep.difference(8, 16, 2.0)
    assert record_acceptance(6, d816 <= d48, f"d(8,16;2) = {d816:.4g} <= d(4,8;2) = {d48:.4g}")


def test_criterion_7_korn():
    square = np.array([(0, 0), (1, 0), (1, 1), (0, 1)], float)
    rep = korn_poincare_check(mesh_polygon(square, h=0.1), samples=1000, seed=0)
    ok = rep.samples >= 1000 and rep.korn_max <= 1 + 1e-10
    assert record_acceptance(7, ok, f"max |grad v|^2 / 2|D v|^2 = {rep.korn_max:.12f} over {rep.samples} fields")


def test_criterion_8_spherical_carrier():
    t0 = time.perf_counter()
    c = build_spherical_carrier([(0, 0, 1), (1, 0, 0), (0, -0.6, -0.8)], [1.0, 1.0, -2.0])
    loops = [c.loop_integral(c.loop(i, 0.4)) for i in (0, 1)]
    caps = [c.cap_flux(i, r) for i in (0, 1) for r in (0.3, 0.7)]
    ref = c.loop_integral(c.loop(0, 0.4))
    homo = max(abs(c.loop_integral(c.loop(0, r, tilt, wob)) - ref)
               for r, tilt, wob in ((0.2, 0.3, 0.0), (0.6, 1.0, 0.2), (0.35, 2.0, 0.4)))
    secs = time.perf_counter() - t0
    loop_err = max(abs(loops[0] - 1), abs(loops[1] - 1))
    cap_err = max(abs(caps[0] - 1), abs(caps[1] - 1), abs(caps[2] - 1), abs(caps[3] - 1))
    ok = loop_err <= 1e-8 and cap_err <= 1e-6 and homo <= 1e-8 and secs <= 10
    assert record_acceptance(8, ok, f"loop error {loop_err:.1e}, cap flux error {cap_err:.1e}, "
                                    f"homotopy spread {homo:.1e}, {secs:.1f}s")


def test_criterion_9_flux_conservation(strip, strip_benchmark, s_channel_sweep):
    worst = 0.0
    for state, _ in strip_benchmark.values():
        secs = [cross_section(strip, i, s) for i in range(2) for s in state.mesh.snap]
        audit = flux_audit(state, secs)
        worst = max(worst, audit.deviation / 1.0)
    dom, states, _, _ = s_channel_sweep
    for state in states:
        secs = [cross_section(dom, i, s) for i in range(2) for s in state.mesh.snap]
        worst = max(worst, flux_audit(state, secs).deviation / 1.0)
    assert record_acceptance(9, worst <= 1e-3, f"max pairwise section flux deviation {worst:.2e} relative to alpha")
