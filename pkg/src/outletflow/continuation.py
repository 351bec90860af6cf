"""Truncation sequences: solve on Omega_t for growing t and track growth functionals.

For a state on Omega_t with flux-free part u = v - a_h,

    y(tau) = ||grad u||^2_{L2(Omega_tau)} / tau + ||grad u||^p_{Lp(Omega_tau)}
    z(eta) = integral of y over [eta - 1, eta]   (eta = 2, 3, ...)

Section-snapped meshes make every Omega_tau (tau in the snap set) an exact
union of triangles, so these are plain quadratures.  Differences between
solutions for different t are measured in W^{1,p}(Omega_tau).
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import trapezoid

from .carrier import build_carrier_2d, verify_carrier
from .diagnostics import energy_residual, flux_audit
from .errors import NonlinearDivergence, OutletFlowError, SectionNotAligned
from .fem import TaylorHood
from .geometry import cross_section, cut_domain
from .meshing import mesh_cut_domain, region_mask
from .solver import FlowState, SolverConfig, lift, solve_truncated

log = logging.getLogger(__name__)


def _check_taus(mesh, taus):
    for tau in taus:
        if not any(abs(tau - s) < 1e-12 for s in mesh.snap):
            raise SectionNotAligned(f"tau={tau} is not a snap depth {mesh.snap}")


def growth_functionals(state: FlowState, carrier=None, tau_grid=None):
    """y on ``tau_grid`` (default: every snap depth) and z on the integers eta >= 2.

    Returns (taus, y, etas, z).  When ``carrier`` is given, u is recomputed
    as v minus the P2 interpolant of that carrier instead of the stored lift.
    """
    space = state.space
    mesh = space.mesh
    taus = np.array(sorted(mesh.snap if tau_grid is None else tau_grid), dtype=float)
    _check_taus(mesh, taus)
    if carrier is not None and carrier is not state.carrier:
        ax, ay = lift(space, carrier)
        ux, uy = state.ux - ax, state.uy - ay
    else:
        ux, uy = state.u
    p = state.config.p
    G = space.gradients(ux, uy)
    g2 = np.sum(G * G, axis=(-2, -1))
    gp = g2 ** (p / 2)
    y = np.empty(len(taus))
    for j, tau in enumerate(taus):
        m = region_mask(mesh, tau)
        y[j] = space.integrate(g2[m], m) / tau + space.integrate(gp[m], m)
    etas = np.arange(2, math.floor(taus[-1] + 1e-12) + 1, dtype=float)
    z = np.empty(len(etas))
    for j, eta in enumerate(etas):
        sel = (taus >= eta - 1 - 1e-12) & (taus <= eta + 1e-12)
        tt, yy = taus[sel], y[sel]
        if len(tt) < 2 or abs(tt[0] - (eta - 1)) > 1e-12 or abs(tt[-1] - eta) > 1e-12:
            raise SectionNotAligned(f"tau grid does not resolve the window [{eta - 1}, {eta}]")
        z[j] = float(trapezoid(yy, tt))
    return taus, y, etas, z


def subdomain_difference(s1: FlowState, s2: FlowState, tau, p=None):
    """||v2 - v1||_{W^{1,p}(Omega_tau)} with quadrature on the mesh of ``s2``.

    The mesh of s2 restricted to Omega_tau must be a union of triangles on
    which s1 is polynomial (nested-compatible meshes); s1 is evaluated at
    the quadrature points of s2, so the result is exact in that case.
    """
    p = p or s2.config.p
    sp2, sp1 = s2.space, s1.space
    _check_taus(sp2.mesh, [tau])
    _check_taus(sp1.mesh, [tau])
    m = region_mask(sp2.mesh, tau)
    q = sp2.q_points[m].reshape(-1, 2)
    v1, g1 = sp1.evaluate(s1.ux, s1.uy, q, with_gradient=True)
    nt, nq = int(m.sum()), sp2.q_points.shape[1]
    v2 = sp2.values(s2.ux, s2.uy, m).reshape(-1, 2)
    g2 = sp2.gradients(s2.ux, s2.uy, m).reshape(-1, 2, 2)
    dv = np.sum((v2 - v1) ** 2, axis=1) ** (p / 2)
    dg = np.sum((g2 - g1) ** 2, axis=(1, 2)) ** (p / 2)
    total = sp2.integrate((dv + dg).reshape(nt, nq), m)
    return total ** (1.0 / p)


def fit_linear(taus, y):
    """Least-squares (c1, c2) with y ~ c1 tau + c2."""
    A = np.column_stack([taus, np.ones_like(taus)])
    (c1, c2), *_ = np.linalg.lstsq(A, y, rcond=None)
    return float(c1), float(c2)


@dataclass
class GrowthReport:
    rows: list = field(default_factory=list)  # one dict per (t, tau)
    z_rows: list = field(default_factory=list)  # one dict per (t, eta)
    differences: list = field(default_factory=list)  # (t1, t2, tau, d)
    runs: list = field(default_factory=list)  # per-t convergence stats
    timings: dict = field(default_factory=dict)  # wall seconds per t, kept out of the manifest
    fit: tuple = (0.0, 0.0)
    fit_t: float = None
    max_fit_ratio: float = 0.0
    carrier_ratios: dict = field(default_factory=dict)
    complete: bool = True
    error: str = ""

    CSV_COLUMNS = ("t", "tau", "y", "z", "flux_error", "ratio_i", "diff_prev")

    def difference(self, t1, t2, tau):
        for a, b, c, d in self.differences:
            if a == t1 and b == t2 and abs(c - tau) < 1e-12:
                return d
        raise KeyError((t1, t2, tau))

    def y_values(self, t):
        r = [row for row in self.rows if row["t"] == t]
        return np.array([row["tau"] for row in r]), np.array([row["y"] for row in r])

    def checks(self, tol=1.1, ratio_factor=2.0):
        """Growth, Cauchy and ratio checks; returns a dict of name -> bool."""
        out = {"growth_fit": self.max_fit_ratio <= tol}
        by_tau = {}
        for t1, t2, tau, d in self.differences:
            by_tau.setdefault(tau, []).append((min(t1, t2), d))
        cauchy = True
        for seq in by_tau.values():
            ds = [d for _, d in sorted(seq)]
            cauchy &= all(b <= a * (1 + 1e-9) + 1e-14 for a, b in zip(ds, ds[1:]))
        out["cauchy"] = cauchy
        ts = sorted({row["t"] for row in self.rows})
        if len(ts) >= 2:
            t_lo, t_hi = ts[0], ts[-1]
            tl, yl = self.y_values(t_lo)
            th, yh = self.y_values(t_hi)
            ok = True
            for tau, yv in zip(tl, yl):
                k = np.flatnonzero(np.abs(th - tau) < 1e-12)
                if len(k) and tau > 0:
                    ok &= bool(yh[k[0]] / tau <= ratio_factor * yv / tau + 1e-14)
            out["y_over_tau"] = ok
        if self.carrier_ratios:
            vals = [self.carrier_ratios[t] for t in sorted(self.carrier_ratios)]
            ref = max(vals[:2])
            out["carrier_ratio_persistent"] = all(v <= ref * (1 + 1e-9) + 1e-14 for v in vals)
        return out

    def to_csv(self, path):
        zmap = {(r["t"], r["eta"]): r["z"] for r in self.z_rows}
        with open(path, "w") as fh:
            fh.write(",".join(self.CSV_COLUMNS) + "\n")
            for r in self.rows:
                z = zmap.get((r["t"], r["tau"]))
                cells = [f"{r['t']:g}", f"{r['tau']:g}", f"{r['y']:.12e}",
                         "" if z is None else f"{z:.12e}", f"{r['flux_error']:.6e}",
                         "" if r.get("ratio_i") is None else f"{r['ratio_i']:.12e}",
                         "" if r.get("diff_prev") is None else f"{r['diff_prev']:.12e}"]
                fh.write(",".join(cells) + "\n")

    def manifest(self, domain=None, config=None, fluxes=None, extra=None):
        out = {
            "complete": self.complete,
            "error": self.error,
            "fit": {"c1": self.fit[0], "c2": self.fit[1], "t": self.fit_t},
            "max_fit_ratio": self.max_fit_ratio,
            "differences": [{"t1": a, "t2": b, "tau": c, "d": d} for a, b, c, d in self.differences],
            "runs": self.runs,
            "checks": self.checks() if self.rows else {},
        }
        if domain is not None:
            out["domain_hash"] = domain.digest()
        if config is not None:
            out["config"] = asdict(config)
        if fluxes is not None:
            out["fluxes"] = [float(f) for f in fluxes]
        if extra:
            out.update(extra)
        return out


def _extend(prev: FlowState, space: TaylorHood):
    """u of ``prev`` extended by zero to the nodes of ``space``."""
    ux, uy = prev.u
    vals = prev.space.evaluate(ux, uy, space.nodes)
    return vals[:, 0], vals[:, 1]


def run_truncation_sequence(domain, fluxes, t_list, config: SolverConfig, h=0.125,
                            carrier=None, diff_taus=(2.0,), carrier_check=True,
                            carrier_probes=5, carrier_h=0.25, seed=0, warm_start=True):
    """Solve on Omega_t for each t in ``t_list`` and collect a GrowthReport.

    Each solve is warm-started from the previous flux-free part extended by
    zero.  A failing solve stops the sequence; the partial report has
    ``complete = False`` and the error message.
    """
    t_list = [float(t) for t in t_list]
    if any(b <= a for a, b in zip(t_list, t_list[1:])):
        raise ValueError("t_list must be strictly increasing")
    carrier = carrier or build_carrier_2d(domain, fluxes)
    report = GrowthReport()
    states = []
    if carrier_check:
        rng_seed = seed
        cr = verify_carrier(carrier, domain, t_list, p=config.p, h=carrier_h,
                            n_probes=carrier_probes, seed=rng_seed)
        report.carrier_ratios = {row["t"]: row["ratio_i"] for row in cr.rows}
    for t in t_list:
        t0 = time.perf_counter()
        cd = cut_domain(domain, t)
        mesh = mesh_cut_domain(cd, h)
        space = TaylorHood(mesh)
        initial = None
        if warm_start and states:
            ax, ay = lift(space, carrier)
            ex, ey = _extend(states[-1], space)
            initial = np.concatenate([ex + ax, ey + ay])
        try:
            state = solve_truncated(cd, mesh, carrier, config, initial=initial, space=space)
        except (NonlinearDivergence, OutletFlowError) as exc:
            report.complete = False
            report.error = f"t={t:g}: {type(exc).__name__}: {exc}"
            report.runs.append({"t": t, "converged": False, "error": str(exc),
                                "history": [list(hh) for hh in getattr(exc, "history", [])]})
            log.error("truncated solve failed at t=%g: %s", t, exc)
            break
        states.append(state)
        taus, y, etas, z = growth_functionals(state)
        secs = [cross_section(domain, i, s) for i in range(domain.k) for s in mesh.snap]
        audit = flux_audit(state, secs, expected=list(carrier.fluxes))
        scale = max(np.abs(carrier.fluxes).max(), 1e-300)
        ferr = audit.max_error / scale if np.any(carrier.fluxes) else audit.max_error
        prev = states[-2] if len(states) > 1 else None
        for tau, yv in zip(taus, y):
            row = {"t": t, "tau": float(tau), "y": float(yv), "flux_error": float(ferr),
                   "ratio_i": report.carrier_ratios.get(t), "diff_prev": None}
            if prev is not None and tau <= prev.t + 1e-12 and any(abs(tau - s) < 1e-12 for s in prev.mesh.snap):
                row["diff_prev"] = subdomain_difference(prev, state, tau)
            report.rows.append(row)
        report.z_rows += [{"t": t, "eta": float(e), "z": float(v)} for e, v in zip(etas, z)]
        if prev is not None:
            for tau in diff_taus:
                d = subdomain_difference(prev, state, tau)
                report.differences.append((prev.t, t, float(tau), float(d)))
        report.timings[t] = time.perf_counter() - t0
        its = [hh for hh in state.history if hh[0] > 0]
        report.runs.append({
            "t": t, "converged": True, "iterations": len(its),
            "picard": sum(1 for hh in its if hh[1] == "picard"),
            "newton": sum(1 for hh in its if hh[1] == "newton"),
            "residual": state.residual, "energy_residual": energy_residual(state),
            "triangles": int(len(mesh.triangles)),
            "epsilon": state.epsilon,
        })
    if states:
        first_t = states[0].t
        taus, y = report.y_values(first_t)
        use = taus >= min(2.0, taus.max())
        report.fit = fit_linear(taus[use], y[use]) if use.sum() >= 2 else fit_linear(taus, y)
        report.fit_t = first_t
        c1, c2 = report.fit
        worst = 0.0
        for r in report.rows:
            line = c1 * r["tau"] + c2
            if line > 0:
                worst = max(worst, r["y"] / line)
            elif r["y"] > 0:
                worst = math.inf
        report.max_fit_ratio = worst
    return states, report


def write_report(report: GrowthReport, out_dir, domain=None, config=None, fluxes=None, extra=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "growth.csv")
    with open(out / "manifest.json", "w") as fh:
        json.dump(report.manifest(domain, config, fluxes, extra), fh, indent=2, sort_keys=True)
        fh.write("\n")
