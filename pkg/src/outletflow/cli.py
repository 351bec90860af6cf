"""Command-line front end.

    outletflow {carrier-verify,solve,sweep,benchmark-poiseuille} --config RUN.json
               [--out DIR] [--seed N] [--quiet]

Exit codes: 0 success, 1 a check did not pass, 2 configuration error,
3 numerical failure.

Run configuration (JSON, ``"version": 1``)::

    {
      "version": 1,
      "domain": {"preset": "straight_strip"},   # or a path, or an inline domain dict
      "fluxes": [-1, 1],
      "p": 3,
      "t": 8,                  # solve
      "t_list": [4, 8, 16],    # carrier-verify, sweep
      "h": 0.125,
      "solver": {"newton_tol": 1e-9, "max_iters": 60},
      "carrier": {"delta": null, "s_blend": null},
      "verify": {"n_probes": 20, "h": 0.25, "growth_limit": 3},
      "benchmark": {"p_values": [2, 3], "t": 8, "h": 0.0625},
      "out": "runs/strip",
      "seed": 0
    }

Reports (CSV, JSON) are written with fixed formatting and contain no
timings, so a repeated run with the same config and seed reproduces them
byte for byte.  Timings go to the log only.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import geometry
from .errors import ConfigError, NonlinearDivergence, OutletFlowError

log = logging.getLogger("outletflow")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
SCHEMA_VERSION = 1
PRESETS = {
    "straight_strip": geometry.straight_strip,
    "t_junction": geometry.t_junction,
    "s_channel": geometry.s_channel,
}
_SOLVER_KEYS = {"epsilon", "picard_tol", "newton_tol", "max_iters", "armijo", "min_step",
                "include_convection"}


@dataclass
class RunConfig:
    domain: object
    fluxes: list
    p: float = 2.0
    t: float = 8.0
    t_list: list = field(default_factory=lambda: [2.0, 4.0, 8.0, 16.0])
    h: float = 0.125
    solver: dict = field(default_factory=dict)
    carrier: dict = field(default_factory=dict)
    verify: dict = field(default_factory=dict)
    benchmark: dict = field(default_factory=dict)
    out: str = "outletflow-run"
    seed: int = 0
    version: int = SCHEMA_VERSION
    base_dir: Path = field(default=Path("."), repr=False)

    def domain_object(self):
        spec = self.domain
        try:
            if isinstance(spec, str):
                path = Path(spec)
                if not path.is_absolute():
                    path = self.base_dir / path
                if not path.exists():
                    raise ConfigError(f"domain file not found: {path}")
                return geometry.load_domain(path)
            if isinstance(spec, dict) and "preset" in spec:
                name = spec["preset"]
                if name not in PRESETS:
                    raise ConfigError(f"unknown domain preset {name!r}; choose from {sorted(PRESETS)}")
                return PRESETS[name](**spec.get("args", {}))
            if isinstance(spec, dict):
                return geometry.domain_from_dict(spec)
        except TypeError as exc:
            raise ConfigError(f"bad domain arguments: {exc}") from exc
        raise ConfigError("'domain' must be a path, a preset object or an inline domain")

    def solver_config(self, p=None):
        from .solver import SolverConfig

        unknown = set(self.solver) - _SOLVER_KEYS
        if unknown:
            raise ConfigError(f"unknown solver options: {sorted(unknown)}")
        return SolverConfig(p=float(self.p if p is None else p), **self.solver)

    def canonical(self):
        # the output location is not part of the run's identity
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("base_dir", "out")}


def load_config(path, overrides=None) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(raw, base_dir=path.parent, overrides=overrides)


def config_from_dict(raw, base_dir=Path("."), overrides=None) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw = dict(raw)
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    version = raw.get("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config version {version}; expected {SCHEMA_VERSION}")
    known = {f.name for f in fields(RunConfig)} - {"base_dir"}
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"unknown config keys: {sorted(extra)}")
    if "domain" not in raw or "fluxes" not in raw:
        raise ConfigError("config needs 'domain' and 'fluxes'")
    try:
        cfg = RunConfig(**raw, base_dir=Path(base_dir))
        cfg.fluxes = [float(a) for a in cfg.fluxes]
        cfg.t_list = [float(t) for t in cfg.t_list]
        cfg.p, cfg.t, cfg.h, cfg.seed = float(cfg.p), float(cfg.t), float(cfg.h), int(cfg.seed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad config value: {exc}") from exc
    if not all(b > a for a, b in zip(cfg.t_list, cfg.t_list[1:])):
        raise ConfigError(f"t_list must be strictly increasing, got {cfg.t_list}")
    if not all(math.isfinite(a) for a in cfg.fluxes):
        raise ConfigError("fluxes must be finite")
    if cfg.h <= 0:
        raise ConfigError("h must be positive")
    return cfg


def _dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def _carrier(cfg, domain):
    from .carrier import build_carrier_2d

    if len(cfg.fluxes) != domain.k:
        raise ConfigError(f"domain has {domain.k} outlets but {len(cfg.fluxes)} fluxes were given")
    return build_carrier_2d(domain, cfg.fluxes, **{k: v for k, v in cfg.carrier.items() if v is not None})


# ---- subcommands ---------------------------------------------------------------


def cmd_carrier_verify(cfg: RunConfig, out: Path) -> int:
    from .carrier import verify_carrier, write_carrier_vtk
    from .meshing import mesh_cut_domain

    domain = cfg.domain_object()
    field_ = _carrier(cfg, domain)
    opts = {"n_probes": 20, "h": 0.25, "growth_limit": 3.0}
    opts.update(cfg.verify)
    report = verify_carrier(field_, domain, cfg.t_list, p=cfg.p, seed=cfg.seed, **opts)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "carrier_report.csv")
    report.to_json(out / "carrier_report.json")
    t_show = cfg.t_list[0] if cfg.t_list else domain.t_min
    write_carrier_vtk(field_, mesh_cut_domain(geometry.cut_domain(domain, t_show), opts["h"]), out / "carrier.vtk")
    log.info("carrier bounded=%s spread(ratio_i)=%.3g", report.bounded, report.spread("ratio_i"))
    return EXIT_OK if report.bounded else EXIT_CHECK


def cmd_solve(cfg: RunConfig, out: Path) -> int:
    from .diagnostics import energy_residual, flux_audit
    from .meshing import mesh_cut_domain
    from .solver import solve_truncated, write_convergence_csv, write_solution_vtk

    domain = cfg.domain_object()
    field_ = _carrier(cfg, domain)
    cd = geometry.cut_domain(domain, cfg.t)
    mesh = mesh_cut_domain(cd, cfg.h)
    out.mkdir(parents=True, exist_ok=True)
    try:
        state = solve_truncated(cd, mesh, field_, cfg.solver_config())
    except NonlinearDivergence as exc:
        with open(out / "convergence.csv", "w") as fh:
            fh.write("iter,phase,residual,step\n")
            for it, phase, res, step in exc.history:
                fh.write(f"{it},{phase},{res:.10e},{step:.6g}\n")
        raise
    write_solution_vtk(state, out / "solution.vtk")
    write_convergence_csv(state, out / "convergence.csv")
    sections = [geometry.cross_section(domain, i, s) for i in range(domain.k) for s in mesh.snap]
    audit = flux_audit(state, sections, expected=cfg.fluxes)
    _dump_json({
        "config": cfg.canonical(),
        "domain_hash": domain.digest(),
        "triangles": int(len(mesh.triangles)),
        "dofs": int(state.space.n_dofs),
        "epsilon": state.epsilon,
        "residual": state.residual,
        "iterations": len([h for h in state.history if h[0] > 0]),
        "energy_residual": energy_residual(state),
        "flux_deviation": audit.deviation,
        "flux_max_error": audit.max_error,
        "fluxes": audit.as_rows(),
        "carrier": field_.metadata(),
    }, out / "manifest.json")
    log.info("solved t=%g in %.1fs, residual %.2e", cfg.t, state.seconds, state.residual)
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, out: Path) -> int:
    from .continuation import run_truncation_sequence, write_report

    domain = cfg.domain_object()
    field_ = _carrier(cfg, domain)
    opts = {"n_probes": 5, "h": 0.25}
    opts.update({k: v for k, v in cfg.verify.items() if k in ("n_probes", "h")})
    states, report = run_truncation_sequence(
        domain, cfg.fluxes, cfg.t_list, cfg.solver_config(), h=cfg.h, carrier=field_,
        carrier_probes=opts["n_probes"], carrier_h=opts["h"], seed=cfg.seed)
    write_report(report, out, domain, cfg.solver_config(), cfg.fluxes, extra={"run": cfg.canonical()})
    for t, secs in report.timings.items():
        log.info("t=%g solved in %.1fs", t, secs)
    if not report.complete:
        log.error("sweep aborted: %s", report.error)
        return EXIT_NUMERIC
    checks = report.checks()
    log.info("checks: %s", checks)
    return EXIT_OK if all(checks.values()) else EXIT_CHECK


def cmd_benchmark_poiseuille(cfg: RunConfig, out: Path) -> int:
    from .diagnostics import poiseuille_for_flux, profile_error, shooting_for_flux
    from .meshing import mesh_cut_domain
    from .solver import solve_truncated

    domain = cfg.domain_object()
    if domain.k != 2 or any(o.pieces for o in domain.outlets):
        raise ConfigError("benchmark-poiseuille needs a straight two-outlet strip")
    hw = domain.outlets[1].halfwidth
    if hw.terms:
        raise ConfigError("benchmark-poiseuille needs a constant half-width")
    opts = {"p_values": [2.0, 3.0], "t": cfg.t, "h": cfg.h, "tolerances": {"2": 0.02, "3": 0.03}}
    opts.update(cfg.benchmark)
    t, h = float(opts["t"]), float(opts["h"])
    alpha = cfg.fluxes[1]
    field_ = _carrier(cfg, domain)
    cd = geometry.cut_domain(domain, t)
    mesh = mesh_cut_domain(cd, h)
    # interior window: the middle third of the truncated strip
    x_half = (domain.core[:, 0].max() + t) / 3.0
    rows, ok = [], True
    for p in opts["p_values"]:
        p = float(p)
        t0 = time.perf_counter()
        state = solve_truncated(cd, mesh, field_, cfg.solver_config(p))
        exact = poiseuille_for_flux(p, hw.base, alpha)
        err = profile_error(state, exact, (-x_half, x_half))
        shoot = shooting_for_flux(p, hw.base, alpha, state.epsilon)
        err_eps = profile_error(state, shoot, (-x_half, x_half))
        tol = float(opts["tolerances"].get(f"{p:g}", 0.03))
        passed = err <= tol
        ok &= passed
        log.info("p=%g: error %.3e (tol %.3g), %.1fs", p, err, tol, time.perf_counter() - t0)
        rows.append({"p": p, "error_closed_form": err, "error_regularized": err_eps,
                     "tolerance": tol, "passed": passed, "epsilon": state.epsilon})
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "poiseuille.csv", "w") as fh:
        fh.write("p,error_closed_form,error_regularized,tolerance,passed\n")
        for r in rows:
            fh.write(f"{r['p']:g},{r['error_closed_form']:.6e},{r['error_regularized']:.6e},"
                     f"{r['tolerance']:g},{int(r['passed'])}\n")
    _dump_json({"config": cfg.canonical(), "t": t, "h": h, "rows": rows}, out / "poiseuille.json")
    return EXIT_OK if ok else EXIT_CHECK


COMMANDS = {
    "carrier-verify": cmd_carrier_verify,
    "solve": cmd_solve,
    "sweep": cmd_sweep,
    "benchmark-poiseuille": cmd_benchmark_poiseuille,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="outletflow", description=__doc__.split("\n\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="run configuration (JSON)")
        sp.add_argument("--out", help="output directory (overrides the config)")
        sp.add_argument("--seed", type=int, help="random seed (overrides the config)")
        sp.add_argument("--quiet", action="store_true", help="only log errors")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, {"out": args.out, "seed": args.seed})
        out = Path(cfg.out)
        if not out.is_absolute() and args.out is None:
            out = cfg.base_dir / out
        return COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (NonlinearDivergence,) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except OutletFlowError as exc:
        # contract violations in the input (flux imbalance, bad geometry) are config errors
        kind = type(exc).__name__
        if kind in _NUMERIC_ERRORS:
            log.error("numerical failure: %s: %s", kind, exc)
            return EXIT_NUMERIC
        log.error("config error: %s: %s", kind, exc)
        return EXIT_CONFIG


_NUMERIC_ERRORS = {"NumericalBlowup", "LinearSolveFailure", "NonlinearDivergence"}


if __name__ == "__main__":
    sys.exit(main())
