import time

import pytest

from outletflow.carrier import build_carrier_2d
from outletflow.continuation import run_truncation_sequence
from outletflow.geometry import cut_domain, s_channel, straight_strip
from outletflow.meshing import mesh_cut_domain
from outletflow.solver import SolverConfig, solve_truncated

STRIP_FLUXES = [-1.0, 1.0]  # outlet 1 (towards +x) carries alpha = 1 out


@pytest.fixture(scope="session")
def strip():
    return straight_strip()


@pytest.fixture(scope="session")
def strip_carrier(strip):
    return build_carrier_2d(strip, STRIP_FLUXES)


@pytest.fixture(scope="session")
def strip_benchmark(strip, strip_carrier):
    """Converged strip solves at t = 8, h = 1/16 for p = 2 and 3, with wall times."""
    cd = cut_domain(strip, 8.0)
    mesh = mesh_cut_domain(cd, 1 / 16)
    out = {}
    for p in (2.0, 3.0):
        t0 = time.perf_counter()
        state = solve_truncated(cd, mesh, strip_carrier, SolverConfig(p=p))
        out[p] = (state, time.perf_counter() - t0)
    return out


@pytest.fixture(scope="session")
def s_channel_sweep():
    dom = s_channel()
    t0 = time.perf_counter()
    states, report = run_truncation_sequence(dom, STRIP_FLUXES, [4, 8, 16], SolverConfig(p=3.0),
                                             h=0.125, carrier_probes=5)
    return dom, states, report, time.perf_counter() - t0


ACCEPTANCE_LINES = []


def record_acceptance(number, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
