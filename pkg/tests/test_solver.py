import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from outletflow.carrier import build_carrier_2d
from outletflow.diagnostics import energy_residual, flux_audit
from outletflow.errors import NonlinearDivergence, UnsupportedExponent
from outletflow.fem import TaylorHood
from outletflow.geometry import WALL, cross_section, cut_domain, straight_strip, t_junction
from outletflow.meshing import mesh_cut_domain
from outletflow.solver import (SolverConfig, assemble, monotonicity_gap, solve_truncated, stress,
                               write_convergence_csv, write_solution_vtk)


def _sym(a, b, c):
    return np.array([[a, b], [b, c]], float)


def test_stress_newtonian_is_identity():
    D = _sym(0.3, -1.2, 2.0)
    np.testing.assert_allclose(stress(D, 2.0, 0.0), D)


def test_stress_p3_scales_by_norm():
    D = _sym(1.0, 1.0, 1.0)  # Frobenius norm 2
    np.testing.assert_allclose(stress(D, 3.0, 0.0), 2 * D)


def test_regularization_is_one_over_t():
    cfg = SolverConfig(p=3.0)
    assert cfg.eps_for(10.0) == pytest.approx(0.1)
    D = _sym(1.0, 1.0, 1.0)
    np.testing.assert_allclose(stress(D, 3.0, cfg.eps_for(10.0)), 2.1 * D)


def test_unsupported_exponent():
    with pytest.raises(UnsupportedExponent):
        stress(np.eye(2), 1.5, 0.0)


def test_monotonicity_gap_examples():
    x = np.array([[[1.0, 2.0], [2.0, -1.0]]])
    gap, comp = monotonicity_gap(x, x, 3.0)
    assert gap[0] == 0 and comp[0] == 0
    gap, comp = monotonicity_gap(x, -x, 2.0)
    assert gap[0] == pytest.approx(4 * np.sum(x * x))
    assert comp[0] == pytest.approx(4 * np.sum(x * x))


tensor = arrays(np.float64, (2, 2), elements=st.floats(-10, 10))


@settings(max_examples=200, deadline=None)
@given(x=tensor, y=tensor, p=st.sampled_from([2.0, 2.5, 3.0, 4.0]))
def test_monotonicity_gap_nonnegative(x, y, p):
    gap, comp = monotonicity_gap(x[None], y[None], p)
    assert gap[0] >= -1e-9 * max(1.0, comp[0])
    if p >= 2 and comp[0] > 1e-12:
        # the classical lower bound with constant 2^(2-p)
        assert gap[0] >= 2.0 ** (2 - p) * comp[0] * (1 - 1e-9)


@settings(max_examples=100, deadline=None)
@given(d=arrays(np.float64, 3, elements=st.floats(-5, 5)), p=st.floats(2.0, 5.0), eps=st.floats(0, 1))
def test_stress_is_symmetric_and_coaxial(d, p, eps):
    D = _sym(*d)
    S = stress(D, p, eps)
    np.testing.assert_allclose(S, S.T)
    # S = nu D with nu >= eps
    if np.abs(D).max() > 1e-6:
        nu = np.sum(S * D) / np.sum(D * D)
        assert nu >= eps - 1e-12
        np.testing.assert_allclose(S, nu * D, atol=1e-9 * max(1, np.abs(S).max()))


@pytest.fixture(scope="module")
def small():
    dom = straight_strip()
    cd = cut_domain(dom, 3.0)
    mesh = mesh_cut_domain(cd, 0.25)
    return dom, cd, mesh, TaylorHood(mesh)


def test_zero_state_has_zero_residual(small):
    _, _, _, space = small
    z = np.zeros(space.n_p2)
    R, _ = assemble(space, z, z, np.zeros(space.n_p1), 0.0, 3.0, 0.1)
    assert np.abs(R).max() == 0


def test_convection_irrelevant_at_rest(small):
    _, _, _, space = small
    z = np.zeros(space.n_p2)
    P = np.random.default_rng(0).normal(size=space.n_p1)
    R1, _ = assemble(space, z, z, P, 0.3, 3.0, 0.1, convection=True)
    R0, _ = assemble(space, z, z, P, 0.3, 3.0, 0.1, convection=False)
    np.testing.assert_array_equal(R1, R0)


@pytest.mark.parametrize("p", [2.0, 3.0, 4.0])
def test_jacobian_matches_finite_difference(small, p):
    _, _, _, space = small
    rng = np.random.default_rng(1)
    n2, n1 = space.n_p2, space.n_p1
    x = rng.normal(size=2 * n2 + n1 + 1)
    w = rng.normal(size=x.size)

    def res(z):
        R, J = assemble(space, z[:n2], z[n2:2 * n2], z[2 * n2:2 * n2 + n1], z[-1], p, 0.1)
        return R, J

    _, J = res(x)
    h = 1e-6
    fd = (res(x + h * w)[0] - res(x - h * w)[0]) / (2 * h)
    Jw = J @ w
    assert np.linalg.norm(Jw - fd) <= 1e-5 * np.linalg.norm(fd)


def test_zero_flux_solution_is_zero(small):
    dom, cd, mesh, space = small
    field = build_carrier_2d(dom, [0.0, 0.0])
    state = solve_truncated(cd, mesh, field, SolverConfig(p=3.0), space=space)
    assert np.abs(state.ux).max() == 0 and np.abs(state.uy).max() == 0
    assert np.abs(state.pressure).max() == 0
    assert energy_residual(state) == 0


def test_boundary_values_and_discrete_divergence():
    dom = t_junction()
    cd = cut_domain(dom, 3.0)
    mesh = mesh_cut_domain(cd, 0.25)
    field = build_carrier_2d(dom, [1.0, 1.0, -2.0])
    state = solve_truncated(cd, mesh, field, SolverConfig(p=3.0))
    space = state.space
    ux, uy = state.u
    nb = space.boundary_nodes
    assert np.abs(ux[nb]).max() == 0 and np.abs(uy[nb]).max() == 0
    # wall nodes carry zero velocity because the carrier vanishes there
    wall_nodes = nb[space.node_tag[nb] == WALL] if hasattr(space, "node_tag") else nb[:0]
    assert np.abs(state.ux[wall_nodes]).max(initial=0) <= 1e-12
    v = np.concatenate([state.ux, state.uy])
    B = space.divergence_matrix()
    G = space.gradients(state.ux, state.uy)
    gnorm = np.sqrt(space.integrate(np.sum(G * G, axis=(-2, -1))))
    # |int q div v| <= tol ||grad v|| ||q||: B v in the dual norm of the P1 mass
    M = space.p1_mass().toarray()
    dual = np.sqrt((B @ v) @ np.linalg.solve(M, B @ v))
    assert dual <= 1e-10 * gnorm
    secs = [cross_section(dom, i, s) for i in range(3) for s in mesh.snap]
    audit = flux_audit(state, secs, expected=[1.0, 1.0, -2.0])
    assert audit.max_error <= 1e-3 * 2


def test_convection_off_energy_identity(small):
    dom, cd, mesh, space = small
    field = build_carrier_2d(dom, [-1.0, 1.0])
    state = solve_truncated(cd, mesh, field, SolverConfig(p=3.0, include_convection=False), space=space)
    assert energy_residual(state) <= 1e-8


def test_non_convergence_raises_with_history(small):
    dom, cd, mesh, space = small
    field = build_carrier_2d(dom, [-1e3, 1e3])
    with pytest.raises(NonlinearDivergence) as info:
        solve_truncated(cd, mesh, field, SolverConfig(p=2.0, max_iters=5), space=space)
    assert len(info.value.history) >= 1


def test_writers(small, tmp_path):
    dom, cd, mesh, space = small
    field = build_carrier_2d(dom, [-1.0, 1.0])
    state = solve_truncated(cd, mesh, field, SolverConfig(p=2.0), space=space)
    write_solution_vtk(state, tmp_path / "s.vtk")
    write_convergence_csv(state, tmp_path / "c.csv")
    assert "VECTORS velocity" in (tmp_path / "s.vtk").read_text()
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "iter,phase,residual,step" and len(lines) >= 2


def test_strip_energy_identity_p2(strip_benchmark):
    state, _ = strip_benchmark[2.0]
    assert energy_residual(state) <= 1e-6


def test_strip_flux_conservation(strip, strip_benchmark):
    for p, (state, _) in strip_benchmark.items():
        secs = [cross_section(strip, 1, t) for t in (1.0, 3.0, 5.0)]
        audit = flux_audit(state, secs)
        assert audit.deviation <= 1e-3
