import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from outletflow.carrier3d import build_spherical_carrier, smooth_step
from outletflow.errors import DegeneratePunctures, FluxImbalance

PUNCTURES = [(0, 0, 1), (1, 0, 0), (0, -0.6, -0.8)]
FLUXES = [1.0, 1.0, -2.0]


@pytest.fixture(scope="module")
def carrier():
    return build_spherical_carrier(PUNCTURES, FLUXES)


def _ball(n, seed=0, r_max=0.999):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 3))
    x /= np.linalg.norm(x, axis=1)[:, None]
    return x * (rng.uniform(0.001, r_max**3, size=(n, 1)) ** (1 / 3))


def test_smooth_step():
    s, ds = smooth_step(np.array([-1.0, 0.0, 0.5, 1.0, 3.0]))
    np.testing.assert_allclose(s, [0, 0, 0.5, 1, 1])
    np.testing.assert_allclose(ds[[0, 1, 3, 4]], 0)


@pytest.mark.parametrize("i", [0, 1, 2])
def test_loop_integrals(carrier, i):
    val = carrier.loop_integral(carrier.loop(i, 0.4))
    assert val == pytest.approx(FLUXES[i], abs=1e-8)


def test_homotopic_loops_agree(carrier):
    ref = carrier.loop_integral(carrier.loop(0, 0.4))
    for radius, tilt, wobble in [(0.2, 0.3, 0.0), (0.6, 1.0, 0.2), (0.35, 2.0, 0.4)]:
        val = carrier.loop_integral(carrier.loop(0, radius, tilt, wobble))
        assert val == pytest.approx(ref, abs=1e-8)


def test_two_punctures_latitudes():
    c = build_spherical_carrier([(0, 0, 1), (0, 0, -1)], [1.0, -1.0])
    for colat in (0.3, 1.0, math.pi / 2, 2.5):
        assert c.loop_integral(c.loop(0, colat)) == pytest.approx(1.0, abs=1e-8)


@pytest.mark.parametrize("i,radius", [(0, 0.3), (1, 0.3), (1, 0.7), (2, 0.5)])
def test_cap_fluxes(carrier, i, radius):
    assert carrier.cap_flux(i, radius) == pytest.approx(FLUXES[i], abs=1e-6)


def test_zero_fluxes():
    c = build_spherical_carrier(PUNCTURES, [0.0, 0.0, 0.0])
    x = _ball(500)
    assert np.abs(c.velocity(x)).max() == 0
    assert np.abs(c.sphere_form(x)).max() == 0


def test_divergence_free(carrier):
    x = _ball(4000, seed=2)
    h = 1e-6
    div = carrier.divergence(x, h)
    grad_scale = max(np.abs((carrier.velocity(x + [h, 0, 0]) - carrier.velocity(x - [h, 0, 0])) / (2 * h)).max(), 1)
    assert np.abs(div).max() <= 1e-8 * grad_scale


def test_vanishes_near_center_and_on_sphere_away_from_punctures(carrier):
    inner = _ball(500, r_max=0.29)
    assert np.abs(carrier.velocity(inner)).max() == 0
    rng = np.random.default_rng(3)
    s = rng.normal(size=(4000, 3))
    s /= np.linalg.norm(s, axis=1)[:, None]
    far = np.min(np.linalg.norm(s[:, None, :] - carrier.punctures[None], axis=2), axis=1) > carrier.cone[1]
    assert np.abs(carrier.velocity(s[far])).max() <= 1e-12


def test_sphere_form_is_tangent(carrier):
    rng = np.random.default_rng(5)
    s = rng.normal(size=(1000, 3))
    s /= np.linalg.norm(s, axis=1)[:, None]
    b = carrier.sphere_form(s)
    assert np.abs(np.sum(b * s, axis=1)).max() <= 1e-12 * np.abs(b).max()


def test_errors():
    with pytest.raises(FluxImbalance):
        build_spherical_carrier(PUNCTURES, [1.0, 1.0, 1.0])
    with pytest.raises(DegeneratePunctures):
        build_spherical_carrier([(0, 0, 1), (0, 0, 1), (1, 0, 0)], FLUXES)
    with pytest.raises(DegeneratePunctures):
        build_spherical_carrier([(0, 0, 1), (0.1, 0, 1), (1, 0, 0)], FLUXES)


@settings(max_examples=15, deadline=None)
@given(a=st.floats(-5, 5), b=st.floats(-5, 5), pole=st.integers(0, 2))
def test_loop_integrals_for_any_fluxes_and_pole(a, b, pole):
    fl = [a, b, -a - b]
    c = build_spherical_carrier(PUNCTURES, fl, pole_index=pole)
    for i in range(3):
        assert c.loop_integral(c.loop(i, 0.5, wobble=0.2)) == pytest.approx(fl[i], abs=1e-8 * max(1, abs(a), abs(b)))
