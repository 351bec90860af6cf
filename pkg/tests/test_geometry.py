import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from outletflow.errors import InvalidGeometry
from outletflow.geometry import (ChannelDomain, HalfWidth, OutletSpec, WALL, cross_section, cut_domain,
                                 domain_from_dict, load_domain, polygon_area, s_channel, straight_strip,
                                 t_junction, validate_volume_growth)


def test_strip_cut_area_matches_rectangle():
    cd = cut_domain(straight_strip(), 5.0)
    assert cd.area == pytest.approx(4.0 + 2 * (2 * 5.0), abs=1e-10)


def test_cut_domains_are_nested():
    for dom in (straight_strip(), t_junction(), s_channel()):
        small, big = cut_domain(dom, 2.0), cut_domain(dom, 3.0)
        assert np.all(big.contains(small.vertices))


def test_s_channel_has_one_cut_group_per_outlet():
    cd = cut_domain(s_channel(), 4.0)
    groups = cd.cut_groups()
    assert sorted(groups) == [0, 1]
    assert np.count_nonzero(np.asarray(cd.tags) != WALL) >= 2


def test_straight_cross_section():
    sec = cross_section(straight_strip(), 1, 3.0)
    np.testing.assert_allclose(sec.right, [4.0, -1.0], atol=1e-14)
    np.testing.assert_allclose(sec.left, [4.0, 1.0], atol=1e-14)
    np.testing.assert_allclose(sec.normal, [1.0, 0.0], atol=1e-14)
    assert sec.length == pytest.approx(2.0)


def test_quarter_circle_section_is_centered_at_arc_end():
    R = 4.0
    core = [(-1, -1), (1, -1), (1, 1), (-1, 1)]
    w = HalfWidth(1.0)
    dom = ChannelDomain(core, [OutletSpec(3, (), w, 0), OutletSpec(1, (("arc", R, math.pi / 2),), w, 1)])
    sec = cross_section(dom, 1, math.pi * R / 2)
    # the arc starts at (1, 0) heading +x and turns left about (1, R)
    mid = 0.5 * (sec.right + sec.left)
    np.testing.assert_allclose(mid, [1 + R, R], atol=1e-12)
    np.testing.assert_allclose(sec.normal, [0.0, 1.0], atol=1e-12)
    assert sec.length == pytest.approx(2.0)


def test_volume_growth_strip_tends_to_four_from_above():
    rep = validate_volume_growth(straight_strip(), [2, 4, 8])
    ratios = [r[2] for r in rep.rows]
    assert ratios == pytest.approx([6.0, 5.0, 4.5])
    assert all(a > b > 4 for a, b in zip(ratios, ratios[1:]))
    assert not rep.violated


def test_volume_growth_with_wavy_width():
    core = [(-1, -1), (1, -1), (1, 1), (-1, 1)]
    w = HalfWidth(1.0, ((0.2, 1.0, 0.0),))
    dom = ChannelDomain(core, [OutletSpec(3, (), w, 0), OutletSpec(1, (), w, 1)])
    rep = validate_volume_growth(dom, [2, 4, 8, 16], ds=0.05)
    for t, area, ratio in rep.rows:
        assert 2 * 2 * 0.8 <= ratio <= 4 / 2 + 2 * 2 * 1.2
        exact = 4 + 2 * 2 * (t + 0.2 * (1 - math.cos(t)))
        assert area == pytest.approx(exact, rel=2e-4)


def test_single_row_volume_report():
    rep = validate_volume_growth(straight_strip(), [3])
    assert len(rep.rows) == 1 and not rep.violated


def test_domain_round_trip(tmp_path):
    dom = s_channel()
    path = tmp_path / "d.json"
    import json

    path.write_text(json.dumps(dom.to_dict()))
    again = load_domain(path)
    assert again.digest() == dom.digest()
    assert cut_domain(again, 3.0).area == pytest.approx(cut_domain(dom, 3.0).area, abs=1e-12)


@pytest.mark.parametrize("bad", [
    {"core": [(0, 0), (1, 0), (1, 1), (0, 1)], "outlets": [{"edge": 1, "halfwidth": 0.5}]},
    {"core": [(0, 0), (0, 1), (1, 1), (1, 0)], "outlets": [{"edge": 0, "halfwidth": 0.5},
                                                            {"edge": 2, "halfwidth": 0.5}]},
    {"core": [(0, 0), (2, 0), (2, 2), (0, 2)], "outlets": [{"edge": 3, "halfwidth": 0.5},
                                                            {"edge": 1, "halfwidth": 1.0}]},
    {"core": [(-1, -1), (1, -1), (1, 1), (-1, 1)],
     "outlets": [{"edge": 3}, {"edge": 1, "pieces": [["arc", 0.5, 1.0]]}]},
])
def test_invalid_domains_are_rejected(bad):
    with pytest.raises(InvalidGeometry):
        domain_from_dict(bad)


@settings(max_examples=30, deadline=None)
@given(t=st.floats(1.0, 30.0), side=st.integers(0, 1))
def test_strip_section_length_is_twice_halfwidth(t, side):
    sec = cross_section(straight_strip(), side, t)
    assert sec.length == pytest.approx(2.0, abs=1e-12)
    assert np.linalg.norm(sec.normal) == pytest.approx(1.0)


@settings(max_examples=25, deadline=None)
@given(t=st.floats(1.0, 12.0))
def test_s_channel_area_is_core_plus_tubes(t):
    # a tube of constant half-width w has area 2 w times its centerline length
    cd = cut_domain(s_channel(), t, ds=0.01)
    assert cd.area == pytest.approx(4.0 + 2 * 2 * t, rel=1e-4)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=3, max_size=8))
def test_polygon_area_sign_flips_with_orientation(pts):
    a = polygon_area(np.array(pts))
    assert polygon_area(np.array(pts[::-1])) == pytest.approx(-a, abs=1e-9)
