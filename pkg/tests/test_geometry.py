import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from shapeopt.geometry import (ActionTriplet, ControlPoint, DegenerateShape, Polygon, ShapeSpec,
                               bezier_controls, bezier_segment, build_shape, circle_curvature,
                               circle_polygon, decode_point, polygon_area, read_outline,
                               reference_points, sort_points, tangent_angles, validate,
                               write_outline)

unit = st.floats(-1.0, 1.0, allow_nan=False)


def square(side=1.0):
    return Polygon([[0, 0], [side, 0], [side, side], [0, side]])


# ---------------------------------------------------------------- decoding

def test_triplet_clamps():
    t = ActionTriplet(2.0, -3.0, 0.25)
    assert (t.p, t.q, t.s) == (1.0, -1.0, 0.25)


def test_decode_extremal_radius():
    pt = decode_point(ActionTriplet(1, 0, 0), 0, 4, 0.3, 3.0)
    assert (pt.x, pt.y, pt.e) == pytest.approx((3.0, 0.0, 0.5), abs=1e-15)


def test_decode_radius_floor():
    pt = decode_point(ActionTriplet(0, 0, 1), 1, 4, 0.3, 3.0)
    assert pt.x == pytest.approx(0.0, abs=1e-15)
    assert pt.y == pytest.approx(0.9, abs=1e-15)
    assert pt.e == 1.0


def test_decode_hand_evaluated():
    pt = decode_point(ActionTriplet(-0.5, 1, -1), 2, 4, 0.3, 3.0)
    assert pt.x == pytest.approx(-1.5 / math.sqrt(2), abs=1e-12)
    assert pt.y == pytest.approx(-1.5 / math.sqrt(2), abs=1e-12)
    assert pt.e == 0.0


def test_decode_half_turn_variant():
    pt = decode_point(ActionTriplet(1, 0, 0), 1, 4, 0.3, 3.0, angular_factor=math.pi)
    assert math.atan2(pt.y, pt.x) == pytest.approx(math.pi / 4)


def test_decode_rejects_bad_index():
    with pytest.raises(ValueError):
        decode_point(ActionTriplet(0, 0, 0), 4, 4, 0.3, 3.0)


def test_radius_bounds_on_random_triplets():
    rng = np.random.default_rng(7)
    n = 4
    for p, q, s in rng.uniform(-1, 1, size=(10_000, 3)):
        i = int(rng.integers(n))
        pt = decode_point(ActionTriplet(p, q, s), i, n, 0.3, 3.0)
        assert 0.9 - 1e-12 <= pt.radius <= 3.0 + 1e-12
        assert 0.0 <= pt.e <= 1.0


@given(unit, unit, unit, st.integers(0, 7), st.floats(0.05, 0.95), st.floats(0.1, 10.0))
def test_radius_bounds_property(p, q, s, i, r_min, r_max):
    pt = decode_point(ActionTriplet(p, q, s), i, 8, r_min, r_max)
    assert r_min * r_max * (1 - 1e-12) <= pt.radius <= r_max * (1 + 1e-12)


# ---------------------------------------------------------------- sorting

def xy(points):
    return [(round(p.x, 12), round(p.y, 12)) for p in points]


def test_sort_already_sorted():
    pts = [ControlPoint(1, 0), ControlPoint(0, 1), ControlPoint(-1, 0), ControlPoint(0, -1)]
    assert sort_points(pts) == pts


def test_sort_three_points():
    pts = [ControlPoint(0, 1), ControlPoint(1, 0), ControlPoint(-1, 0)]
    assert xy(sort_points(pts)) == [(1, 0), (0, 1), (-1, 0)]


def test_sort_across_wrap():
    deg = [350, 10, 170]
    pts = [ControlPoint(math.cos(math.radians(a)), math.sin(math.radians(a))) for a in deg]
    out = [round(math.degrees(p.angle)) for p in sort_points(pts)]
    assert out == [10, 170, 350]


def test_sort_ties_by_radius():
    pts = [ControlPoint(2, 0), ControlPoint(1, 0), ControlPoint(0, 1)]
    assert xy(sort_points(pts)) == [(1, 0), (2, 0), (0, 1)]


def test_sort_coincident_points_rejected():
    with pytest.raises(DegenerateShape):
        sort_points([ControlPoint(1, 0), ControlPoint(1, 0), ControlPoint(0, 1)])


def test_spec_needs_three_points():
    with pytest.raises(DegenerateShape):
        ShapeSpec((ControlPoint(1, 0), ControlPoint(0, 1)))


# coordinates on a 1e-3 lattice: distinct points stay distinguishable in angle or radius
lattice = st.integers(-5000, 5000).map(lambda k: k / 1000)


@given(st.lists(st.tuples(lattice, lattice), min_size=3, max_size=12, unique=True))
def test_sorted_angles_increase(coords):
    pts = [ControlPoint(x, y) for x, y in coords]
    out = sort_points(pts)
    keys = [(p.angle, p.radius) for p in out]
    assert keys == sorted(keys)
    assert all(a < b for a, b in zip(keys, keys[1:]))


# ---------------------------------------------------------------- tangents

def test_tangent_midpoint():
    pts = [ControlPoint(-1, 0), ControlPoint(0, 0), ControlPoint(0, 1)]
    assert tangent_angles(pts, 0.5)[1] == pytest.approx(math.pi / 4)


def test_tangent_alpha_zero_is_outgoing():
    pts = [ControlPoint(-1, 0), ControlPoint(0, 0), ControlPoint(0.3, 1)]
    assert tangent_angles(pts, 0.0)[1] == math.atan2(1.0, 0.3)


def test_tangent_square_diagonals():
    pts = sort_points([ControlPoint(1, 1), ControlPoint(-1, 1), ControlPoint(-1, -1),
                       ControlPoint(1, -1)])
    th = tangent_angles(pts, 0.5)
    # corners in angle order (1,1), (-1,1), (-1,-1), (1,-1)
    expected = [3 * math.pi / 4, -3 * math.pi / 4, -math.pi / 4, math.pi / 4]
    for a, b in zip(th, expected):
        assert math.remainder(a - b, 2 * math.pi) == pytest.approx(0.0, abs=1e-12)


def test_tangent_blend_across_wrap():
    # directions just either side of pi must average to pi, not to 0
    pts = [ControlPoint(1, -0.01), ControlPoint(0, 0), ControlPoint(-1, -0.01)]
    th = tangent_angles(pts, 0.5)[1]
    assert abs(math.remainder(th - math.pi, 2 * math.pi)) < 1e-12


# ---------------------------------------------------------------- curves

def test_zero_curvature_gives_chord():
    a, b = ControlPoint(0, 0, 0.0), ControlPoint(2, 1, 0.0)
    seg = bezier_segment(a, b, 1.0, -2.0, 9)
    # points on the line y = x / 2
    assert np.allclose(seg[:, 1], seg[:, 0] / 2, atol=1e-15)


def test_tangents_along_chord_stay_on_axis():
    a, b = ControlPoint(0, 0, 0.8), ControlPoint(1, 0, 0.3)
    seg = bezier_segment(a, b, 0.0, 0.0, 17)
    assert np.all(seg[:, 1] == 0.0)


def test_endpoints_exact():
    a, b = ControlPoint(0.3, -0.2, 0.7), ControlPoint(-1.1, 2.5, 0.2)
    seg = bezier_segment(a, b, 0.4, 2.9, 13)
    assert tuple(seg[0]) == (0.3, -0.2)
    assert tuple(seg[-1]) == (-1.1, 2.5)


def de_casteljau(ctrl, t):
    pts = [np.asarray(c, dtype=float) for c in ctrl]
    while len(pts) > 1:
        pts = [(1 - t) * p + t * q for p, q in zip(pts, pts[1:])]
    return pts[0]


def test_midpoint_matches_de_casteljau():
    a, b = ControlPoint(1, 0, 0.5), ControlPoint(0, 1, 0.5)
    chord = math.sqrt(2)
    ctrl = [(1, 0), (1, 0.5 * chord), (0.5 * chord, 1), (0, 1)]
    seg = bezier_segment(a, b, math.pi / 2, math.pi, 5)
    assert np.allclose(seg[2], de_casteljau(ctrl, 0.5), atol=1e-15)
    assert np.allclose(bezier_controls(a, b, math.pi / 2, math.pi), ctrl, atol=1e-15)


@given(st.lists(st.tuples(unit, unit, unit), min_size=3, max_size=6), st.floats(0.0, 1.0))
def test_g1_continuity_at_joints(triplets, alpha):
    n = len(triplets)
    pts = [decode_point(ActionTriplet(*t), i, n, 0.3, 3.0) for i, t in enumerate(triplets)]
    try:
        pts = sort_points(pts)
    except DegenerateShape:
        return
    th = tangent_angles(pts, alpha)
    for i in range(n):
        j = (i + 1) % n
        c_out = bezier_controls(pts[i], pts[j], th[i], th[j])
        c_in = bezier_controls(pts[i - 1], pts[i], th[i - 1], th[i])
        d_out = c_out[1] - c_out[0]
        d_in = c_in[3] - c_in[2]
        for d in (d_out, d_in):
            if np.hypot(*d) > 1e-9:
                ang = math.atan2(d[1], d[0])
                assert abs(math.remainder(ang - th[i], 2 * math.pi)) <= 1e-9


# ---------------------------------------------------------------- assembly

def test_reference_shape_is_rotation_symmetric():
    m = 32
    poly = build_shape(ShapeSpec(tuple(reference_points(4)), 0.5, m))
    v = poly.vertices
    rot = np.column_stack([-v[:, 1], v[:, 0]])
    assert np.max(np.abs(rot - np.roll(v, -(m - 1), axis=0))) < 1e-12


def test_build_is_deterministic():
    spec = ShapeSpec((ControlPoint(2, 0.3, 0.2), ControlPoint(-0.4, 1, 0.9),
                      ControlPoint(-1, -1, 0.5)))
    a, b = build_shape(spec), build_shape(spec)
    assert np.array_equal(a.vertices, b.vertices)


@pytest.mark.parametrize("n,m", [(3, 2), (4, 32), (6, 11)])
def test_vertex_count(n, m):
    spec = ShapeSpec(tuple(reference_points(n)), 0.5, m)
    assert len(build_shape(spec)) == n * (m - 1)


def test_reference_shape_approximates_unit_circle():
    poly = build_shape(ShapeSpec(tuple(reference_points(4)), 0.5, 64))
    r = np.hypot(poly.vertices[:, 0], poly.vertices[:, 1])
    assert np.max(np.abs(r - 1)) < 5e-4
    assert circle_curvature(4) == pytest.approx(0.39052429175, abs=1e-10)


# ---------------------------------------------------------------- area and validity

def test_area_unit_square():
    assert polygon_area(square()) == pytest.approx(1.0, abs=1e-15)


def test_area_reversed_square():
    poly = Polygon(square().vertices[::-1])
    assert polygon_area(poly) == pytest.approx(1.0, abs=1e-15)


def test_area_unit_circle():
    assert polygon_area(circle_polygon(1.0, 4096)) == pytest.approx(math.pi, abs=1e-3)


def test_inscribed_area_increases_to_circle():
    areas = [polygon_area(circle_polygon(1.0, n)) for n in (8, 16, 32, 64, 128, 256)]
    assert all(a < math.pi for a in areas)
    assert all(a < b for a, b in zip(areas, areas[1:]))


def test_area_converges_with_samples():
    # on the Bezier circle the sampled polygon is inscribed in the smooth curve
    areas = [polygon_area(build_shape(ShapeSpec(tuple(reference_points(4)), 0.5, m)))
             for m in (3, 5, 9, 17, 33, 65)]
    assert all(a < b for a, b in zip(areas, areas[1:]))
    assert areas[-1] == pytest.approx(math.pi, abs=2e-3)


def test_polygon_drops_repeated_last_vertex():
    v = np.array([[0, 0], [1, 0], [1, 1], [0, 1], [0, 0]], dtype=float)
    assert len(Polygon(v)) == 4


def test_validate_square():
    assert validate(square())


def test_validate_bowtie():
    bow = Polygon([[0, 0], [1, 1], [1, 0], [0, 1]])
    res = validate(bow)
    assert not res and res.reason == "self-intersection"


def test_validate_tiny_area():
    thin = Polygon([[0, 0], [1, 0], [0.5, 2e-9]])
    res = validate(thin, eps_area=1e-6)
    assert not res and res.reason == "area-too-small"


def test_validate_short_edge():
    poly = Polygon([[0, 0], [1, 0], [1, 1e-9], [0, 1]])
    res = validate(poly)
    assert not res and res.reason == "edge-too-short"


def test_validate_collinear_overlap():
    # the last edge doubles back along the first
    poly = Polygon([[0, 0], [2, 0], [2, 1], [1, 1], [1, 0], [0.5, -0.0]])
    assert not validate(poly)


def test_reference_shape_valid():
    assert validate(build_shape(ShapeSpec(tuple(reference_points(4)))))


# ---------------------------------------------------------------- outline files

def test_outline_round_trip(tmp_path):
    poly = build_shape(ShapeSpec((ControlPoint(2, 0.3, 0.2), ControlPoint(-0.4, 1, 0.9),
                                  ControlPoint(-1, -1, 0.5))))
    path = write_outline(poly, tmp_path / "shape_3.dat")
    text = path.read_text()
    assert text.endswith("\n")
    assert len(text.splitlines()) == len(poly)
    assert np.array_equal(read_outline(path).vertices, poly.vertices)
