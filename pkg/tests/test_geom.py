import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize, minimize_scalar

from vpstitch import geom
from vpstitch.errors import (
    DegenerateConfiguration,
    DegenerateHull,
    DegenerateRotation,
    RankDeficient,
    TooFewPoints,
)

DEG = math.pi / 180.0


# ---------------------------------------------------------------- oracles

def chordal_z_oracle(r):
    """Minimize ||r - Rz(t)||_F^2 numerically, independent of the closed form."""
    def cost(t):
        return float(np.sum((r - geom.rot_z(t)) ** 2))
    best = None
    for t0 in np.linspace(-math.pi, math.pi, 25):
        res = minimize_scalar(
            cost, bounds=(t0 - 0.3, t0 + 0.3), method="bounded",
            options={"xatol": 1e-12},
        )
        if best is None or res.fun < best.fun:
            best = res
    return float(best.x)


def rect_sweep_oracle(points, step_deg=0.01):
    """Exhaustive bounding-box sweep over rectangle orientations."""
    pts = np.asarray(points, dtype=float)
    best = (math.inf, 0.0, 0.0, 0.0)
    for a in np.arange(0.0, 90.0, step_deg) * DEG:
        r = geom.rot2(-a)
        q = pts @ r.T
        w, h = q.max(axis=0) - q.min(axis=0)
        if w * h < best[0]:
            best = (w * h, a, w, h)
    return best


def procrustes_covering_oracle(targets, n=10_000, seed=0):
    """Best rotation among a seeded covering of SO(3)."""
    rng = np.random.default_rng(seed)
    s = np.sum(targets, axis=0)
    best_r, best_c = None, math.inf
    for _ in range(n):
        r = geom.random_rotation(rng)
        c = float(np.sum([(np.sum((r - t) ** 2)) for t in targets]))
        if c < best_c:
            best_r, best_c = r, c
    # local refinement on axis-angle around the best covering sample
    def cost(w):
        r = best_r @ geom.so3_exp(w)
        return float(np.sum((r[None] - np.asarray(targets)) ** 2))
    res = minimize(cost, np.zeros(3), method="Nelder-Mead",
                   options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 4000})
    return best_r @ geom.so3_exp(res.x), float(res.fun)


def residual_sum(r, targets):
    return float(np.sum([(np.sum((r - t) ** 2)) for t in targets]))


# ---------------------------------------------------------- closest_z_rotation

def test_closest_z_identity():
    assert geom.closest_z_rotation(np.eye(3)) == 0.0


def test_closest_z_pure_z():
    assert geom.closest_z_rotation(geom.rot_z(30 * DEG)) == pytest.approx(30 * DEG, abs=1e-12)


def test_closest_z_with_tilt_matches_numeric_oracle():
    r = geom.rot_z(10 * DEG) @ geom.rot_x(5 * DEG)
    expected = chordal_z_oracle(r)
    assert expected == pytest.approx(10 * DEG, abs=1e-8)
    assert geom.closest_z_rotation(r) == pytest.approx(expected, abs=1e-9)


def test_closest_z_degenerate():
    # 180-degree flip about x leaves no in-plane component
    r = np.diag([1.0, -1.0, -1.0])
    with pytest.raises(DegenerateRotation):
        geom.closest_z_rotation(r)


@settings(deadline=None, max_examples=120)
@given(
    theta=st.floats(-179.0, 180.0),
    tilt=st.floats(-80.0, 80.0),
    about_x=st.booleans(),
)
def test_closest_z_tilt_invariant(theta, tilt, about_x):
    tilt_m = geom.rot_x(tilt * DEG) if about_x else geom.rot_y(tilt * DEG)
    got = geom.closest_z_rotation(geom.rot_z(theta * DEG) @ tilt_m)
    assert abs(geom.angle_diff(got, theta * DEG)) < 1e-9


@settings(deadline=None, max_examples=80)
@given(
    a=st.floats(-30.0, 30.0),
    b=st.floats(-30.0, 30.0),
    c=st.floats(-170.0, 170.0),
)
def test_wrap_angle_addition_associative(a, b, c):
    a, b, c = a * DEG, b * DEG, c * DEG
    lhs = geom.wrap_angle(geom.wrap_angle(a + b) + c)
    rhs = geom.wrap_angle(a + geom.wrap_angle(b + c))
    assert abs(geom.angle_diff(lhs, rhs)) < 1e-9


def test_wrap_angle_canonical_interval():
    assert geom.wrap_angle(math.pi) == pytest.approx(math.pi)
    assert geom.wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert geom.wrap_angle(3 * math.pi) == pytest.approx(math.pi)
    assert geom.wrap_angle(0.0) == 0.0


# ------------------------------------------------------------- procrustes_fit

def test_procrustes_single_target():
    rng = np.random.default_rng(3)
    r = geom.random_rotation(rng)
    assert np.allclose(geom.procrustes_fit([r]), r, atol=1e-12)


def test_procrustes_symmetric_pair():
    got = geom.procrustes_fit([geom.rot_z(10 * DEG), geom.rot_z(-10 * DEG)])
    assert np.allclose(got, np.eye(3), atol=1e-12)


def test_procrustes_noisy_cloud_beats_covering():
    rng = np.random.default_rng(11)
    r_star = geom.random_rotation(rng)
    targets = []
    for _ in range(20):
        w = rng.normal(0.0, 2 * DEG, size=3)
        targets.append(r_star @ geom.so3_exp(w))
    fit = geom.procrustes_fit(targets)
    assert geom.geodesic_angle(fit, r_star) < 0.5 * DEG

    oracle_r, oracle_cost = procrustes_covering_oracle(targets, n=10_000, seed=5)
    assert residual_sum(fit, targets) <= oracle_cost + 1e-9
    assert geom.geodesic_angle(fit, oracle_r) < 0.2 * DEG


def test_procrustes_rank_deficient():
    t = np.outer([1.0, 0.0, 0.0], [1.0, 0.0, 0.0])
    with pytest.raises(RankDeficient):
        geom.procrustes_fit([t])


# -------------------------------------------------------------- min_area_rect

def test_rect_axis_aligned_square():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    ang, w, h, center = geom.min_area_rect(pts)
    assert ang == pytest.approx(0.0, abs=1e-12)
    assert w == pytest.approx(1.0) and h == pytest.approx(1.0)
    assert np.allclose(center, [0.5, 0.5])


def test_rect_rotated_square_matches_sweep():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    pts = pts @ geom.rot2(30 * DEG).T
    area_o, ang_o, w_o, h_o = rect_sweep_oracle(pts)
    ang, w, h, _ = geom.min_area_rect(pts)
    assert area_o == pytest.approx(1.0, abs=1e-4)
    assert abs(geom.angle_diff(ang, 30 * DEG)) % (math.pi / 2) < 1e-9
    assert w * h == pytest.approx(area_o, abs=1e-4)
    assert abs(geom.angle_diff(4 * ang, 4 * ang_o)) < 4 * 0.02 * DEG


def test_rect_right_triangle_matches_sweep():
    # the minimum enclosing rectangle of a triangle has twice its area;
    # all three edge alignments tie at area 1.0 for this triangle
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    area_o, _, _, _ = rect_sweep_oracle(pts)
    ang, w, h, _ = geom.min_area_rect(pts)
    assert area_o == pytest.approx(1.0, abs=1e-4)
    assert w * h == pytest.approx(1.0, abs=1e-9)
    near = min(abs(geom.angle_diff(ang, t)) for t in (0.0, 45 * DEG, 90 * DEG))
    assert near < 1e-9


def test_rect_collinear_raises():
    pts = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    with pytest.raises(DegenerateHull):
        geom.min_area_rect(pts)


@settings(deadline=None, max_examples=60)
@given(
    dx=st.floats(-50.0, 50.0),
    dy=st.floats(-50.0, 50.0),
    seed=st.integers(0, 10_000),
)
def test_rect_translation_invariant(dx, dy, seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1.0, 1.0, size=(12, 2))
    try:
        a0, w0, h0, c0 = geom.min_area_rect(pts)
    except DegenerateHull:
        return
    a1, w1, h1, c1 = geom.min_area_rect(pts + [dx, dy])
    assert abs(geom.angle_diff(4 * a0, 4 * a1)) < 1e-7
    assert w1 == pytest.approx(w0, abs=1e-9)
    assert h1 == pytest.approx(h0, abs=1e-9)
    assert np.allclose(c1, c0 + [dx, dy], atol=1e-7)


def test_rect_rotation_equivariant():
    rng = np.random.default_rng(7)
    pts = rng.uniform(-1.0, 1.0, size=(15, 2))
    a0, w0, h0, _ = geom.min_area_rect(pts)
    for delta in (10 * DEG, 37 * DEG, 61 * DEG):
        a1, w1, h1, _ = geom.min_area_rect(pts @ geom.rot2(delta).T)
        assert w1 * h1 == pytest.approx(w0 * h0, abs=1e-9)
        assert sorted([w1, h1]) == pytest.approx(sorted([w0, h0]), abs=1e-9)
        assert abs(geom.angle_diff(4 * a1, 4 * (a0 + delta))) < 1e-7


# -------------------------------------------------------------- hull_perimeter

def test_hull_perimeter_square():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    assert geom.hull_perimeter(pts) == pytest.approx(4.0, abs=1e-12)


def test_hull_perimeter_ignores_interior():
    pts = np.array([
        [0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0],
        [0.5, 0.5], [0.25, 0.75], [0.9, 0.1],
    ])
    assert geom.hull_perimeter(pts) == pytest.approx(4.0, abs=1e-12)


def test_hull_perimeter_regular_hexagon():
    # circumradius 1 -> side length 1 -> perimeter 6 (analytic)
    ang = np.arange(6) * math.pi / 3.0
    pts = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    assert geom.hull_perimeter(pts) == pytest.approx(6.0, abs=1e-9)


def test_hull_perimeter_collinear_doubled_extent():
    pts = np.array([[0.0, 0.0], [1.0, 1.0], [3.0, 3.0]])
    assert geom.hull_perimeter(pts) == pytest.approx(2.0 * math.hypot(3, 3), abs=1e-9)


def test_hull_perimeter_too_few():
    with pytest.raises(TooFewPoints):
        geom.hull_perimeter(np.array([[0.0, 0.0], [1.0, 0.0]]))


@settings(deadline=None, max_examples=40)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.1, 20.0))
def test_hull_perimeter_scale_equivariant(seed, scale):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1.0, 1.0, size=(10, 2))
    p0 = geom.hull_perimeter(pts)
    p1 = geom.hull_perimeter(pts * scale)
    assert p1 == pytest.approx(scale * p0, rel=1e-9)


# ---------------------------------------------------------- dlt_homography_4pt

UNIT_SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def test_dlt_identity():
    h = geom.dlt_homography_4pt(UNIT_SQUARE, UNIT_SQUARE)
    assert np.allclose(h, np.eye(3), atol=1e-10)


def test_dlt_pure_scale():
    h = geom.dlt_homography_4pt(UNIT_SQUARE, 2.0 * UNIT_SQUARE)
    assert np.allclose(h, np.diag([2.0, 2.0, 1.0]), atol=1e-10)


def test_dlt_trapezoid_forward_residual():
    dst = np.array([[0.0, 0.0], [4.0, 0.5], [3.0, 3.0], [-0.5, 2.0]])
    h = geom.dlt_homography_4pt(UNIT_SQUARE, dst)
    mapped = geom.apply_homography(h, UNIT_SQUARE)
    assert float(np.abs(mapped - dst).max()) < 1e-10


def test_dlt_collinear_raises():
    src = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [0.0, 1.0]])
    with pytest.raises(DegenerateConfiguration):
        geom.dlt_homography_4pt(src, UNIT_SQUARE)


def test_dlt_roundtrip_random_quads():
    rng = np.random.default_rng(2)
    for _ in range(25):
        dst = UNIT_SQUARE * 50 + rng.uniform(-8, 8, size=(4, 2))
        h = geom.dlt_homography_4pt(UNIT_SQUARE * 50, dst)
        mapped = geom.apply_homography(h, UNIT_SQUARE * 50)
        assert float(np.abs(mapped - dst).max()) < 1e-8
