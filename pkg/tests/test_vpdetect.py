"""Tests for vanishing point clustering and orthogonal triplet selection.

Oracle strategy: scenes are built analytically (pencils of lines through
a chosen point, parallel bundles, or projections of a known camera), so
every expected vanishing point, focal length, and axis direction is
known in closed form before the detector runs.
"""
import json
import math

import numpy as np
import pytest

from vpstitch import geom, synth
from vpstitch.errors import NoConsensus, NoOrthogonalPair
from vpstitch.ingest import LineSegment
from vpstitch.vpdetect import (
    VpCandidate,
    cluster_vanishing_candidates,
    detect_vps,
    select_orthogonal_triplet,
)

DEG = math.pi / 180.0


def pencil_through(point, n, rng, jitter_deg=0.0, tmin=60.0, tmax=220.0,
                   fan=(0.25, 0.75)):
    """Segments whose support lines pass through `point`, with optional
    angular jitter applied about each segment midpoint."""
    segs = []
    px, py = point
    for k in range(n):
        frac = fan[0] + (fan[1] - fan[0]) * k / max(n - 1, 1)
        ang = -frac * math.pi + rng.uniform(-0.1, 0.1)
        d = np.array([math.cos(ang), math.sin(ang)])
        t0 = rng.uniform(tmin, tmax)
        t1 = t0 + rng.uniform(30.0, 80.0)
        p0 = np.array([px, py]) + t0 * d
        p1 = np.array([px, py]) + t1 * d
        if jitter_deg:
            mid = (p0 + p1) / 2.0
            rot = geom.rot2(rng.uniform(-jitter_deg, jitter_deg) * DEG)
            p0 = mid + rot @ (p0 - mid)
            p1 = mid + rot @ (p1 - mid)
        segs.append(LineSegment(p0[0], p0[1], p1[0], p1[1], 1.0))
    return segs


def parallel_bundle(direction_deg, n, rng, box=(0, 0, 640, 480), length=90.0):
    d = np.array([math.cos(direction_deg * DEG), math.sin(direction_deg * DEG)])
    segs = []
    for _ in range(n):
        p0 = np.array([rng.uniform(box[0] + 20, box[2] - 20 - abs(d[0]) * length),
                       rng.uniform(box[1] + 20, box[3] - 20 - abs(d[1]) * length)])
        p1 = p0 + length * d
        segs.append(LineSegment(p0[0], p0[1], p1[0], p1[1], 1.0))
    return segs


def vp_pixel(cand):
    return np.array([cand.point[0] / cand.point[2], cand.point[1] / cand.point[2]])


class TestClusterCandidates:
    def test_parallel_segments_give_infinite_candidate(self):
        rng = np.random.default_rng(3)
        segs = parallel_bundle(0.0, 12, rng)
        cands = cluster_vanishing_candidates(segs)
        best = cands[0]
        assert best.support >= 11
        assert best.is_infinite()
        direction = best.point[:2] / np.linalg.norm(best.point[:2])
        assert abs(abs(direction[0]) - 1.0) < 1e-6

    def test_pencil_located_within_two_pixels(self):
        rng = np.random.default_rng(7)
        segs = pencil_through((500.0, 300.0), 12, rng, jitter_deg=1.0)
        cands = cluster_vanishing_candidates(segs)
        best = cands[0]
        assert best.support >= 9
        assert np.linalg.norm(vp_pixel(best) - [500.0, 300.0]) <= 2.0

    def test_two_pencils_partition_inliers(self):
        rng = np.random.default_rng(11)
        a = pencil_through((-150.0, 240.0), 14, rng, jitter_deg=0.2)
        b = pencil_through((820.0, 200.0), 14, rng, jitter_deg=0.2)
        segs = a + b
        cands = cluster_vanishing_candidates(segs)
        assert len(cands) >= 2
        got = {tuple(np.round(vp_pixel(c))) for c in cands[:2]}
        # Each of the two strongest candidates should recover one pencil
        # with at least 90% of its members and nothing from the other.
        for c in cands[:2]:
            p = vp_pixel(c)
            if np.linalg.norm(p - [-150.0, 240.0]) < 10.0:
                expect = set(range(0, 14))
            else:
                assert np.linalg.norm(p - [820.0, 200.0]) < 10.0
                expect = set(range(14, 28))
            inl = set(int(i) for i in c.inliers)
            assert len(inl & expect) >= 0.9 * 14
            assert len(inl - expect) == 0
        assert len(got) == 2

    def test_too_few_segments_raises(self):
        with pytest.raises(NoConsensus):
            cluster_vanishing_candidates(
                [LineSegment(0.0, 0.0, 10.0, 0.0, 1.0)])

    def test_scattered_segments_raise_no_consensus(self):
        rng = np.random.default_rng(5)
        segs = []
        for _ in range(9):
            p = rng.uniform(40, 600, size=2)
            ang = rng.uniform(0, math.pi)
            d = 45.0 * np.array([math.cos(ang), math.sin(ang)])
            segs.append(LineSegment(p[0], p[1], p[0] + d[0], p[1] + d[1], 1.0))
        with pytest.raises(NoConsensus):
            cluster_vanishing_candidates(segs, min_support=6)

    def test_pair_subsampling_still_finds_pencil(self):
        rng = np.random.default_rng(13)
        segs = pencil_through((500.0, 300.0), 40, rng, jitter_deg=0.5)
        segs += parallel_bundle(90.0, 40, rng)
        # 80 segments -> 3160 pairs > max_pairs, forcing the sampler.
        cands = cluster_vanishing_candidates(segs, max_pairs=800, seed=2)
        found = any(
            not c.is_infinite()
            and np.linalg.norm(vp_pixel(c) - [500.0, 300.0]) < 3.0
            for c in cands)
        assert found


def make_triplet_scene(focal, width, height, rotation, rng, n_per_axis=10,
                       jitter_deg=0.0):
    """Segments converging at the projections of the rotated world axes."""
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    segs = []
    for k in range(3):
        d = rotation[:, k]
        if abs(d[2]) > 1e-9:
            vp = (focal * d[0] / d[2] + cx, focal * d[1] / d[2] + cy)
            segs += pencil_through(vp, n_per_axis, rng, jitter_deg=jitter_deg,
                                   tmin=150.0, tmax=400.0)
        else:
            segs += parallel_bundle(math.degrees(math.atan2(d[1], d[0])),
                                    n_per_axis, rng,
                                    box=(0, 0, width, height))
    return segs


def axis_error_deg(directions, expected):
    """Worst-axis angular error, sign- and permutation-insensitive."""
    worst = 0.0
    for k in range(3):
        dots = np.abs(expected[:, k] @ directions)
        worst = max(worst, math.degrees(math.acos(min(1.0, dots.max()))))
    return worst


class TestOrthogonalTriplet:
    def test_exact_scene_recovers_focal_and_axes(self):
        rng = np.random.default_rng(21)
        rot = geom.rot_z(8 * DEG) @ geom.rot_x(-62 * DEG) @ geom.rot_y(15 * DEG)
        segs = make_triplet_scene(520.0, 640, 480, rot, rng)
        trip = detect_vps(segs, 640, 480)
        assert abs(trip.focal - 520.0) / 520.0 < 1e-3
        assert axis_error_deg(trip.directions, rot) < 0.05
        assert trip.residual < 1e-6

    def test_orthonormal_after_selection(self):
        rng = np.random.default_rng(22)
        # Keep all three axes well away from the image plane so the
        # vanishing points stay finite and inside a sane range.
        rot = geom.rot_x(-55 * DEG) @ geom.rot_y(30 * DEG)
        segs = make_triplet_scene(700.0, 640, 480, rot, rng, jitter_deg=0.3)
        trip = detect_vps(segs, 640, 480)
        eye = trip.directions.T @ trip.directions
        assert np.abs(eye - np.eye(3)).max() < 1e-12
        assert np.linalg.det(trip.directions) > 0.999999

    def test_synthetic_box_scene_focal_within_five_percent(self, tmp_path):
        spec = synth.SceneSpec(n_cameras=2, focal_px=800.0, width=640,
                               height=480, rolls_deg=[0.0, 0.0],
                               tilt_range_deg=0.0, seed=41, n_boxes=40)
        truth = synth.generate_scene(spec, tmp_path)
        data = json.loads((tmp_path / "segments_0.json").read_text())
        segs = [LineSegment(d["x0"], d["y0"], d["x1"], d["y1"], d["strength"])
                for d in data]
        trip = detect_vps(segs, 640, 480)
        assert abs(trip.focal - 800.0) / 800.0 < 0.05
        assert axis_error_deg(trip.directions, truth.rotation(0)) < 1.0

    def test_same_side_candidates_reject_focal(self):
        rng = np.random.default_rng(31)
        cx, cy = 319.5, 239.5
        a = pencil_through((cx + 200.0, cy), 10, rng, fan=(0.35, 0.65))
        b = pencil_through((cx + 300.0, cy + 50.0), 10, rng, fan=(0.35, 0.65))
        cands = cluster_vanishing_candidates(a + b, max_candidates=2)
        finite = [c for c in cands if not c.is_infinite()]
        assert len(finite) >= 2
        with pytest.raises(NoOrthogonalPair):
            select_orthogonal_triplet(finite, a + b, 640, 480)

    def test_focal_outside_range_rejected(self):
        # Two vanishing points straddling the center, but so close to it
        # that the implied focal is far below 0.3 * width.
        rng = np.random.default_rng(33)
        cx, cy = 319.5, 239.5
        a = pencil_through((cx - 30.0, cy), 10, rng, fan=(0.35, 0.65))
        b = pencil_through((cx + 30.0, cy), 10, rng, fan=(0.35, 0.65))
        cands = cluster_vanishing_candidates(a + b, max_candidates=2)
        finite = [c for c in cands if not c.is_infinite()]
        with pytest.raises(NoOrthogonalPair):
            select_orthogonal_triplet(finite, a + b, 640, 480)

    def test_focal_invariant_under_segment_rotation(self):
        rng = np.random.default_rng(35)
        rot = geom.rot_x(-58 * DEG) @ geom.rot_y(22 * DEG)
        segs = make_triplet_scene(650.0, 640, 480, rot, rng)
        trip0 = detect_vps(segs, 640, 480)

        cx, cy = 319.5, 239.5
        r90 = geom.rot2(90 * DEG)
        rotated = []
        for s in segs:
            p0 = r90 @ (np.array([s.x0, s.y0]) - [cx, cy]) + [cx, cy]
            p1 = r90 @ (np.array([s.x1, s.y1]) - [cx, cy]) + [cx, cy]
            rotated.append(LineSegment(p0[0], p0[1], p1[0], p1[1], s.strength))
        trip1 = detect_vps(rotated, 640, 480)
        assert abs(trip0.focal - trip1.focal) / trip0.focal < 1e-6

    def test_candidate_without_pair_raises(self):
        cand = VpCandidate(point=np.array([1.0, 0.0, 0.0]), support=10,
                           inliers=np.arange(10))
        segs = [LineSegment(0.0, float(i) * 10, 50.0, float(i) * 10, 1.0)
                for i in range(10)]
        with pytest.raises(NoOrthogonalPair):
            select_orthogonal_triplet([cand], segs, 640, 480)
