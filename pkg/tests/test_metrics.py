"""Tests for the naturalness metrics.

Oracles: the Jacobian determinant has a closed form checked against
central finite differences; direction-consistency fixtures are built
from known camera rolls and mesh rotations so the expected values
follow by hand.
"""
import math

import numpy as np
import pytest

from vpstitch import geom, metrics
from vpstitch.errors import MissingTruth, NoFreeQuads, SingleImage
from vpstitch.meshwarp import make_grid_mesh
from vpstitch.metrics import (
    det_jacobian,
    gdic,
    local_distortion,
    up_vector_angle,
)
from vpstitch.synth import SceneTruth, camera_rotation

DEG = math.pi / 180.0


def rot2(t):
    return np.array([[math.cos(t), -math.sin(t)],
                     [math.sin(t), math.cos(t)]])


def mesh_with_transform(image_id, w, h, nx, ny, fn):
    mesh = make_grid_mesh(image_id, w, h, nx=nx, ny=ny)
    mesh.deformed = np.apply_along_axis(fn, 1, mesh.vertices)
    return mesh


def similarity_fn(theta, scale=1.0, shift=(0.0, 0.0)):
    r = rot2(theta) * scale
    t = np.asarray(shift, dtype=float)
    return lambda p: r @ p + t


def truth_with_rolls(rolls_deg, w=100, h=80):
    rotations = [camera_rotation(0.0, 0.0, r * DEG).tolist()
                 for r in rolls_deg]
    return SceneTruth(rotations=rotations, focals=[500.0] * len(rolls_deg),
                      rolls_deg=list(rolls_deg),
                      pans_deg=[0.0] * len(rolls_deg),
                      tilts_deg=[0.0] * len(rolls_deg),
                      seed=0, mode="manhattan", width=w, height=h)


class TestDetJacobian:
    def test_affine_map_constant(self):
        h = np.array([[1.2, 0.3, 5.0], [-0.1, 0.9, -2.0], [0.0, 0.0, 1.0]])
        xs = np.array([0.0, 10.0, 55.0])
        ys = np.array([3.0, -4.0, 20.0])
        vals = det_jacobian(h, xs, ys)
        expected = 1.2 * 0.9 - 0.3 * (-0.1)
        assert np.allclose(vals, expected, atol=1e-12)

    def test_matches_central_differences(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            h = np.eye(3)
            h[0, :2] = rng.uniform(0.8, 1.2, 2) * [1, 0.2]
            h[1, :2] = rng.uniform(0.8, 1.2, 2) * [0.2, 1]
            h[:2, 2] = rng.uniform(-5, 5, 2)
            h[2, :2] = rng.uniform(-1, 1, 2) * 1e-3
            x = float(rng.uniform(5, 95))
            y = float(rng.uniform(5, 95))
            analytic = det_jacobian(h, np.array([x]), np.array([y]))[0]
            eps = 1e-4

            def fmap(xx, yy):
                return geom.apply_homography(h, [[xx, yy]])[0]

            du_dx = (fmap(x + eps, y) - fmap(x - eps, y)) / (2 * eps)
            du_dy = (fmap(x, y + eps) - fmap(x, y - eps)) / (2 * eps)
            numeric = du_dx[0] * du_dy[1] - du_dy[0] * du_dx[1]
            assert analytic == pytest.approx(numeric, rel=0.01)

    def test_scale_free_in_h(self):
        h = np.array([[1.1, 0.0, 3.0], [0.0, 0.9, 1.0], [1e-4, -2e-4, 1.0]])
        xs = np.array([10.0, 40.0])
        ys = np.array([20.0, 60.0])
        assert np.allclose(det_jacobian(h, xs, ys),
                           det_jacobian(7.3 * h, xs, ys), rtol=1e-12)


class TestLocalDistortion:
    def test_similarity_warp_zero(self):
        meshes = {0: mesh_with_transform(
            0, 100, 80, 4, 4, similarity_fn(17 * DEG, 1.3, (40.0, -6.0)))}
        report = local_distortion(meshes)
        assert report.ld <= 1e-9
        assert report.per_image[0] <= 1e-9

    def test_shear_warp_zero(self):
        shear = np.array([[1.0, 0.35], [0.0, 1.0]])
        meshes = {0: mesh_with_transform(0, 100, 80, 4, 4,
                                         lambda p: shear @ p)}
        report = local_distortion(meshes)
        assert report.ld <= 1e-9

    def test_projective_warp_positive_and_oracle_consistent(self):
        h = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1e-3, 0.0, 1.0]])
        meshes = {0: mesh_with_transform(
            0, 101, 101, 1, 1,
            lambda p: geom.apply_homography(h, p[None, :])[0])}
        report = local_distortion(meshes)
        cv = report.per_quad[0][0, 0]
        assert cv > 0.01

        # oracle: recompute the c.v. from finite-difference Jacobians
        xs, ys = np.meshgrid(np.arange(101.0), np.arange(101.0))
        eps = 1e-3
        vals = []
        for x, y in zip(xs.ravel(), ys.ravel()):
            dux = (geom.apply_homography(h, [[x + eps, y]])[0]
                   - geom.apply_homography(h, [[x - eps, y]])[0]) / (2 * eps)
            duy = (geom.apply_homography(h, [[x, y + eps]])[0]
                   - geom.apply_homography(h, [[x, y - eps]])[0]) / (2 * eps)
            vals.append(dux[0] * duy[1] - duy[0] * dux[1])
        vals = np.asarray(vals)
        oracle = vals.std() / abs(vals.mean())
        assert cv == pytest.approx(oracle, rel=0.01)

    def test_global_similarity_invariance(self):
        h = np.array([[1.0, 0.02, 0.0], [-0.01, 1.0, 0.0], [5e-4, 2e-4, 1.0]])

        def warp(p):
            return geom.apply_homography(h, p[None, :])[0]

        base = {0: mesh_with_transform(0, 100, 80, 4, 4, warp)}
        sim = similarity_fn(25 * DEG, 1.7, (300.0, 40.0))
        composed = {0: mesh_with_transform(0, 100, 80, 4, 4,
                                           lambda p: sim(warp(p)))}
        r0 = local_distortion(base)
        r1 = local_distortion(composed)
        assert r1.ld == pytest.approx(r0.ld, rel=1e-9)

    def test_overlapped_quads_excluded(self):
        h = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [2e-3, 1e-3, 1.0]])
        mesh = mesh_with_transform(
            0, 100, 80, 2, 2, lambda p: geom.apply_homography(h, p[None])[0])
        mesh.overlap = np.zeros((2, 2), dtype=bool)
        full = local_distortion({0: mesh}).per_image[0]
        mesh.overlap[:, 1] = True   # hide the more distorted right column
        partial = local_distortion({0: mesh}).per_image[0]
        assert partial != pytest.approx(full)
        free = local_distortion({0: mesh}).per_quad[0]
        assert np.isnan(free[:, 1]).all()

    def test_fully_overlapped_image_warns(self):
        mesh0 = mesh_with_transform(0, 60, 60, 2, 2, similarity_fn(0.0))
        mesh1 = mesh_with_transform(1, 60, 60, 2, 2, similarity_fn(5 * DEG))
        mesh0.overlap = np.ones((2, 2), dtype=bool)
        with pytest.warns(NoFreeQuads):
            report = local_distortion({0: mesh0, 1: mesh1})
        assert 0 not in report.per_image
        assert report.ld == report.per_image[1]

    def test_ld_is_max_over_images(self):
        h = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1e-3, 0.0, 1.0]])
        meshes = {
            0: mesh_with_transform(0, 100, 80, 2, 2, similarity_fn(3 * DEG)),
            1: mesh_with_transform(
                1, 100, 80, 2, 2,
                lambda p: geom.apply_homography(h, p[None])[0]),
        }
        report = local_distortion(meshes)
        assert report.ld == max(report.per_image.values())
        assert report.ld == report.per_image[1]


class TestUpVector:
    def test_upright_camera_points_up(self):
        gamma = up_vector_angle(camera_rotation(0.0, 0.0, 0.0))
        # up on the image means -y, i.e. angle pi from the +y axis
        assert abs(geom.wrap_angle(gamma - math.pi)) < 1e-12

    def test_roll_moves_gamma_oppositely(self):
        for roll in (-20.0, -5.0, 4.0, 30.0):
            gamma = up_vector_angle(camera_rotation(0.0, 0.0, roll * DEG))
            base = up_vector_angle(camera_rotation(0.0, 0.0, 0.0))
            assert geom.wrap_angle(gamma - base) == pytest.approx(
                -roll * DEG, abs=1e-12)

    def test_pan_does_not_move_gamma(self):
        base = up_vector_angle(camera_rotation(0.0, 0.0, 7 * DEG))
        panned = up_vector_angle(camera_rotation(25 * DEG, 0.0, 7 * DEG))
        assert geom.wrap_angle(panned - base) == pytest.approx(0.0, abs=1e-12)


class TestGdic:
    def test_two_image_fixture(self):
        meshes = {0: mesh_with_transform(0, 100, 80, 2, 2, similarity_fn(0.0)),
                  1: mesh_with_transform(1, 100, 80, 2, 2,
                                         similarity_fn(5 * DEG))}
        truth = truth_with_rolls([0.0, -3.0])
        report = gdic(meshes, truth, reference=0)
        assert report.gdic_deg == pytest.approx(2.0, abs=1e-9)

    def test_exact_preservation_gives_zero(self):
        rolls = [-5.0, 0.0, 5.0]
        truth = truth_with_rolls(rolls)
        meshes = {i: mesh_with_transform(i, 100, 80, 2, 2,
                                         similarity_fn(-r * DEG))
                  for i, r in enumerate(rolls)}
        report = gdic(meshes, truth, reference=1)
        assert report.gdic_deg < 0.1

    def test_common_rotation_gauge_invariance(self):
        truth = truth_with_rolls([0.0, -3.0])

        def build(offset):
            return {
                0: mesh_with_transform(0, 100, 80, 2, 2,
                                       similarity_fn(offset)),
                1: mesh_with_transform(1, 100, 80, 2, 2,
                                       similarity_fn(5 * DEG + offset)),
            }

        base = gdic(build(0.0), truth, reference=0).gdic_deg
        turned = gdic(build(31 * DEG), truth, reference=0).gdic_deg
        assert turned == pytest.approx(base, abs=1e-9)

    def test_quarter_turn_ambiguity_resolved(self):
        truth = truth_with_rolls([0.0, -3.0])
        meshes = {0: mesh_with_transform(0, 100, 80, 2, 2, similarity_fn(0.0)),
                  1: mesh_with_transform(1, 100, 80, 2, 2,
                                         similarity_fn(95 * DEG))}
        report = gdic(meshes, truth, reference=0)
        assert report.gdic_deg == pytest.approx(2.0, abs=1e-9)

    def test_single_image_raises(self):
        meshes = {0: mesh_with_transform(0, 100, 80, 2, 2, similarity_fn(0.0))}
        with pytest.raises(SingleImage):
            gdic(meshes, truth_with_rolls([0.0]), reference=0)

    def test_missing_truth_raises(self):
        meshes = {0: mesh_with_transform(0, 100, 80, 2, 2, similarity_fn(0.0)),
                  1: mesh_with_transform(1, 100, 80, 2, 2, similarity_fn(0.0))}
        with pytest.raises(MissingTruth):
            gdic(meshes, None, reference=0)
        with pytest.raises(MissingTruth):
            gdic(meshes, truth_with_rolls([0.0]), reference=0)
