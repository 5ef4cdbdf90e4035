"""Naturalness metrics for stitched panoramas.

Local distortion measures how unevenly each mesh quad's homography
stretches its pixels (coefficient of variation of the Jacobian
determinant over non-overlapping quads). Global direction consistency
compares each image's rendered orientation change against the change
predicted by the ground-truth camera extrinsics.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import geom
from .errors import (
    DegenerateConfiguration,
    DegenerateHull,
    MissingTruth,
    NoFreeQuads,
    SingleImage,
)

DEG = math.pi / 180.0


@dataclass
class DistortionReport:
    per_image: dict            # id -> D_i (mean quad c.v.)
    ld: float                  # max over images
    per_quad: dict             # id -> (ny, nx) float array, NaN = overlap


@dataclass
class GdicReport:
    kappas_deg: dict           # id -> rendered orientation kappa
    gammas_deg: dict           # id -> truth-predicted orientation gamma
    reference: int
    gdic_deg: float


def det_jacobian(h: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Jacobian determinant of the homography map at the given points.

    For the projective map with denominator w = h31 x + h32 y + h33 the
    determinant collapses to det(H) / w^3, which is invariant to the
    scale of H.
    """
    h = np.asarray(h, dtype=float)
    w = h[2, 0] * xs + h[2, 1] * ys + h[2, 2]
    return np.linalg.det(h) / w ** 3


def quad_jacobian_cv(h: np.ndarray, x0: float, x1: float,
                     y0: float, y1: float) -> float:
    """Coefficient of variation of det J over the quad's integer pixels."""
    xs = np.arange(math.ceil(x0 - 1e-9), math.floor(x1 + 1e-9) + 1)
    ys = np.arange(math.ceil(y0 - 1e-9), math.floor(y1 + 1e-9) + 1)
    if len(xs) == 0 or len(ys) == 0:
        return 0.0
    gx, gy = np.meshgrid(xs.astype(float), ys.astype(float))
    vals = det_jacobian(h, gx.ravel(), gy.ravel())
    mu = float(np.mean(vals))
    sigma = float(np.std(vals))
    if abs(mu) < 1e-300:
        return math.inf if sigma > 0 else 0.0
    return sigma / abs(mu)


def local_distortion(meshes: dict) -> DistortionReport:
    """Distortion of every non-overlapping quad, summarized per image.

    Missing overlap flags mean no quad is excluded.
    """
    per_image = {}
    per_quad = {}
    for i in sorted(meshes):
        mesh = meshes[i]
        flags = mesh.overlap
        if flags is None:
            flags = np.zeros((mesh.ny, mesh.nx), dtype=bool)
        cvs = np.full((mesh.ny, mesh.nx), np.nan)
        for r in range(mesh.ny):
            for c in range(mesh.nx):
                if flags[r, c]:
                    continue
                corners = mesh.quad_corner_indices(r, c)
                src = mesh.vertices[corners]
                dst = mesh.deformed[corners]
                try:
                    h = geom.dlt_homography_4pt(src, dst)
                except DegenerateConfiguration:
                    cvs[r, c] = math.inf
                    continue
                cvs[r, c] = quad_jacobian_cv(
                    h, src[0, 0], src[2, 0], src[0, 1], src[2, 1])
        per_quad[i] = cvs
        free = ~np.isnan(cvs)
        if not free.any():
            warnings.warn(
                f"image {i} has no non-overlapping quads; skipping its "
                "distortion score", NoFreeQuads)
            continue
        per_image[i] = float(np.mean(cvs[free]))
    ld = max(per_image.values()) if per_image else 0.0
    return DistortionReport(per_image=per_image, ld=ld, per_quad=per_quad)


def up_vector_angle(rotation: np.ndarray) -> float:
    """Image-plane angle gamma of the projected world up direction.

    The world up vector (-z in scene coordinates) is rotated into the
    camera frame and its image-plane component measured against the
    image y axis, signed toward +x.
    """
    up_cam = np.asarray(rotation, dtype=float) @ np.array([0.0, 0.0, -1.0])
    return math.atan2(up_cam[0], up_cam[1])


def _disambiguate_quarter(raw: float, target: float) -> float:
    """Representative of raw mod 90 degrees closest to target (radians)."""
    half_pi = math.pi / 2.0
    k = round((target - raw) / half_pi)
    return raw + k * half_pi


def gdic(meshes: dict, truth, reference: int) -> GdicReport:
    """Global direction inconsistency versus ground-truth extrinsics.

    kappa_i is the min-area-rectangle orientation of image i's deformed
    vertices, lifted from its quarter-turn ambiguity toward the
    truth-predicted orientation; the report averages the absolute
    mismatch between rendered and predicted orientation changes over
    the non-reference images.
    """
    ids = sorted(meshes)
    if len(ids) < 2:
        raise SingleImage("direction consistency needs at least two images")
    if truth is None or getattr(truth, "rotations", None) is None:
        raise MissingTruth("scene extrinsics are required for this metric")
    if any(i >= len(truth.rotations) for i in ids):
        raise MissingTruth("extrinsics missing for some images")
    if reference not in meshes:
        raise MissingTruth(f"reference {reference} has no mesh")

    gammas = {i: up_vector_angle(truth.rotation(i)) for i in ids}
    raw = {}
    for i in ids:
        try:
            ang, _, _, _ = geom.min_area_rect(meshes[i].deformed)
        except DegenerateHull as exc:
            raise MissingTruth(f"image {i} has a degenerate mesh") from exc
        raw[i] = ang

    kappa_r = raw[reference]
    gamma_r = gammas[reference]
    kappas = {reference: kappa_r}
    total = 0.0
    for i in ids:
        if i == reference:
            continue
        target = gammas[i] - gamma_r + kappa_r
        kappas[i] = _disambiguate_quarter(raw[i], target)
        mismatch = geom.wrap_angle(
            (kappas[i] - kappa_r) - (gammas[i] - gamma_r))
        total += abs(mismatch)
    value = math.degrees(total / (len(ids) - 1))
    return GdicReport(
        kappas_deg={i: math.degrees(k) for i, k in kappas.items()},
        gammas_deg={i: math.degrees(g) for i, g in gammas.items()},
        reference=reference,
        gdic_deg=value,
    )
