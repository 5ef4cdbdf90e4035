"""Small deterministic geometry kernels used across the pipeline.

Conventions: 3D rotations are world-to-camera matrices acting on column
vectors; image coordinates are (x right, y down); 2D rotations R(t) =
[[cos t, -sin t], [sin t, cos t]] act on pixel coordinates.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.spatial import ConvexHull
from scipy.spatial._qhull import QhullError

from .errors import (
    DegenerateConfiguration,
    DegenerateHull,
    DegenerateRotation,
    RankDeficient,
    TooFewPoints,
)

TAU = 2.0 * math.pi


def wrap_angle(a: float) -> float:
    """Wrap an angle to the canonical interval (-pi, pi]."""
    w = math.remainder(float(a), TAU)
    if w <= -math.pi:
        w = math.pi
    return w


def angle_diff(a: float, b: float) -> float:
    """Signed wrapped difference a - b in (-pi, pi]."""
    return wrap_angle(a - b)


def unit(v: np.ndarray) -> np.ndarray:
    """Normalize a vector; raises on near-zero input."""
    v = np.asarray(v, dtype=float)
    n = float(np.linalg.norm(v))
    if n < 1e-15:
        raise DegenerateConfiguration("cannot normalize a near-zero vector")
    return v / n


def rot2(t: float) -> np.ndarray:
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, -s], [s, c]])


def rot_x(t: float) -> np.ndarray:
    c, s = math.cos(t), math.sin(t)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(t: float) -> np.ndarray:
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(t: float) -> np.ndarray:
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Matrix exponential of the cross-product matrix of w (Rodrigues)."""
    w = np.asarray(w, dtype=float)
    t = float(np.linalg.norm(w))
    K = np.array([
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ])
    if t < 1e-12:
        return np.eye(3) + K + 0.5 * (K @ K)
    a = math.sin(t) / t
    b = (1.0 - math.cos(t)) / (t * t)
    return np.eye(3) + a * K + b * (K @ K)


def geodesic_angle(ra: np.ndarray, rb: np.ndarray) -> float:
    """Rotation angle of ra * rb^T, in radians."""
    c = (np.trace(ra @ rb.T) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, c)))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation via QR of a Gaussian matrix, det fixed to +1."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q @ np.diag(np.sign(np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, 2] = -q[:, 2]
    return q


def project_to_rotation(m: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix to m in the Frobenius norm."""
    u, s, vt = np.linalg.svd(np.asarray(m, dtype=float))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def closest_z_rotation(r: np.ndarray) -> float:
    """Angle of the z-axis rotation nearest to r in the chordal metric.

    Minimizes ||r - Rz(t)||_F over t; the closed form only involves the
    upper-left 2x2 block of r.
    """
    r = np.asarray(r, dtype=float)
    num = r[1, 0] - r[0, 1]
    den = r[0, 0] + r[1, 1]
    if abs(num) < 1e-12 and abs(den) < 1e-12:
        raise DegenerateRotation("in-plane component of rotation is undefined")
    return math.atan2(num, den)


def procrustes_fit(targets) -> np.ndarray:
    """Rotation minimizing the summed squared Frobenius distance to targets.

    Closed form via the SVD of the target sum with determinant correction.
    Raises RankDeficient when the sum has rank < 2 (minimizer not unique).
    """
    s = np.zeros((3, 3))
    n = 0
    for t in targets:
        s += np.asarray(t, dtype=float)
        n += 1
    if n == 0:
        raise RankDeficient("no target matrices given")
    u, sv, vt = np.linalg.svd(s)
    scale = max(sv[0], 1.0)
    if sv[1] < 1e-9 * scale:
        raise RankDeficient("target sum has rank < 2")
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def _hull_points(points: np.ndarray) -> np.ndarray:
    try:
        hull = ConvexHull(points)
    except QhullError as exc:
        raise DegenerateHull("points are collinear or degenerate") from exc
    return points[hull.vertices]


def min_area_rect(points) -> tuple[float, float, float, np.ndarray]:
    """Minimum-area enclosing rectangle of a 2D point set.

    Returns (orientation, width, height, center) with the orientation
    reduced mod pi/2 into [0, pi/2). The optimal rectangle shares a
    direction with some hull edge, so only unique edge angles mod pi/2
    need to be tested.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[0] < 3:
        raise DegenerateHull("need at least 3 points")
    hp = _hull_points(points)
    edges = np.roll(hp, -1, axis=0) - hp
    angles = np.mod(np.arctan2(edges[:, 1], edges[:, 0]), math.pi / 2.0)
    angles = np.unique(np.round(angles, 12))

    best = None
    for a in angles:
        r = rot2(-float(a))
        q = hp @ r.T
        lo = q.min(axis=0)
        hi = q.max(axis=0)
        w, h = hi - lo
        area = w * h
        if best is None or area < best[0] - 1e-12:
            cen_local = (lo + hi) / 2.0
            center = rot2(float(a)) @ cen_local
            best = (area, float(a) % (math.pi / 2.0), float(w), float(h), center)
    _, ang, w, h, center = best
    return ang, w, h, center


def hull_perimeter(points) -> float:
    """Perimeter of the convex hull; collinear sets count the doubled extent."""
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[0] < 3:
        raise TooFewPoints("need at least 3 points")
    try:
        hull = ConvexHull(points)
    except QhullError:
        c = points - points.mean(axis=0)
        _, sv, vt = np.linalg.svd(c, full_matrices=False)
        if sv[0] < 1e-12:
            return 0.0
        proj = c @ vt[0]
        return 2.0 * float(proj.max() - proj.min())
    hp = points[hull.vertices]
    d = np.roll(hp, -1, axis=0) - hp
    return float(np.sqrt((d ** 2).sum(axis=1)).sum())


def dlt_homography_4pt(src, dst) -> np.ndarray:
    """Exact homography mapping 4 source points onto 4 destination points.

    Solves the 8x8 linear system with h33 = 1. Raises
    DegenerateConfiguration when 3 of the 4 source points are collinear
    or the system is singular.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != (4, 2) or dst.shape != (4, 2):
        raise DegenerateConfiguration("expected 4 source and 4 destination points")
    scale = max(1.0, float(np.abs(src - src.mean(axis=0)).max()))
    for combo in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        a, b, c = src[list(combo)]
        area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(area) < 1e-9 * scale * scale:
            raise DegenerateConfiguration("3 of 4 source points are collinear")
    A = np.zeros((8, 8))
    rhs = np.zeros(8)
    for k in range(4):
        x, y = src[k]
        u, v = dst[k]
        A[2 * k] = [x, y, 1.0, 0.0, 0.0, 0.0, -x * u, -y * u]
        A[2 * k + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -x * v, -y * v]
        rhs[2 * k] = u
        rhs[2 * k + 1] = v
    try:
        h = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as exc:
        raise DegenerateConfiguration("homography system is singular") from exc
    if not np.all(np.isfinite(h)):
        raise DegenerateConfiguration("homography system is ill-conditioned")
    return np.array([
        [h[0], h[1], h[2]],
        [h[3], h[4], h[5]],
        [h[6], h[7], 1.0],
    ])


def apply_homography(h: np.ndarray, pts) -> np.ndarray:
    """Apply a homography to an (n, 2) array of points."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    q = pts @ h[:2, :2].T + h[:2, 2]
    w = pts @ h[2, :2] + h[2, 2]
    return q / w[:, None]


def normalize_homography(h: np.ndarray) -> np.ndarray:
    """Scale a homography so h33 = 1 (requires h33 bounded away from 0)."""
    h = np.asarray(h, dtype=float)
    if abs(h[2, 2]) < 1e-12:
        raise DegenerateConfiguration("h33 is numerically zero")
    return h / h[2, 2]
