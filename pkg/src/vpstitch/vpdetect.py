"""Vanishing point candidates and orthogonal triplet selection.

Candidates come from pairwise segment intersections scored by how many
segments point at them (angular test at each segment midpoint), followed
by non-maximum suppression and a least-squares refit on the inlier
lines. An orthogonal triplet plus the focal length then falls out of the
constraint that two finite vanishing directions are perpendicular:
with the principal point subtracted, f^2 = -(u1 . u2).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import geom
from .errors import NoConsensus, NoOrthogonalPair

DEG = math.pi / 180.0


@dataclass
class VpCandidate:
    point: np.ndarray    # homogeneous (3,), unit norm, raw pixel frame
    support: int
    inliers: np.ndarray  # segment indices

    def is_infinite(self, tol: float = 1e-6) -> bool:
        return abs(self.point[2]) < tol * math.hypot(self.point[0], self.point[1])


@dataclass
class VpTriplet:
    directions: np.ndarray       # 3x3, columns are unit camera-frame directions
    supports: tuple
    focal: float
    residual: float              # max pairwise |dot| before re-orthogonalization

    def column(self, k: int) -> np.ndarray:
        return self.directions[:, k]


def _segment_arrays(segments):
    arr = np.array([[s.x0, s.y0, s.x1, s.y1] for s in segments], dtype=float)
    mids = (arr[:, 0:2] + arr[:, 2:4]) / 2.0
    dirs = arr[:, 2:4] - arr[:, 0:2]
    dirs /= np.maximum(np.linalg.norm(dirs, axis=1, keepdims=True), 1e-12)
    p0 = np.concatenate([arr[:, 0:2], np.ones((len(arr), 1))], axis=1)
    p1 = np.concatenate([arr[:, 2:4], np.ones((len(arr), 1))], axis=1)
    lines = np.cross(p0, p1)
    lines /= np.maximum(np.linalg.norm(lines[:, :2], axis=1, keepdims=True), 1e-12)
    return mids, dirs, lines


def _deviation(points_h, mids, dirs):
    """Angular deviation (candidates x segments) of each segment from each VP."""
    ex = points_h[:, 0:1] - points_h[:, 2:3] * mids[None, :, 0].reshape(1, -1)
    ey = points_h[:, 1:2] - points_h[:, 2:3] * mids[None, :, 1].reshape(1, -1)
    cross = ex * dirs[None, :, 1] - ey * dirs[None, :, 0]
    dot = ex * dirs[None, :, 0] + ey * dirs[None, :, 1]
    return np.arctan2(np.abs(cross), np.abs(dot))


def cluster_vanishing_candidates(
    segments,
    angle_tol_deg: float = 2.0,
    min_support: int = 5,
    max_pairs: int = 2000,
    max_candidates: int = 6,
    seed: int = 0,
) -> list[VpCandidate]:
    """Find vanishing point candidates by pairwise-intersection consensus."""
    k = len(segments)
    if k < 2:
        raise NoConsensus(f"{k} segments cannot form a vanishing point")
    mids, dirs, lines = _segment_arrays(segments)
    center = mids.mean(axis=0)

    n_all = k * (k - 1) // 2
    if n_all <= max_pairs:
        ia, ib = np.triu_indices(k, 1)
    else:
        rng = np.random.default_rng(seed)
        flat = rng.choice(n_all, size=max_pairs, replace=False)
        flat.sort()
        ia, ib = _unrank_pairs(flat, k)
    cands = np.cross(lines[ia], lines[ib])
    norms = np.linalg.norm(cands, axis=1)
    keep = norms > 1e-9
    cands = cands[keep] / norms[keep, None]

    tol = angle_tol_deg * DEG
    dev = _deviation(cands, mids, dirs)
    inlier_mask = dev <= tol
    support = inlier_mask.sum(axis=1)
    if support.max(initial=0) < min_support:
        raise NoConsensus(
            f"best candidate supported by {int(support.max(initial=0))} segments")

    order = np.lexsort((np.arange(len(cands)), -support))
    claimed = np.zeros(k, dtype=bool)
    accepted: list[VpCandidate] = []
    for idx in order:
        if len(accepted) >= max_candidates or support[idx] < min_support:
            break
        mask = inlier_mask[idx]
        if claimed[mask].sum() > 0.5 * mask.sum():
            continue
        refined, mask = _refit_candidate(lines, mids, dirs, mask, tol, center)
        if mask.sum() < min_support or claimed[mask].sum() > 0.5 * mask.sum():
            continue
        claimed |= mask
        accepted.append(VpCandidate(
            point=refined,
            support=int(mask.sum()),
            inliers=np.nonzero(mask)[0],
        ))
    if not accepted:
        raise NoConsensus("non-maximum suppression left no candidate")
    return accepted


def _unrank_pairs(flat, k):
    """Map flat indices in [0, k*(k-1)/2) to upper-triangle (i, j) pairs."""
    ia = np.empty(len(flat), dtype=int)
    ib = np.empty(len(flat), dtype=int)
    row = 0
    row_start = 0
    for n, f in enumerate(flat):
        while f - row_start >= k - 1 - row:
            row_start += k - 1 - row
            row += 1
        ia[n] = row
        ib[n] = row + 1 + (f - row_start)
    return ia, ib


def _refit_candidate(lines, mids, dirs, mask, tol, center):
    """Least-squares vanishing point from inlier lines, in centered coords."""
    cx, cy = center
    v = None
    for _ in range(2):
        # Shift the coordinate origin to the segment centroid for
        # conditioning: a line (a, b, c) becomes (a, b, a*cx + b*cy + c).
        sub = lines[mask].copy()
        sub[:, 2] += sub[:, 0] * cx + sub[:, 1] * cy
        sub /= np.maximum(np.linalg.norm(sub[:, :2], axis=1, keepdims=True), 1e-12)
        _, _, vt = np.linalg.svd(sub)
        vc = vt[-1]
        v = np.array([vc[0] + vc[2] * cx, vc[1] + vc[2] * cy, vc[2]])
        v /= np.linalg.norm(v)
        mask = _deviation(v[None], mids, dirs)[0] <= tol
        if mask.sum() < 2:
            break
    return v, mask


def select_orthogonal_triplet(
    candidates,
    segments,
    width: int,
    height: int,
    angle_tol_deg: float = 2.0,
    focal_range=(0.3, 5.0),
) -> VpTriplet:
    """Pick the best orthogonal triplet (and focal) from VP candidates.

    Every finite candidate pair proposes a focal via the orthogonality
    constraint; the pair plus the completed third direction is scored by
    total segment support, and the winner is re-orthogonalized.
    """
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    mids, dirs, _ = _segment_arrays(segments)
    tol = angle_tol_deg * DEG

    finite = []
    for c in candidates:
        if c.is_infinite():
            finite.append(None)
        else:
            p = c.point / c.point[2]
            finite.append(np.array([p[0] - cx, p[1] - cy]))

    best = None
    for a in range(len(candidates)):
        for b in range(a + 1, len(candidates)):
            ua, ub = finite[a], finite[b]
            if ua is None or ub is None:
                continue
            ff = -float(ua @ ub)
            if ff <= 0:
                continue
            f = math.sqrt(ff)
            if not focal_range[0] * width <= f <= focal_range[1] * width:
                continue
            v1 = geom.unit([ua[0], ua[1], f])
            v2 = geom.unit([ub[0], ub[1], f])
            v3 = np.cross(v1, v2)
            n3 = np.linalg.norm(v3)
            if n3 < 1e-6:
                continue
            v3 /= n3
            taken = np.zeros(len(segments), dtype=bool)
            taken[candidates[a].inliers] = True
            taken[candidates[b].inliers] = True
            third = _claim_direction(v3, f, cx, cy, mids, dirs, tol) & ~taken
            score = candidates[a].support + candidates[b].support + int(third.sum())
            key = (-score, a, b)
            if best is None or key < best[0]:
                best = (key, a, b, f, v1, v2, v3, int(third.sum()))
    if best is None:
        raise NoOrthogonalPair("no candidate pair admits a valid focal")
    _, a, b, f, v1, v2, v3, sup3 = best
    residual = max(abs(float(v1 @ v2)), abs(float(v2 @ v3)), abs(float(v1 @ v3)))
    v3 = geom.unit(np.cross(v1, v2))
    v2 = np.cross(v3, v1)  # right-handed, |v2| = 1 by construction
    directions = np.stack([v1, v2, v3], axis=1)
    return VpTriplet(
        directions=directions,
        supports=(candidates[a].support, candidates[b].support, sup3),
        focal=float(f),
        residual=float(residual),
    )


def _claim_direction(d, f, cx, cy, mids, dirs, tol):
    if abs(d[2]) > 1e-6:
        point = np.array([f * d[0] / d[2] + cx, f * d[1] / d[2] + cy, 1.0])
    else:
        point = np.array([d[0], d[1], 0.0])
    point /= np.linalg.norm(point)
    return _deviation(point[None], mids, dirs)[0] <= tol


def detect_vps(segments, width, height,
               angle_tol_deg=2.0, min_support=5, max_pairs=2000,
               max_candidates=6, focal_range=(0.3, 5.0), seed=0) -> VpTriplet:
    """Cluster candidates and select the orthogonal triplet in one call."""
    cands = cluster_vanishing_candidates(
        segments, angle_tol_deg, min_support, max_pairs, max_candidates, seed)
    return select_orthogonal_triplet(
        cands, segments, width, height, angle_tol_deg, focal_range)
