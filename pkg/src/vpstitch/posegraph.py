"""Stitch graph construction and rotation-only bundle adjustment.

The stitch graph holds one node per image and one edge per accepted
match set. Each edge carries the pairwise homography; assuming a
rotation-only camera model, the homography decomposes as
H = K_j R_j R_i^T K_i^{-1}, which yields per-image focal estimates and
relative rotations. Global rotations come from spanning-tree chaining
followed by iterative chordal averaging with the reference fixed to
the identity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from . import geom
from .errors import (
    ConvergenceFailure,
    DisconnectedGraph,
    FocalEstimationFailed,
    FormatError,
)


@dataclass
class GraphEdge:
    i: int
    j: int
    points: np.ndarray        # (m, 4) rows [xi, yi, xj, yj]
    homography: np.ndarray    # maps raw pixels of i to raw pixels of j
    inlier_ratio: float
    focal_valid: bool = True  # False once focal estimation failed
    beta_rad: float | None = None

    @property
    def pts_i(self) -> np.ndarray:
        return self.points[:, 0:2]

    @property
    def pts_j(self) -> np.ndarray:
        return self.points[:, 2:4]


@dataclass
class StitchGraph:
    nodes: list[int]
    edges: dict[tuple, GraphEdge]
    reference: int
    dims: dict[int, tuple] = field(default_factory=dict)  # id -> (w, h)

    def neighbors(self, i: int) -> list[int]:
        out = []
        for a, b in self.edges:
            if a == i:
                out.append(b)
            elif b == i:
                out.append(a)
        return sorted(out)

    def edge_between(self, i: int, j: int) -> GraphEdge | None:
        return self.edges.get((i, j)) or self.edges.get((j, i))


@dataclass
class RotationEstimate:
    rotations: dict        # id -> 3x3 rotation, reference = identity
    focals: dict           # id -> pixels
    mean_reprojection_px: float
    reference: int

    def rotation(self, i: int) -> np.ndarray:
        return self.rotations[i]


def _flip_matchset(ms):
    pts = np.concatenate([ms.points[:, 2:4], ms.points[:, 0:2]], axis=1)
    h = np.linalg.inv(ms.homography)
    return ms.i, ms.j, pts, geom.normalize_homography(h)


def build_stitch_graph(dims, matches, reference=None, manual_edges=None,
                       min_matches=8, min_inlier_ratio=0.3) -> StitchGraph:
    """Assemble the stitch graph from match sets.

    dims: {image id: (width, height)}. matches: MatchSet-like objects
    with fields i, j, points, homography, inlier_ratio. With
    manual_edges given, exactly those pairs are used and each must meet
    the match floor; otherwise edges pass automatic verification
    (count and inlier-ratio thresholds).
    """
    nodes = sorted(dims)
    by_pair = {}
    for ms in matches:
        if ms.i not in dims or ms.j not in dims:
            raise FormatError(f"match set references unknown image {ms.i}-{ms.j}")
        key = (min(ms.i, ms.j), max(ms.i, ms.j))
        if ms.i > ms.j:
            _, _, pts, h = _flip_matchset(ms)
            by_pair[key] = GraphEdge(key[0], key[1], pts, h, ms.inlier_ratio)
        else:
            by_pair[key] = GraphEdge(ms.i, ms.j, ms.points.copy(),
                                     ms.homography.copy(), ms.inlier_ratio)

    edges: dict[tuple, GraphEdge] = {}
    if manual_edges is not None:
        for pair in manual_edges:
            i, j = int(pair[0]), int(pair[1])
            key = (min(i, j), max(i, j))
            edge = by_pair.get(key)
            if edge is None:
                raise FormatError(f"manual edge {i}-{j} has no matches")
            if len(edge.points) < min_matches:
                raise FormatError(
                    f"manual edge {i}-{j} has {len(edge.points)} matches; "
                    f"at least {min_matches} required")
            edges[key] = edge
    else:
        for key, edge in sorted(by_pair.items()):
            if len(edge.points) >= min_matches and \
                    edge.inlier_ratio >= min_inlier_ratio:
                edges[key] = edge

    _check_connected(nodes, edges)

    if reference is None:
        degree = {n: 0 for n in nodes}
        for a, b in edges:
            degree[a] += 1
            degree[b] += 1
        reference = min(nodes, key=lambda n: (-degree[n], n))
    elif reference not in dims:
        raise FormatError(f"reference image {reference} not in project")

    return StitchGraph(nodes=nodes, edges=edges, reference=reference,
                       dims={n: tuple(dims[n]) for n in nodes})


def _check_connected(nodes, edges):
    adj = {n: [] for n in nodes}
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    seen = set()
    components = []
    for start in nodes:
        if start in seen:
            continue
        comp = []
        stack = [start]
        seen.add(start)
        while stack:
            n = stack.pop()
            comp.append(n)
            for m in adj[n]:
                if m not in seen:
                    seen.add(m)
                    stack.append(m)
        components.append(sorted(comp))
    if len(components) > 1:
        raise DisconnectedGraph(components)


def _center_matrix(dims):
    w, h = dims
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    return np.array([[1.0, 0.0, cx], [0.0, 1.0, cy], [0.0, 0.0, 1.0]])


def focal_from_homography(h_centered) -> tuple:
    """Focal lengths (f_i, f_j) implied by a centered homography i -> j.

    Derived from H = s K_j R K_i^{-1} with R a rotation: orthogonality
    and equal norms of R's rows constrain f_i, of its columns f_j. Each
    gives two candidates; the better-conditioned positive one (larger
    denominator) wins. Raises FocalEstimationFailed when either side
    has no positive candidate (e.g. a pure in-plane rotation, which
    leaves the focal unobservable).
    """
    m = np.asarray(h_centered, dtype=float)
    a, b, c = m[0]
    d, e, f_ = m[1]
    g, hh, _ = m[2]

    fj2 = _pick_focal_sq(-(a * b + d * e), g * hh,
                         a * a + d * d - b * b - e * e, hh * hh - g * g)
    fi2 = _pick_focal_sq(-c * f_, a * d + b * e,
                         f_ * f_ - c * c, a * a + b * b - d * d - e * e)
    if fi2 is None or fj2 is None:
        raise FocalEstimationFailed("homography does not constrain the focal")
    return math.sqrt(fi2), math.sqrt(fj2)


def _pick_focal_sq(num1, den1, num2, den2):
    # Candidates are ratios of same-scale quantities, so this is
    # scale-free; a vanishing denominator (e.g. pure in-plane motion)
    # simply yields no candidate. When both are positive, the larger
    # denominator is the better-conditioned estimate.
    cands = []
    for num, den in ((num1, den1), (num2, den2)):
        if den != 0.0:
            v = num / den
            if math.isfinite(v) and v > 0:
                cands.append((abs(den), v))
    if not cands:
        return None
    return max(cands)[1]


def rotation_bundle_adjust(graph: StitchGraph, fallback_focal_factor=0.8,
                           tol=1e-8, max_iters=100) -> RotationEstimate:
    """Estimate per-image rotations and focals from the stitch graph."""
    nodes = graph.nodes
    ref = graph.reference

    centered = {}
    focal_votes = {n: [] for n in nodes}
    for key, edge in sorted(graph.edges.items()):
        ti = _center_matrix(graph.dims[edge.i])
        tj = _center_matrix(graph.dims[edge.j])
        hc = np.linalg.solve(tj, edge.homography @ ti)
        centered[key] = hc
        try:
            fi, fj = focal_from_homography(hc)
        except FocalEstimationFailed:
            edge.focal_valid = False
            continue
        focal_votes[edge.i].append(fi)
        focal_votes[edge.j].append(fj)

    focals = {}
    for n in nodes:
        if focal_votes[n]:
            focals[n] = float(np.median(focal_votes[n]))
        else:
            w, h = graph.dims[n]
            focals[n] = fallback_focal_factor * max(w, h)

    def kmat(n):
        return np.diag([focals[n], focals[n], 1.0])

    rel = {}
    for key, edge in sorted(graph.edges.items()):
        if not edge.focal_valid:
            continue
        m = np.linalg.solve(kmat(edge.j), centered[key] @ kmat(edge.i))
        if np.linalg.det(m) < 0:
            m = -m
        rel[key] = geom.project_to_rotation(m)  # R_j ~= rel @ R_i

    rotations = {n: np.eye(3) for n in nodes}
    adj = {n: [] for n in nodes}
    for (a, b), q in rel.items():
        adj[a].append((b, q, True))    # traversing a -> b applies q
        adj[b].append((a, q, False))   # traversing b -> a applies q^T
    seen = {ref}
    queue = [ref]
    while queue:
        n = queue.pop(0)
        for m, q, forward in sorted(adj[n], key=lambda t: t[0]):
            if m in seen:
                continue
            seen.add(m)
            rotations[m] = (q @ rotations[n]) if forward else (q.T @ rotations[n])
            queue.append(m)

    for _ in range(max_iters):
        worst = 0.0
        for n in nodes:
            if n == ref or not adj[n]:
                continue
            targets = []
            for m, q, forward in adj[n]:
                if forward:           # q maps n -> m, so R_n ~= q^T R_m
                    targets.append(q.T @ rotations[m])
                else:                 # q maps m -> n, so R_n ~= q R_m
                    targets.append(q @ rotations[m])
            updated = geom.procrustes_fit(targets)
            if not np.all(np.isfinite(updated)):
                raise ConvergenceFailure("rotation averaging produced non-finite values")
            worst = max(worst, geom.geodesic_angle(rotations[n], updated))
            rotations[n] = updated
        if worst < tol:
            break

    rotations, focals = _refine_reprojection(graph, rotations, focals, ref)
    err = _mean_reprojection(graph, centered, rotations, focals)
    return RotationEstimate(rotations=rotations, focals=focals,
                            mean_reprojection_px=err, reference=ref)


def _refine_reprojection(graph, rotations, focals, ref):
    """Joint least-squares refinement of rotations and focals on the
    pixel reprojection error of every accepted match (the reference
    rotation stays pinned to keep the gauge fixed)."""
    edges = [e for _, e in sorted(graph.edges.items()) if e.focal_valid]
    if not edges:
        return rotations, focals
    constrained = sorted({e.i for e in edges} | {e.j for e in edges})
    free_rot = [n for n in constrained if n != ref]
    idx_rot = {n: 3 * k for k, n in enumerate(free_rot)}
    base = 3 * len(free_rot)
    idx_f = {n: base + k for k, n in enumerate(constrained)}
    centers = {n: _center_matrix(graph.dims[n])[:2, 2] for n in constrained}

    def unpack(x):
        rot = dict(rotations)
        for n in free_rot:
            rot[n] = geom.so3_exp(x[idx_rot[n]:idx_rot[n] + 3]) @ rotations[n]
        foc = dict(focals)
        for n in constrained:
            foc[n] = math.exp(x[idx_f[n]])
        return rot, foc

    def residuals(x):
        rot, foc = unpack(x)
        parts = []
        for e in edges:
            i, j = e.i, e.j
            ki_inv = np.diag([1.0 / foc[i], 1.0 / foc[i], 1.0])
            kj = np.diag([foc[j], foc[j], 1.0])
            h = kj @ rot[j] @ rot[i].T @ ki_inv
            pi = e.pts_i - centers[i]
            pj = e.pts_j - centers[j]
            m = np.concatenate([pi, np.ones((len(pi), 1))], axis=1) @ h.T
            m = m[:, :2] / m[:, 2:3]
            parts.append((m - pj).ravel())
        return np.concatenate(parts)

    x0 = np.zeros(base + len(constrained))
    for n in constrained:
        x0[idx_f[n]] = math.log(focals[n])
    sol = least_squares(residuals, x0, method="lm",
                        xtol=1e-12, ftol=1e-12, gtol=1e-12, max_nfev=2000)
    if not np.all(np.isfinite(sol.x)):
        raise ConvergenceFailure("reprojection refinement produced non-finite values")
    rot, foc = unpack(sol.x)
    return rot, foc


def _mean_reprojection(graph, centered, rotations, focals):
    total = 0.0
    count = 0
    for key, edge in graph.edges.items():
        if not edge.focal_valid:
            continue
        i, j = edge.i, edge.j
        ci = _center_matrix(graph.dims[i])[:2, 2]
        cj = _center_matrix(graph.dims[j])[:2, 2]
        ki = np.diag([focals[i], focals[i], 1.0])
        kj = np.diag([focals[j], focals[j], 1.0])
        h = kj @ rotations[j] @ rotations[i].T @ np.linalg.inv(ki)
        pi = edge.pts_i - ci
        pj = edge.pts_j - cj
        ones = np.ones((len(pi), 1))
        mapped = np.concatenate([pi, ones], axis=1) @ h.T
        mapped = mapped[:, :2] / mapped[:, 2:3]
        total += float(np.linalg.norm(mapped - pj, axis=1).sum())
        count += len(pi)
    return total / count if count else 0.0


def relative_roll(r_i, r_j) -> float:
    """In-plane rotation angle of R_j relative to R_i (radians)."""
    return geom.closest_z_rotation(np.asarray(r_j) @ np.asarray(r_i).T)


def annotate_rolls(graph: StitchGraph, rotations: dict) -> dict:
    """Store beta = relative_roll on every edge; returns {(i, j): beta}."""
    out = {}
    for key, edge in graph.edges.items():
        beta = relative_roll(rotations[edge.i], rotations[edge.j])
        edge.beta_rad = beta
        out[key] = beta
    return out


def posegraph_dict(graph: StitchGraph, estimate: RotationEstimate) -> dict:
    """JSON-ready summary of the graph and rotation estimate."""
    return {
        "nodes": list(graph.nodes),
        "reference": graph.reference,
        "edges": [
            {
                "i": e.i,
                "j": e.j,
                "matches": int(len(e.points)),
                "inlier_ratio": float(e.inlier_ratio),
                "focal_valid": bool(e.focal_valid),
                "beta_deg": (None if e.beta_rad is None
                             else math.degrees(e.beta_rad)),
            }
            for _, e in sorted(graph.edges.items())
        ],
        "focals": {str(n): estimate.focals[n] for n in graph.nodes},
        "rotations": {str(n): estimate.rotations[n].reshape(-1).tolist()
                      for n in graph.nodes},
        "mean_reprojection_px": estimate.mean_reprojection_px,
    }
