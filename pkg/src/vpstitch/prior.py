"""Global similarity prior: per-image 2D rotation and scale.

The chain: project every image's vanishing point triplet into the
reference frame; fit one shared set of dominant scene directions by
hypothesis enumeration plus Gauss-Newton; read an initial roll angle
alpha per image off the camera-to-world rotation; reject images whose
VPs disagree with the dominant directions; weight the surviving alphas
by path voting over the stitch graph; then solve a small sparse system
for the final rotations theta and a constrained one for the scales.
A divergence statistic epsilon decides whether the scene supports this
at all; otherwise a smoothness-only fallback with a global straighten
step supplies theta.
"""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import geom
from .errors import (
    AllOutliers,
    AmbiguousAssignment,
    DegenerateHull,
    NoHypothesis,
    NonPositiveScale,
    TooFewPoints,
)
from .lsq import SparseLsqProblem, solve_lsq

DEG = math.pi / 180.0


@dataclass
class AlignedVps:
    """Per-image VP triplets rotated into the common reference frame."""
    triplets: dict            # id -> 3x3 matrix, columns unit
    absent: list              # ids with no usable VP triplet
    reference: int

    @property
    def present_ids(self) -> list:
        return sorted(self.triplets)


@dataclass
class DominantDirections:
    directions: np.ndarray    # 3x3 rotation, columns = dominant directions
    residuals: dict           # id -> squared Frobenius residual e_i
    total_residual: float
    assignments: dict         # id -> signed permutation E_i (aligned V E ~ D)


@dataclass
class PriorAnnotations:
    inliers: list             # sorted inlier ids (Psi)
    ratio: float              # rho = |Psi| / N
    weights: dict             # id -> psi for inliers
    alphas: dict              # id -> alpha radians for VP-bearing images


@dataclass
class SimilarityPrior:
    thetas: dict              # id -> theta radians
    scales: dict              # id -> scale
    mode: str                 # "manhattan" | "fallback"
    epsilon: float
    annotations: PriorAnnotations | None = None
    notes: list = field(default_factory=list)


def align_vps(triplets, rotations, reference) -> AlignedVps:
    """Rotate camera-frame VP triplets into the reference camera frame.

    triplets: {id: VpTriplet-like with .directions, or None when absent}.
    rotations: {id: world-from-? 3x3}; the projection is W R_i^T v with
    W the reference image's rotation, so identical scene directions land
    on identical vectors regardless of which camera saw them.
    """
    w = np.asarray(rotations[reference])
    aligned = {}
    absent = []
    for i in sorted(triplets):
        trip = triplets[i]
        if trip is None:
            absent.append(i)
            continue
        v = np.asarray(trip.directions, dtype=float)
        v = v / np.linalg.norm(v, axis=0, keepdims=True)
        aligned[i] = w @ np.asarray(rotations[i]).T @ v
    return AlignedVps(triplets=aligned, absent=absent, reference=reference)


def _skew(v):
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


_BASIS_SKEWS = [_skew(e) for e in np.eye(3)]


def _assign_columns(v, d):
    """Signed permutation E maximizing alignment of V's columns to D's.

    Solves argmax_E sum_k |d_k . (V E)_k| over the 6 permutations, with
    each matched column sign-flipped toward its target.
    """
    m = d.T @ v  # m[k, c] = d_k . v_c
    am = np.abs(m)
    best_perm = None
    best_score = -np.inf
    for perm in itertools.permutations(range(3)):
        score = am[0, perm[0]] + am[1, perm[1]] + am[2, perm[2]]
        if score > best_score:
            best_score = score
            best_perm = perm
    e = np.zeros((3, 3))
    for k in range(3):
        s = 1.0 if m[k, best_perm[k]] >= 0 else -1.0
        e[best_perm[k], k] = s
    return e


def _matched_residual(d, mats):
    """Total and per-image residuals under fresh column assignments."""
    per = {}
    assigns = {}
    for i, v in mats.items():
        e = _assign_columns(v, d)
        assigns[i] = e
        per[i] = float(np.sum((d - v @ e) ** 2))
    return sum(per.values()), per, assigns


def _gauss_newton_directions(d0, mats, tol=1e-10, max_iters=50):
    d = d0
    res, per, assigns = _matched_residual(d, mats)
    for _ in range(max_iters):
        jtj = np.zeros((3, 3))
        jtr = np.zeros(3)
        for i, v in mats.items():
            target = v @ assigns[i]
            for k in range(3):
                jk = -d @ _BASIS_SKEWS[k]
                rk = d[:, k] - target[:, k]
                jtj += jk.T @ jk
                jtr += jk.T @ rk
        try:
            step = np.linalg.solve(jtj, -jtr)
        except np.linalg.LinAlgError:
            break
        accepted = False
        for _ in range(30):
            d_new = d @ geom.so3_exp(step)
            res_new, per_new, assigns_new = _matched_residual(d_new, mats)
            if res_new <= res * (1.0 + 1e-14) + 1e-300:
                accepted = True
                break
            step = step / 2.0
        if not accepted:
            break
        d, res, per, assigns = d_new, res_new, per_new, assigns_new
        if np.linalg.norm(step) < tol:
            break
    return d, res, per, assigns


def estimate_dominant_directions(aligned: AlignedVps, supports=None,
                                 ortho_tol_deg=10.0, max_hypotheses=200,
                                 tol=1e-10, max_iters=50) -> DominantDirections:
    """Fit one rotation whose columns best explain all aligned VPs.

    Hypotheses are seeded from roughly-orthogonal pairs of aligned VPs
    (any two images), completed to a right-handed frame, ranked by the
    detection support of the contributing VPs, and each polished by
    Gauss-Newton with per-image column matching refreshed every step.
    supports: optional {id: (s1, s2, s3)} detector support counts.
    """
    mats = aligned.triplets
    if not mats:
        raise NoHypothesis("no image carries an aligned VP triplet")
    ids = aligned.present_ids
    sin_tol = math.sin(ortho_tol_deg * DEG)

    columns = []  # (image id, column index, vector, support)
    for i in ids:
        sup = supports.get(i, (0, 0, 0)) if supports else (0, 0, 0)
        for k in range(3):
            columns.append((i, k, mats[i][:, k], int(sup[k])))

    hypotheses = []
    for a in range(len(columns)):
        ia, ka, va, sa = columns[a]
        for b in range(a + 1, len(columns)):
            ib, kb, vb, sb = columns[b]
            if ia == ib and ka == kb:
                continue
            if abs(float(va @ vb)) >= sin_tol:
                continue
            hypotheses.append((-(sa + sb), ia, ka, ib, kb, va, vb))
    if not hypotheses:
        raise NoHypothesis("no roughly-orthogonal pair of aligned VPs")
    hypotheses.sort(key=lambda h: h[:5])
    hypotheses = hypotheses[:max_hypotheses]

    best = None
    for _, _, _, _, _, va, vb in hypotheses:
        d3 = np.cross(va, vb)
        norm = np.linalg.norm(d3)
        if norm < 1e-12:
            continue
        d3 = d3 / norm
        d2 = np.cross(d3, va)
        d0 = np.stack([va, d2, d3], axis=1)
        d, res, per, assigns = _gauss_newton_directions(
            d0, mats, tol=tol, max_iters=max_iters)
        if best is None or res < best[1]:
            best = (d, res, per, assigns)
    if best is None:
        raise NoHypothesis("all hypothesis pairs were degenerate")
    d, res, per, assigns = best
    return DominantDirections(directions=d, residuals=per,
                              total_residual=res, assignments=assigns)


def _signed_permutations():
    """The 24 proper (det = +1) signed permutation matrices, in canonical
    order: permutations lexicographic, then sign patterns lexicographic
    with +1 before -1."""
    out = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1.0, -1.0), repeat=3):
            m = np.zeros((3, 3))
            for k in range(3):
                m[perm[k], k] = signs[k]
            if np.linalg.det(m) > 0:
                out.append(m)
    return out


_PROPER_SIGNED_PERMS = _signed_permutations()


def camera_to_world(dominant: DominantDirections, triplets):
    """Initial roll alpha per image from the world-aligned camera frame.

    The dominant directions are snapped to the nearest world axes by the
    best proper signed permutation M; each image's original camera-frame
    triplet, rearranged by its matching assignment, then gives
    R_i^w = M (V_i E_i)^{-1} and alpha_i as its in-plane component.
    Returns ({id: alpha radians}, M).
    """
    d = dominant.directions
    scores = [float(np.sum(d * m)) for m in _PROPER_SIGNED_PERMS]
    top = max(scores)
    tied = [k for k, s in enumerate(scores) if top - s < 1e-9]
    if len(tied) > 1:
        warnings.warn(
            "dominant-direction axis assignment is ambiguous; keeping the "
            "first candidate in canonical order",
            AmbiguousAssignment)
    m = _PROPER_SIGNED_PERMS[tied[0]]

    alphas = {}
    for i, e in sorted(dominant.assignments.items()):
        v = np.asarray(triplets[i].directions, dtype=float)
        v = v / np.linalg.norm(v, axis=0, keepdims=True)
        r = geom.project_to_rotation(m @ np.linalg.inv(v @ e))
        alphas[i] = geom.closest_z_rotation(r)
    return alphas, m


def reject_outliers(dominant: DominantDirections, n_images: int,
                    tau: float = 0.15):
    """Inlier set Psi = {i : e_i <= tau} and inlier ratio rho."""
    inliers = sorted(i for i, e in dominant.residuals.items() if e <= tau)
    if not inliers:
        raise AllOutliers(
            f"no image has VP residual <= {tau}; smallest is "
            f"{min(dominant.residuals.values()):.4f}")
    return inliers, len(inliers) / n_images


def sigmoid_kernel(x: float, k: float = 10.0) -> float:
    return 1.0 / (1.0 + math.exp(-k * (x - 0.5)))


def path_vote(graph, inliers, alphas, betas, f_max: int = 3,
              delta_support_deg: float = 5.0, sigmoid_k: float = 10.0) -> dict:
    """Confidence weight psi per inlier from path voting.

    Every simple path of length <= f_max through inlier nodes predicts
    the start image's alpha from the end image's alpha plus the summed
    relative rolls along the path. Supporting paths (prediction within
    delta) score their length; opposing paths score f_max + 1 - length;
    the support ratio goes through the sigmoid kernel.
    """
    inset = set(inliers)
    adj = {n: [] for n in inset}
    for a, b in graph.edges:
        if a in inset and b in inset:
            adj[a].append(b)
            adj[b].append(a)
    for n in adj:
        adj[n].sort()
    directed = {}
    for (a, b), v in betas.items():
        directed[(a, b)] = v
        directed[(b, a)] = -v
    delta = delta_support_deg * DEG

    weights = {}
    for i in sorted(inset):
        s_sum = 0.0
        o_sum = 0.0

        def walk(node, visited, beta_sum, length):
            nonlocal s_sum, o_sum
            if length > 0:
                predicted = alphas[node] + beta_sum
                if abs(geom.wrap_angle(predicted - alphas[i])) <= delta:
                    s_sum += length
                else:
                    o_sum += f_max + 1 - length
            if length == f_max:
                return
            for nxt in adj[node]:
                if nxt in visited:
                    continue
                walk(nxt, visited | {nxt}, beta_sum + directed[(node, nxt)],
                     length + 1)

        walk(i, {i}, 0.0, 0)
        total = s_sum + o_sum
        ratio = s_sum / total if total > 0 else 0.5
        weights[i] = sigmoid_kernel(ratio, sigmoid_k)
    return weights


def solve_rotations(graph, alphas, betas, inliers, weights,
                    lambda_smooth: float = 10.0) -> dict:
    """Final per-image rotation theta from weighted data + smoothness.

    Unknowns are unit-intent 2D vectors (u_i, v_i). Inlier data rows pull
    (u_i, v_i) toward (cos alpha_i, sin alpha_i) with weight psi_i; every
    graph edge adds lambda-weighted smoothness tying the pair together
    through the relative roll beta. Solved unconstrained, then each
    vector is normalized to an angle.
    """
    nodes = graph.nodes
    index = {n: 2 * k for k, n in enumerate(nodes)}
    problem = SparseLsqProblem(2 * len(nodes))
    for i in inliers:
        iu = index[i]
        problem.add_row([(iu, 1.0)], math.cos(alphas[i]), weight=weights[i])
        problem.add_row([(iu + 1, 1.0)], math.sin(alphas[i]), weight=weights[i])
    for (a, b), beta in sorted(betas.items()):
        au, bu = index[a], index[b]
        c, s = math.cos(beta), math.sin(beta)
        # residual R(beta) [u_b, v_b] - [u_a, v_a]
        problem.add_row([(bu, c), (bu + 1, -s), (au, -1.0)], 0.0,
                        weight=lambda_smooth)
        problem.add_row([(bu, s), (bu + 1, c), (au + 1, -1.0)], 0.0,
                        weight=lambda_smooth)
    x = solve_lsq(problem)
    return {n: math.atan2(x[index[n] + 1], x[index[n]]) for n in nodes}


def estimate_scales(graph) -> dict:
    """Per-image scale from pairwise convex-hull perimeter ratios.

    Each edge contributes eta = perimeter(matches in i) / perimeter(in j)
    and a residual eta * s_j - s_i; the sum of scales is constrained to
    the image count. Degenerate hulls drop the edge; with no usable
    edges at all, every scale is 1.
    """
    nodes = graph.nodes
    index = {n: k for k, n in enumerate(nodes)}
    problem = SparseLsqProblem(len(nodes))
    n_rows = 0
    for (a, b), edge in sorted(graph.edges.items()):
        try:
            pa = geom.hull_perimeter(edge.pts_i)
            pb = geom.hull_perimeter(edge.pts_j)
        except (DegenerateHull, TooFewPoints):
            continue
        if pa <= 1e-12 or pb <= 1e-12:
            continue
        eta = pa / pb
        problem.add_row([(index[b], eta), (index[a], -1.0)], 0.0)
        n_rows += 1
    if n_rows == 0:
        return {n: 1.0 for n in nodes}
    problem.add_constraint([(index[n], 1.0) for n in nodes], float(len(nodes)))
    x = solve_lsq(problem)
    scales = {n: float(x[index[n]]) for n in nodes}
    if any(s <= 0 for s in scales.values()):
        bad = sorted(n for n, s in scales.items() if s <= 0)
        warnings.warn(f"non-positive scales for images {bad}; flooring at 0.1",
                      NonPositiveScale)
        scales = {n: max(s, 0.1) for n, s in scales.items()}
    return scales


def vp_divergence(dominant: DominantDirections, inliers, n_images: int,
                  epsilon0: float = 0.10):
    """Divergence epsilon and the Manhattan-vs-fallback decision.

    epsilon is the mean per-VP squared deviation from the dominant
    directions over inlier images, amplified by 1/rho so sparse inlier
    sets look less trustworthy. With no inliers a finite sentinel
    (n_images times the all-image mean) keeps reports meaningful.
    """
    if inliers:
        rho = len(inliers) / n_images
        per_vp = [dominant.residuals[i] / 3.0 for i in inliers]
        epsilon = float(np.mean(per_vp) / rho)
    else:
        per_vp = [e / 3.0 for e in dominant.residuals.values()]
        epsilon = float(n_images * np.mean(per_vp)) if per_vp else math.inf
    return epsilon, epsilon <= epsilon0


def _chained_centers(graph):
    """Image centers mapped into the reference frame by chaining the
    pairwise homographies along a spanning tree."""
    ref = graph.reference
    to_ref = {ref: np.eye(3)}
    queue = [ref]
    adj = {n: [] for n in graph.nodes}
    for (a, b), edge in graph.edges.items():
        adj[a].append(b)
        adj[b].append(a)
    while queue:
        p = queue.pop(0)
        for c in sorted(adj[p]):
            if c in to_ref:
                continue
            edge = graph.edge_between(c, p)
            if edge.i == c:
                g = edge.homography          # maps c -> p
            else:
                g = np.linalg.inv(edge.homography)
            to_ref[c] = to_ref[p] @ g
            queue.append(c)
    centers = {}
    for n, m in to_ref.items():
        w, h = graph.dims[n]
        p = m @ np.array([(w - 1) / 2.0, (h - 1) / 2.0, 1.0])
        if abs(p[2]) < 1e-9:
            continue
        centers[n] = p[:2] / p[2]
    return centers


def fallback_rotations(graph, betas, reference=None) -> dict:
    """Rotations without VP data: smoothness plus a straighten step.

    The smoothness-only system is anchored by pinning the reference
    image's rotation to zero; afterwards the angle of the principal
    direction of the chained image centers (wrapped to a quarter turn)
    is subtracted from every theta so the panorama comes out level.
    """
    ref = graph.reference if reference is None else reference
    nodes = graph.nodes
    index = {n: 2 * k for k, n in enumerate(nodes)}
    problem = SparseLsqProblem(2 * len(nodes))
    for (a, b), beta in sorted(betas.items()):
        au, bu = index[a], index[b]
        c, s = math.cos(beta), math.sin(beta)
        problem.add_row([(bu, c), (bu + 1, -s), (au, -1.0)], 0.0)
        problem.add_row([(bu, s), (bu + 1, c), (au + 1, -1.0)], 0.0)
    problem.add_constraint([(index[ref], 1.0)], 1.0)
    problem.add_constraint([(index[ref] + 1, 1.0)], 0.0)
    x = solve_lsq(problem)
    thetas = {n: math.atan2(x[index[n] + 1], x[index[n]]) for n in nodes}

    phi = 0.0
    centers = _chained_centers(graph)
    if len(centers) >= 2:
        pts = np.array([centers[n] for n in sorted(centers)])
        pts = pts - pts.mean(axis=0)
        if float(np.abs(pts).max()) > 1e-9:
            _, _, vt = np.linalg.svd(pts)
            phi = math.atan2(vt[0, 1], vt[0, 0])
            if phi <= -math.pi / 2:
                phi += math.pi
            elif phi > math.pi / 2:
                phi -= math.pi
    return {n: geom.wrap_angle(t - phi) for n, t in thetas.items()}
