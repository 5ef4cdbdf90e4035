"""Mesh deformation and compositing.

Each image carries a regular vertex lattice. A sparse least-squares
energy ties matched points together across images (alignment), keeps
every lattice triangle similar to its undeformed shape (local term),
and pulls every lattice edge toward the per-image similarity transform
from the global prior (global term). The solved lattices drive an
inverse-bilinear texture warp with feather blending.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import BoundsError, EmptyCanvas, FormatError, NoAnchors
from .lsq import SparseLsqProblem, solve_lsq

_R90 = np.array([[0.0, -1.0], [1.0, 0.0]])


@dataclass
class GridMesh:
    """Regular vertex lattice over one image, plus its deformed copy."""
    image_id: int
    width: int
    height: int
    nx: int                    # cells horizontally
    ny: int                    # cells vertically
    vertices: np.ndarray       # ((ny+1)*(nx+1), 2) original positions
    deformed: np.ndarray | None = None
    overlap: np.ndarray | None = None   # (ny, nx) bool per quad

    @property
    def n_vertices(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def cell_size(self) -> tuple[float, float]:
        return ((self.width - 1) / self.nx, (self.height - 1) / self.ny)

    def vertex_index(self, r: int, c: int) -> int:
        return r * (self.nx + 1) + c

    def quad_corner_indices(self, r: int, c: int) -> list[int]:
        """Corner vertex indices in cycle order tl, tr, br, bl."""
        return [
            self.vertex_index(r, c),
            self.vertex_index(r, c + 1),
            self.vertex_index(r + 1, c + 1),
            self.vertex_index(r + 1, c),
        ]

    def locate(self, pts: np.ndarray):
        """Cells and local (u, v) coordinates for points in image space.

        Points outside the lattice are clamped to the border cells (the
        bilinear weights then extrapolate).
        """
        pts = np.asarray(pts, dtype=float)
        cw, ch = self.cell_size
        origin = self.vertices[0]
        fx = (pts[:, 0] - origin[0]) / cw
        fy = (pts[:, 1] - origin[1]) / ch
        cc = np.clip(np.floor(fx).astype(int), 0, self.nx - 1)
        rr = np.clip(np.floor(fy).astype(int), 0, self.ny - 1)
        return rr, cc, fx - cc, fy - rr

    def bilinear_anchors(self, pts: np.ndarray):
        """Vertex indices (m, 4) and weights (m, 4) expressing points as
        bilinear combinations of their quad corners (tl, tr, br, bl)."""
        rr, cc, u, v = self.locate(pts)
        idx = np.stack([
            rr * (self.nx + 1) + cc,
            rr * (self.nx + 1) + cc + 1,
            (rr + 1) * (self.nx + 1) + cc + 1,
            (rr + 1) * (self.nx + 1) + cc,
        ], axis=1)
        w = np.stack([
            (1 - u) * (1 - v),
            u * (1 - v),
            u * v,
            (1 - u) * v,
        ], axis=1)
        return idx, w


def make_grid_mesh(image_id: int, width: int, height: int,
                   nx: int = 20, ny: int = 20) -> GridMesh:
    if nx < 1 or ny < 1:
        raise FormatError("mesh grid needs at least one cell per axis")
    xs = np.linspace(0.0, width - 1.0, nx + 1)
    ys = np.linspace(0.0, height - 1.0, ny + 1)
    gx, gy = np.meshgrid(xs, ys)
    vertices = np.stack([gx.ravel(), gy.ravel()], axis=1)
    return GridMesh(image_id=image_id, width=width, height=height,
                    nx=nx, ny=ny, vertices=vertices)


@dataclass
class EnergyWeights:
    """Term weights; w_global=None derives 6 / (cell diagonal) per image."""
    w_align: float = 1.0
    w_local: float = 0.56
    w_global: float | None = None
    quad_mode: str = "uniform"   # or "distance-to-overlap"

    def __post_init__(self):
        if self.w_align <= 0 or self.w_local <= 0:
            raise FormatError("energy weights must be positive")
        if self.w_global is not None and self.w_global <= 0:
            raise FormatError("energy weights must be positive")
        if self.quad_mode not in ("uniform", "distance-to-overlap"):
            raise FormatError(f"unknown quad weighting mode {self.quad_mode!r}")


@dataclass
class MeshSystem:
    """Assembled deformation problem plus the unknown layout."""
    problem: SparseLsqProblem
    meshes: dict                     # id -> GridMesh
    offsets: dict                    # id -> first unknown index
    reference: int
    initial_energy: float = 0.0


def _quad_global_weights(mesh: GridMesh, mode: str) -> np.ndarray:
    """Per-quad multiplier for the global term."""
    shape = (mesh.ny, mesh.nx)
    if mode == "uniform" or mesh.overlap is None or not mesh.overlap.any() \
            or mesh.overlap.all():
        return np.ones(shape)
    # distance-to-overlap: quads far from any overlapping quad follow the
    # global similarity more strictly
    dist = np.full(shape, np.inf)
    dist[mesh.overlap] = 0.0
    frontier = list(zip(*np.nonzero(mesh.overlap)))
    step = 0
    while frontier:
        step += 1
        nxt = []
        for r, c in frontier:
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < shape[0] and 0 <= cc < shape[1] \
                        and dist[rr, cc] > step:
                    dist[rr, cc] = step
                    nxt.append((rr, cc))
        frontier = nxt
    peak = float(dist.max())
    return 1.0 + dist / max(peak, 1.0)


def _triangle_coefficients(p1, p2, p3):
    """(u, v) with p1 = p2 + u (p3 - p2) + v R90 (p3 - p2)."""
    d = p3 - p2
    basis = np.stack([d, _R90 @ d], axis=1)
    uv = np.linalg.solve(basis, p1 - p2)
    return float(uv[0]), float(uv[1])


_TRIANGLE_WINDOWS = [(0, 1, 2), (1, 2, 3), (2, 3, 0), (3, 0, 1)]


def assemble_energy(meshes: dict, graph, prior, weights: EnergyWeights | None
                    = None) -> MeshSystem:
    """Build the sparse deformation system over all mesh vertices.

    Alignment rows tie matched points (expressed bilinearly in their
    quads) across images; local rows keep each lattice triangle similar
    to its rest shape; global rows pull every lattice edge difference
    toward s_i R(theta_i) applied to the rest difference.
    """
    if weights is None:
        weights = EnergyWeights()
    ids = sorted(meshes)
    offsets = {}
    total = 0
    for i in ids:
        offsets[i] = total
        total += 2 * meshes[i].n_vertices
    problem = SparseLsqProblem(total)

    # alignment term
    for (a, b), edge in sorted(graph.edges.items()):
        if a not in meshes or b not in meshes:
            continue
        pts = edge.points
        if pts.shape[0] == 0:
            warnings.warn(f"edge ({a},{b}) has no match points to align",
                          NoAnchors)
            continue
        idx_a, w_a = meshes[a].bilinear_anchors(pts[:, 0:2])
        idx_b, w_b = meshes[b].bilinear_anchors(pts[:, 2:4])
        oa, ob = offsets[a], offsets[b]
        for m in range(pts.shape[0]):
            for off in (0, 1):  # x row then y row
                coeffs = [(oa + 2 * idx_a[m, k] + off, w_a[m, k])
                          for k in range(4)]
                coeffs += [(ob + 2 * idx_b[m, k] + off, -w_b[m, k])
                           for k in range(4)]
                problem.add_row(coeffs, 0.0, weight=weights.w_align)

    # local shape term
    for i in ids:
        mesh = meshes[i]
        off = offsets[i]
        verts = mesh.vertices
        for r in range(mesh.ny):
            for c in range(mesh.nx):
                corners = mesh.quad_corner_indices(r, c)
                for (t1, t2, t3) in _TRIANGLE_WINDOWS:
                    i1, i2, i3 = corners[t1], corners[t2], corners[t3]
                    u, v = _triangle_coefficients(
                        verts[i1], verts[i2], verts[i3])
                    # x row: x1 - x2 - u (x3 - x2) + v (y3 - y2) = 0
                    problem.add_row(
                        [(off + 2 * i1, 1.0), (off + 2 * i2, -1.0 + u),
                         (off + 2 * i3, -u), (off + 2 * i2 + 1, -v),
                         (off + 2 * i3 + 1, v)],
                        0.0, weight=weights.w_local)
                    # y row: y1 - y2 - u (y3 - y2) - v (x3 - x2) = 0
                    problem.add_row(
                        [(off + 2 * i1 + 1, 1.0), (off + 2 * i2 + 1, -1.0 + u),
                         (off + 2 * i3 + 1, -u), (off + 2 * i2, v),
                         (off + 2 * i3, -v)],
                        0.0, weight=weights.w_local)

    # global similarity term
    for i in ids:
        mesh = meshes[i]
        off = offsets[i]
        theta = prior.thetas.get(i, 0.0)
        scale = prior.scales.get(i, 1.0)
        cos_t, sin_t = math.cos(theta), math.sin(theta)
        if weights.w_global is None:
            cw, ch = mesh.cell_size
            w_g = 6.0 / math.hypot(cw, ch)
        else:
            w_g = weights.w_global
        quad_w = _quad_global_weights(mesh, weights.quad_mode)

        def edge_weight(r, c, horizontal):
            # mean of the adjacent quad weights
            if horizontal:
                quads = [(rr, c) for rr in (r - 1, r)
                         if 0 <= rr < mesh.ny and c < mesh.nx]
            else:
                quads = [(r, cc) for cc in (c - 1, c)
                         if 0 <= cc < mesh.nx and r < mesh.ny]
            if not quads:
                return 1.0
            return float(np.mean([quad_w[q] for q in quads]))

        verts = mesh.vertices
        for r in range(mesh.ny + 1):
            for c in range(mesh.nx + 1):
                va = mesh.vertex_index(r, c)
                for (dr, dc, horiz) in ((0, 1, True), (1, 0, False)):
                    if r + dr > mesh.ny or c + dc > mesh.nx:
                        continue
                    vb = mesh.vertex_index(r + dr, c + dc)
                    d = verts[va] - verts[vb]
                    tx = scale * (cos_t * d[0] - sin_t * d[1])
                    ty = scale * (sin_t * d[0] + cos_t * d[1])
                    w_edge = w_g * edge_weight(r, c, horiz)
                    problem.add_row(
                        [(off + 2 * va, 1.0), (off + 2 * vb, -1.0)],
                        tx, weight=w_edge)
                    problem.add_row(
                        [(off + 2 * va + 1, 1.0), (off + 2 * vb + 1, -1.0)],
                        ty, weight=w_edge)

    # translation gauge: the reference mesh keeps its centroid
    ref = graph.reference if graph.reference in meshes else ids[0]
    mesh = meshes[ref]
    n = mesh.n_vertices
    centroid = mesh.vertices.mean(axis=0)
    problem.add_constraint(
        [(offsets[ref] + 2 * k, 1.0 / n) for k in range(n)], centroid[0])
    problem.add_constraint(
        [(offsets[ref] + 2 * k + 1, 1.0 / n) for k in range(n)], centroid[1])

    system = MeshSystem(problem=problem, meshes=meshes, offsets=offsets,
                        reference=ref)
    x0 = np.concatenate([meshes[i].vertices.ravel() for i in ids])
    system.initial_energy = problem.energy(x0)
    return system


def _fold_count(mesh: GridMesh) -> int:
    """Quads whose deformed corner cycle loses its orientation."""
    count = 0
    verts = mesh.deformed
    for r in range(mesh.ny):
        for c in range(mesh.nx):
            corners = [verts[k] for k in mesh.quad_corner_indices(r, c)]
            folded = False
            for k in range(4):
                a = corners[(k + 1) % 4] - corners[k]
                b = corners[(k + 2) % 4] - corners[(k + 1) % 4]
                if a[0] * b[1] - a[1] * b[0] <= 0:
                    folded = True
                    break
            if folded:
                count += 1
    return count


def solve_deformation(system: MeshSystem):
    """Solve the assembled system; returns (meshes, fold_count, energy)."""
    x = solve_lsq(system.problem)
    ids = sorted(system.meshes)
    folds = 0
    for i in ids:
        mesh = system.meshes[i]
        off = system.offsets[i]
        mesh.deformed = x[off:off + 2 * mesh.n_vertices] \
            .reshape(-1, 2).copy()
        folds += _fold_count(mesh)
    energy = system.problem.energy(x)
    return system.meshes, folds, energy


def _deformed_triangles(mesh: GridMesh) -> np.ndarray:
    """(n_quads * 2, 3, 2) triangle decomposition of the deformed quads."""
    tris = []
    verts = mesh.deformed
    for r in range(mesh.ny):
        for c in range(mesh.nx):
            c0, c1, c2, c3 = mesh.quad_corner_indices(r, c)
            tris.append([verts[c0], verts[c1], verts[c2]])
            tris.append([verts[c0], verts[c2], verts[c3]])
    return np.asarray(tris)


def _points_in_triangles(tris: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Bool (m,): point covered by at least one triangle (inclusive)."""
    if len(tris) == 0 or len(pts) == 0:
        return np.zeros(len(pts), dtype=bool)
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]

    def cross_to(p, q, x):
        # cross(q - p, x - p) broadcast to (n_tris, m)
        d = q - p
        return (d[:, None, 0] * (x[None, :, 1] - p[:, None, 1])
                - d[:, None, 1] * (x[None, :, 0] - p[:, None, 0]))

    s1 = cross_to(a, b, pts)
    s2 = cross_to(b, c, pts)
    s3 = cross_to(c, a, pts)
    eps = 1e-9
    pos = (s1 >= -eps) & (s2 >= -eps) & (s3 >= -eps)
    neg = (s1 <= eps) & (s2 <= eps) & (s3 <= eps)
    return np.any(pos | neg, axis=0)


def compute_overlap_flags(meshes: dict) -> None:
    """Mark quads whose deformed centroid lies inside another image's
    deformed mesh."""
    ids = sorted(meshes)
    tris = {i: _deformed_triangles(meshes[i]) for i in ids}
    for i in ids:
        mesh = meshes[i]
        centroids = []
        for r in range(mesh.ny):
            for c in range(mesh.nx):
                corners = mesh.quad_corner_indices(r, c)
                centroids.append(mesh.deformed[corners].mean(axis=0))
        centroids = np.asarray(centroids)
        covered = np.zeros(len(centroids), dtype=bool)
        for j in ids:
            if j == i:
                continue
            covered |= _points_in_triangles(tris[j], centroids)
        mesh.overlap = covered.reshape(mesh.ny, mesh.nx)


@dataclass
class Composite:
    """Blended panorama raster plus the canvas geometry."""
    image: np.ndarray          # (H, W, 3) uint8
    origin: tuple              # (x0, y0) canvas offset in warp coordinates
    coverage: np.ndarray       # (H, W) bool
    vertex_maps: dict = field(default_factory=dict)  # id -> canvas vertices


def _invert_bilinear(quad: np.ndarray, pts: np.ndarray):
    """Local (u, v) in [0,1]^2 for points inside one deformed quad.

    quad: (4, 2) corners tl, tr, br, bl; returns (u, v, valid).
    """
    a = quad[0]
    b = quad[1] - quad[0]
    c = quad[3] - quad[0]
    d = quad[0] - quad[1] + quad[2] - quad[3]
    rel = pts - a

    def cross(p, q):
        return p[..., 0] * q[..., 1] - p[..., 1] * q[..., 0]

    # cross(rel - v c, b + v d) = 0 -> quadratic in v
    qa = cross(c, d)
    qb = cross(c, b) - cross(rel, d)
    qc = -cross(rel, b)
    tol = 1e-6
    u = np.full(len(pts), -1.0)
    v = np.full(len(pts), -1.0)
    if abs(qa) < 1e-12:
        qb_safe = np.where(np.abs(qb) < 1e-300, 1e-300, qb)
        v_lin = -qc / qb_safe
        roots = [np.where(np.abs(qb) < 1e-300, -1.0, v_lin)]
    else:
        disc = qb * qb - 4.0 * qa * qc
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        roots = [np.where(ok, (-qb + sq) / (2 * qa), -1.0),
                 np.where(ok, (-qb - sq) / (2 * qa), -1.0)]
    for root in roots:
        den_vec = b[None, :] + root[:, None] * d[None, :]
        den = np.sum(den_vec * den_vec, axis=1)
        den = np.where(den < 1e-300, 1e-300, den)
        u_try = np.sum((rel - root[:, None] * c[None, :]) * den_vec,
                       axis=1) / den
        good = ((root >= -tol) & (root <= 1 + tol)
                & (u_try >= -tol) & (u_try <= 1 + tol) & (v < -tol))
        u = np.where(good, u_try, u)
        v = np.where(good, root, v)
    valid = (v >= -tol) & (v <= 1 + tol) & (u >= -tol) & (u <= 1 + tol)
    return np.clip(u, 0.0, 1.0), np.clip(v, 0.0, 1.0), valid


def _image_channels(record) -> np.ndarray:
    """(h, w, 3) float32 view of an image record's pixels."""
    if getattr(record, "rgb", None) is not None:
        return record.rgb.astype(np.float32)
    gray = record.gray
    return np.repeat(gray.astype(np.float32)[:, :, None], 3, axis=2)


def _bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    h, w = img.shape[:2]
    x0 = np.clip(np.floor(xs).astype(int), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(ys).astype(int), 0, max(h - 2, 0))
    fx = (xs - x0)[:, None]
    fy = (ys - y0)[:, None]
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return ((1 - fx) * (1 - fy) * img[y0, x0]
            + fx * (1 - fy) * img[y0, x1]
            + fx * fy * img[y1, x1]
            + (1 - fx) * fy * img[y1, x0])


MAX_CANVAS_SIDE = 12000


def composite_panorama(images: dict, meshes: dict) -> Composite:
    """Warp every image through its deformed mesh and feather-blend.

    Pixels are claimed per quad by inverse bilinear lookup; each sample
    is weighted by 1 + its integer distance to the source image border,
    so seams fade toward image edges.
    """
    ids = sorted(meshes)
    all_pts = [meshes[i].deformed for i in ids
               if meshes[i].deformed is not None]
    if not all_pts:
        raise EmptyCanvas("no deformed meshes to composite")
    stacked = np.concatenate(all_pts, axis=0)
    if not np.all(np.isfinite(stacked)):
        raise EmptyCanvas("deformed meshes contain non-finite vertices")
    x_min = math.floor(stacked[:, 0].min())
    y_min = math.floor(stacked[:, 1].min())
    x_max = math.ceil(stacked[:, 0].max())
    y_max = math.ceil(stacked[:, 1].max())
    out_w = x_max - x_min + 1
    out_h = y_max - y_min + 1
    if out_w <= 0 or out_h <= 0:
        raise EmptyCanvas("degenerate canvas")
    if out_w > MAX_CANVAS_SIDE or out_h > MAX_CANVAS_SIDE:
        raise BoundsError(
            f"canvas {out_w}x{out_h} exceeds the {MAX_CANVAS_SIDE}px limit")

    acc = np.zeros((out_h, out_w, 3), dtype=np.float64)
    wsum = np.zeros((out_h, out_w), dtype=np.float64)

    vertex_maps = {}
    for i in ids:
        mesh = meshes[i]
        if mesh.deformed is None:
            continue
        vertex_maps[i] = mesh.deformed - np.array([x_min, y_min], float)
        record = images[i]
        src = _image_channels(record)
        h, w = src.shape[:2]
        claimed = np.zeros((out_h, out_w), dtype=bool)
        verts = mesh.deformed
        cw, ch = mesh.cell_size
        for r in range(mesh.ny):
            for c in range(mesh.nx):
                corners = mesh.quad_corner_indices(r, c)
                quad = verts[corners]
                qx0 = max(math.floor(quad[:, 0].min()), x_min)
                qy0 = max(math.floor(quad[:, 1].min()), y_min)
                qx1 = min(math.ceil(quad[:, 0].max()), x_max)
                qy1 = min(math.ceil(quad[:, 1].max()), y_max)
                if qx1 < qx0 or qy1 < qy0:
                    continue
                gx, gy = np.meshgrid(np.arange(qx0, qx1 + 1),
                                     np.arange(qy0, qy1 + 1))
                pts = np.stack([gx.ravel(), gy.ravel()], axis=1).astype(float)
                u, v, valid = _invert_bilinear(quad, pts)
                if not valid.any():
                    continue
                px = (pts[:, 0] - x_min).astype(int)
                py = (pts[:, 1] - y_min).astype(int)
                fresh = valid & ~claimed[py, px]
                if not fresh.any():
                    continue
                u, v = u[fresh], v[fresh]
                px, py = px[fresh], py[fresh]
                sx = mesh.vertices[0, 0] + (c + u) * cw
                sy = mesh.vertices[0, 1] + (r + v) * ch
                colors = _bilinear_sample(src, sx, sy)
                border = np.minimum(np.minimum(sx, (w - 1) - sx),
                                    np.minimum(sy, (h - 1) - sy))
                feather = np.floor(np.maximum(border, 0.0)) + 1.0
                acc[py, px] += feather[:, None] * colors
                wsum[py, px] += feather
                claimed[py, px] = True

    coverage = wsum > 0
    out = np.zeros((out_h, out_w, 3), dtype=np.float64)
    np.divide(acc, wsum[:, :, None], out=out, where=coverage[:, :, None])
    image = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return Composite(image=image, origin=(x_min, y_min), coverage=coverage,
                     vertex_maps=vertex_maps)


def mesh_to_dict(mesh: GridMesh) -> dict:
    """JSON-ready lattice description consumed by the metrics stage."""
    out = {
        "image_id": mesh.image_id,
        "width": mesh.width,
        "height": mesh.height,
        "nx": mesh.nx,
        "ny": mesh.ny,
        "vertices": [[float(x), float(y)] for x, y in mesh.vertices],
    }
    if mesh.deformed is not None:
        out["deformed"] = [[float(x), float(y)] for x, y in mesh.deformed]
    if mesh.overlap is not None:
        out["overlap"] = [[bool(v) for v in row] for row in mesh.overlap]
    return out


def mesh_from_dict(d: dict) -> GridMesh:
    mesh = GridMesh(
        image_id=int(d["image_id"]), width=int(d["width"]),
        height=int(d["height"]), nx=int(d["nx"]), ny=int(d["ny"]),
        vertices=np.asarray(d["vertices"], dtype=float))
    if "deformed" in d:
        mesh.deformed = np.asarray(d["deformed"], dtype=float)
    if "overlap" in d:
        mesh.overlap = np.asarray(d["overlap"], dtype=bool)
    return mesh
