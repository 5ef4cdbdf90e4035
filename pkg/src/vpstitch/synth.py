"""Seeded synthetic scene generator for end-to-end validation.

Scenes are rotation-only camera rings at the origin viewing either an
axis-aligned wireframe world ("manhattan") or segments with uniformly
random 3D orientations ("random-lines"). The generator writes the same
file formats the ingest stage reads, plus ground truth, so every
pipeline stage can be exercised without real photographs.

In random-lines mode the line segments are transient: each view draws
its own independent random set, the way accidental texture edges (in
foliage, water, clutter) come and go between photographs instead of
persisting like architecture. Feature matches still come from one
shared 3D wireframe in both modes, so the stitch geometry is real
either way. With rotation-only cameras this distinction matters: any
line structure shared between views is automatically consistent under
the inter-image homographies, so persistent random lines would carry
the same cross-view direction signal as a real Manhattan scene.

Conventions: the world is right-handed with gravity along +z (so the
up direction is -z); a camera with zero pan/tilt/roll has x = world x,
y = world z (image y points down) and looks along world -y. The
world-to-camera rotation of camera i is

    R_i = Rz(roll_i) @ Rx(tilt_i) @ Ry(pan_i) @ R_BASE

so positive roll rotates projected content by R(roll) in pixel
coordinates.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geom
from .errors import InvalidSpec

DEG = math.pi / 180.0

R_BASE = np.array([
    [1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0],
    [0.0, -1.0, 0.0],
])


@dataclass
class SceneSpec:
    n_cameras: int = 4
    width: int = 640
    height: int = 480
    focal_px: float = 700.0
    overlap_fraction: float = 0.5
    pan_spacing_deg: float | None = None  # overrides overlap_fraction when set
    rolls_deg: list[float] | None = None
    roll_range_deg: float = 0.0
    tilt_range_deg: float = 0.0
    mode: str = "manhattan"  # "manhattan" | "random-lines"
    output: str = "analytic"  # "analytic" | "raster"
    seed: int = 0
    n_boxes: int = 30
    n_feature_points: int = 900
    match_noise_px: float = 0.0
    segment_noise_px: float = 0.0
    segment_angle_noise_deg: float = 0.0
    corrupt_fraction: float = 0.0
    corrupt_angle_deg: float = 20.0
    min_matches_per_edge: int = 16
    max_matches_per_edge: int = 150
    min_segment_px: float = 18.0

    def validate(self) -> None:
        if not 2 <= self.n_cameras <= 72:
            raise InvalidSpec("n_cameras must be in [2, 72]")
        if self.width < 32 or self.height < 32:
            raise InvalidSpec("image dimensions must be at least 32")
        if self.focal_px <= 0:
            raise InvalidSpec("focal_px must be positive")
        if not 0.0 < self.overlap_fraction < 1.0:
            raise InvalidSpec("overlap_fraction must be in (0, 1)")
        if self.mode not in ("manhattan", "random-lines"):
            raise InvalidSpec("mode must be 'manhattan' or 'random-lines'")
        if self.output not in ("analytic", "raster"):
            raise InvalidSpec("output must be 'analytic' or 'raster'")
        if self.rolls_deg is not None and len(self.rolls_deg) != self.n_cameras:
            raise InvalidSpec("rolls_deg must list one roll per camera")
        if not 0.0 <= self.corrupt_fraction <= 1.0:
            raise InvalidSpec("corrupt_fraction must be in [0, 1]")


@dataclass
class SceneTruth:
    rotations: list  # per-camera 3x3 world-to-camera, row-major nested lists
    focals: list
    rolls_deg: list
    pans_deg: list
    tilts_deg: list
    seed: int
    mode: str
    width: int = 0
    height: int = 0
    corrupted_ids: list = field(default_factory=list)

    def rotation(self, i: int) -> np.ndarray:
        return np.asarray(self.rotations[i], dtype=float)

    def interface_dict(self) -> dict:
        return {
            "rotations": self.rotations,
            "focals": self.focals,
            "rolls_deg": self.rolls_deg,
            "seed": self.seed,
            "mode": self.mode,
        }


def camera_rotation(pan: float, tilt: float, roll: float) -> np.ndarray:
    """World-to-camera rotation for pan/tilt/roll in radians."""
    return geom.rot_z(roll) @ geom.rot_x(tilt) @ geom.rot_y(pan) @ R_BASE


def truth_from_json(d: dict) -> SceneTruth:
    n = len(d["rotations"])
    return SceneTruth(
        rotations=d["rotations"],
        focals=d["focals"],
        rolls_deg=d["rolls_deg"],
        pans_deg=d.get("pans_deg", [0.0] * n),
        tilts_deg=d.get("tilts_deg", [0.0] * n),
        seed=d["seed"],
        mode=d["mode"],
    )


def _manhattan_segments(rng: np.random.Generator, n_boxes: int) -> np.ndarray:
    """3D wireframe edges of axis-aligned boxes around the origin, (k, 2, 3)."""
    segs = []
    for _ in range(n_boxes):
        az = rng.uniform(0.0, 2 * math.pi)
        el = rng.uniform(-25 * DEG, 25 * DEG)
        dist = rng.uniform(6.0, 14.0)
        center = dist * np.array([
            math.cos(el) * math.cos(az),
            math.cos(el) * math.sin(az),
            math.sin(el),
        ])
        half = rng.uniform(0.8, 3.0, size=3)
        lo, hi = center - half, center + half
        xs, ys, zs = (lo[0], hi[0]), (lo[1], hi[1]), (lo[2], hi[2])
        for y in ys:
            for z in zs:
                segs.append([[xs[0], y, z], [xs[1], y, z]])
        for x in xs:
            for z in zs:
                segs.append([[x, ys[0], z], [x, ys[1], z]])
        for x in xs:
            for y in ys:
                segs.append([[x, y, zs[0]], [x, y, zs[1]]])
    return np.array(segs)


def _random_segments(rng: np.random.Generator, count: int) -> np.ndarray:
    """3D segments with uniformly random orientations, (k, 2, 3)."""
    segs = []
    for _ in range(count):
        az = rng.uniform(0.0, 2 * math.pi)
        el = rng.uniform(-30 * DEG, 30 * DEG)
        dist = rng.uniform(6.0, 14.0)
        center = dist * np.array([
            math.cos(el) * math.cos(az),
            math.cos(el) * math.sin(az),
            math.sin(el),
        ])
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        half = rng.uniform(0.8, 2.5)
        segs.append([center - half * direction, center + half * direction])
    return np.array(segs)


def _clip_to_rect(p0, p1, xmin, ymin, xmax, ymax):
    """Liang-Barsky clip of a 2D segment against an axis-aligned rectangle."""
    d = p1 - p0
    t0, t1 = 0.0, 1.0
    for p, q in (
        (-d[0], p0[0] - xmin), (d[0], xmax - p0[0]),
        (-d[1], p0[1] - ymin), (d[1], ymax - p0[1]),
    ):
        if abs(p) < 1e-12:
            if q < 0:
                return None
            continue
        t = q / p
        if p < 0:
            if t > t1:
                return None
            t0 = max(t0, t)
        else:
            if t < t0:
                return None
            t1 = min(t1, t)
    if t0 >= t1:
        return None
    return p0 + t0 * d, p0 + t1 * d


def _project_segment(r, focal, cx, cy, a, b, w, h, min_len, near=0.25):
    ca, cb = r @ a, r @ b
    if ca[2] < near and cb[2] < near:
        return None
    if ca[2] < near or cb[2] < near:
        t = (near - ca[2]) / (cb[2] - ca[2])
        p = ca + t * (cb - ca)
        if ca[2] < near:
            ca = p
        else:
            cb = p
    pa = np.array([focal * ca[0] / ca[2] + cx, focal * ca[1] / ca[2] + cy])
    pb = np.array([focal * cb[0] / cb[2] + cx, focal * cb[1] / cb[2] + cy])
    clipped = _clip_to_rect(pa, pb, 1.0, 1.0, w - 2.0, h - 2.0)
    if clipped is None:
        return None
    qa, qb = clipped
    if np.hypot(*(qb - qa)) < min_len:
        return None
    return qa, qb


def _rotate_about(p, center, ang):
    return geom.rot2(ang) @ (p - center) + center


def generate_scene(spec: SceneSpec, out_dir) -> SceneTruth:
    """Generate a scene and write its project files under out_dir."""
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seq = np.random.SeedSequence(spec.seed)
    rng_world, rng_cam, rng_noise, rng_pts, rng_corrupt = (
        np.random.default_rng(s) for s in seq.spawn(5)
    )

    n = spec.n_cameras
    w, h, f = spec.width, spec.height, spec.focal_px
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    fov = 2.0 * math.atan(w / (2.0 * f))
    spacing = (
        spec.pan_spacing_deg * DEG
        if spec.pan_spacing_deg is not None
        else (1.0 - spec.overlap_fraction) * fov
    )
    pans = [(i - (n - 1) / 2.0) * spacing for i in range(n)]
    if spec.rolls_deg is not None:
        rolls = [r * DEG for r in spec.rolls_deg]
    else:
        rolls = [rng_cam.uniform(-spec.roll_range_deg, spec.roll_range_deg) * DEG
                 for _ in range(n)]
    tilts = [rng_cam.uniform(-spec.tilt_range_deg, spec.tilt_range_deg) * DEG
             for _ in range(n)]
    rotations = [camera_rotation(pans[i], tilts[i], rolls[i]) for i in range(n)]

    if spec.mode == "manhattan":
        segs3d = _manhattan_segments(rng_world, spec.n_boxes)
        view_segs = [segs3d] * n
    else:
        segs3d = _random_segments(rng_world, spec.n_boxes * 12)
        view_segs = [_random_segments(rng_world, spec.n_boxes * 12)
                     for _ in range(n)]

    corrupted: list[int] = []
    if spec.corrupt_fraction > 0:
        k = math.ceil(spec.corrupt_fraction * n)
        corrupted = sorted(rng_corrupt.choice(n, size=k, replace=False).tolist())

    center2d = np.array([cx, cy])
    segments_per_image: list[list[dict]] = []
    for i in range(n):
        rows = []
        for a, b in view_segs[i]:
            proj = _project_segment(rotations[i], f, cx, cy, a, b, w, h,
                                    spec.min_segment_px)
            if proj is None:
                continue
            qa, qb = proj
            if spec.segment_noise_px > 0:
                qa = qa + rng_noise.normal(0.0, spec.segment_noise_px, size=2)
                qb = qb + rng_noise.normal(0.0, spec.segment_noise_px, size=2)
            if spec.segment_angle_noise_deg > 0:
                ang = rng_noise.normal(0.0, spec.segment_angle_noise_deg * DEG)
                mid = (qa + qb) / 2.0
                qa = _rotate_about(qa, mid, ang)
                qb = _rotate_about(qb, mid, ang)
            if i in corrupted:
                sign = 1.0 if rng_corrupt.random() < 0.5 else -1.0
                ang = sign * spec.corrupt_angle_deg * DEG
                qa = _rotate_about(qa, center2d, ang)
                qb = _rotate_about(qb, center2d, ang)
            qa = np.clip(qa, 1.0, [w - 2.0, h - 2.0])
            qb = np.clip(qb, 1.0, [w - 2.0, h - 2.0])
            length = float(np.hypot(*(qb - qa)))
            if length < spec.min_segment_px:
                continue
            rows.append({
                "x0": float(qa[0]), "y0": float(qa[1]),
                "x1": float(qb[0]), "y1": float(qb[1]),
                "strength": length,
            })
        segments_per_image.append(rows)

    # feature points sampled along the wireframe, shared across views
    k = len(segs3d)
    pick = rng_pts.integers(0, k, size=spec.n_feature_points)
    ts = rng_pts.uniform(0.05, 0.95, size=spec.n_feature_points)
    pts3d = segs3d[pick, 0] + ts[:, None] * (segs3d[pick, 1] - segs3d[pick, 0])

    vis = []
    for i in range(n):
        cam = pts3d @ rotations[i].T
        ok = cam[:, 2] > 0.25
        px = np.full((len(pts3d), 2), np.nan)
        px[ok, 0] = f * cam[ok, 0] / cam[ok, 2] + cx
        px[ok, 1] = f * cam[ok, 1] / cam[ok, 2] + cy
        inside = (
            ok
            & (px[:, 0] >= 3) & (px[:, 0] <= w - 4)
            & (px[:, 1] >= 3) & (px[:, 1] <= h - 4)
        )
        vis.append((inside, px))

    matches: dict[tuple[int, int], np.ndarray] = {}
    for i in range(n):
        for j in range(i + 1, n):
            common = np.nonzero(vis[i][0] & vis[j][0])[0]
            if len(common) < max(8, spec.min_matches_per_edge):
                continue
            if len(common) > spec.max_matches_per_edge:
                common = common[np.sort(
                    rng_pts.choice(len(common), spec.max_matches_per_edge,
                                   replace=False))]
            pi = vis[i][1][common].copy()
            pj = vis[j][1][common].copy()
            if spec.match_noise_px > 0:
                pi += rng_noise.normal(0.0, spec.match_noise_px, pi.shape)
                pj += rng_noise.normal(0.0, spec.match_noise_px, pj.shape)
                pi = np.clip(pi, 0.0, [w - 1.0, h - 1.0])
                pj = np.clip(pj, 0.0, [w - 1.0, h - 1.0])
            matches[(i, j)] = np.hstack([pi, pj])

    truth = SceneTruth(
        rotations=[r.tolist() for r in rotations],
        focals=[float(f)] * n,
        rolls_deg=[r / DEG for r in rolls],
        pans_deg=[p / DEG for p in pans],
        tilts_deg=[t / DEG for t in tilts],
        seed=spec.seed,
        mode=spec.mode,
        width=w,
        height=h,
        corrupted_ids=corrupted,
    )

    _write_scene_files(out, spec, truth, segments_per_image, matches)
    return truth


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _write_scene_files(out, spec, truth, segments_per_image, matches):
    n = spec.n_cameras
    for i, rows in enumerate(segments_per_image):
        _write_json(out / f"segments_{i}.json", rows)
    for (i, j), arr in sorted(matches.items()):
        rows = [
            {"xi": float(r[0]), "yi": float(r[1]),
             "xj": float(r[2]), "yj": float(r[3])}
            for r in arr
        ]
        _write_json(out / f"matches_{i}_{j}.json", rows)
    _write_json(out / "truth.json", truth.interface_dict())

    images = []
    for i in range(n):
        entry = {"id": i, "width": spec.width, "height": spec.height}
        if spec.output == "raster":
            name = f"img_{i:03d}.png"
            _render_image(out / name, segments_per_image[i], spec.width, spec.height)
            entry["path"] = name
        images.append(entry)
    project = {
        "images": images,
        "mode": "auto",
        "seed": spec.seed,
        "truth": "truth.json",
    }
    _write_json(out / "project.json", project)


def render_segment_array(segments, w: int, h: int,
                         bg: int = 235, fg: int = 25) -> np.ndarray:
    """Render anti-aliased dark segments on a light background."""
    img = np.full((h, w), float(bg))
    for s in segments:
        p0 = np.array([s["x0"], s["y0"]])
        p1 = np.array([s["x1"], s["y1"]])
        lo = np.floor(np.minimum(p0, p1)).astype(int) - 2
        hi = np.ceil(np.maximum(p0, p1)).astype(int) + 3
        lo = np.maximum(lo, 0)
        hi = np.minimum(hi, [w, h])
        if np.any(hi <= lo):
            continue
        xs = np.arange(lo[0], hi[0])
        ys = np.arange(lo[1], hi[1])
        gx, gy = np.meshgrid(xs, ys)
        d = p1 - p0
        ll = float(d @ d)
        if ll < 1e-9:
            continue
        t = ((gx - p0[0]) * d[0] + (gy - p0[1]) * d[1]) / ll
        t = np.clip(t, 0.0, 1.0)
        dist = np.hypot(gx - (p0[0] + t * d[0]), gy - (p0[1] + t * d[1]))
        cover = np.clip(1.4 - dist, 0.0, 1.0)
        patch = img[lo[1]:hi[1], lo[0]:hi[0]]
        np.minimum(patch, bg + (fg - bg) * cover, out=patch)
    return np.round(img).astype(np.uint8)


def _render_image(path: Path, segments, w: int, h: int,
                  bg: int = 235, fg: int = 25) -> None:
    from PIL import Image

    arr = render_segment_array(segments, w, h, bg, fg)
    Image.fromarray(arr, mode="L").save(path)


def inject_alpha_noise(alphas: dict, fraction: float, magnitude_deg: float = 20.0,
                       seed: int = 0):
    """Perturb a seeded ceil(fraction * N) subset of roll estimates by
    +/- magnitude. Returns (corrupted copy, sorted corrupted ids)."""
    if not 0.0 <= fraction <= 1.0:
        raise InvalidSpec("fraction must be in [0, 1]")
    ids = sorted(alphas)
    out = dict(alphas)
    k = math.ceil(fraction * len(ids))
    if k == 0 or magnitude_deg == 0.0:
        chosen = [] if k == 0 else sorted(
            np.random.default_rng(seed).choice(len(ids), k, replace=False).tolist())
        return out, [ids[c] for c in chosen]
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(len(ids), size=k, replace=False).tolist())
    picked = [ids[c] for c in chosen]
    for pid in picked:
        sign = 1.0 if rng.random() < 0.5 else -1.0
        out[pid] = geom.wrap_angle(out[pid] + sign * magnitude_deg * DEG)
    return out, picked
