"""Image loading, line segment detection, feature matching, file ingest.

The detector is a compact gradient-region grower in the LSD family:
pixels with strong gradients are grouped by gradient orientation
(mod pi, so both rims of a thin dark line merge), each region is fitted
with a principal-axis segment, and short or blobby regions are culled.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import geom
from .errors import BoundsError, FormatError, InsufficientMatches, TooFewSegments

DEG = math.pi / 180.0


@dataclass
class ImageRecord:
    id: int
    width: int
    height: int
    gray: np.ndarray | None = None  # uint8 (h, w)
    rgb: np.ndarray | None = None   # uint8 (h, w, 3)
    path: str | None = None

    def __post_init__(self):
        if self.width < 32 or self.height < 32:
            raise FormatError(f"image {self.id}: dimensions must be >= 32")

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    @property
    def center(self) -> np.ndarray:
        return np.array([(self.width - 1) / 2.0, (self.height - 1) / 2.0])


@dataclass
class LineSegment:
    x0: float
    y0: float
    x1: float
    y1: float
    strength: float

    @property
    def length(self) -> float:
        return math.hypot(self.x1 - self.x0, self.y1 - self.y0)

    @property
    def midpoint(self) -> np.ndarray:
        return np.array([(self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0])

    @property
    def direction(self) -> np.ndarray:
        d = np.array([self.x1 - self.x0, self.y1 - self.y0])
        return d / max(np.hypot(*d), 1e-12)


def segments_to_array(segments) -> np.ndarray:
    """Stack segments into a float array (k, 5) of x0, y0, x1, y1, strength."""
    if not segments:
        return np.zeros((0, 5))
    return np.array([[s.x0, s.y0, s.x1, s.y1, s.strength] for s in segments])


def load_image(path, image_id: int) -> ImageRecord:
    """Read an 8-bit PNG or PPM image from disk."""
    from PIL import Image

    try:
        with Image.open(path) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
            gray = np.asarray(im.convert("L"), dtype=np.uint8)
    except Exception as exc:
        raise FormatError(f"cannot read image {path}: {exc}") from exc
    h, w = gray.shape
    return ImageRecord(id=image_id, width=w, height=h, gray=gray, rgb=rgb,
                       path=str(path))


# --------------------------------------------------------- segment detection

def detect_line_segments(
    img: ImageRecord,
    angle_tol_deg: float = 22.5,
    min_length_frac: float = 0.02,
    grad_threshold: float = 6.0,
    min_region_px: int = 6,
    min_segments: int = 10,
) -> list[LineSegment]:
    """Detect line segments by orientation-coherent gradient region growing.

    Returns segments ordered by (min y, min x, length) for determinism.
    Raises TooFewSegments when fewer than min_segments survive.
    """
    if img.gray is None:
        raise FormatError(f"image {img.id} has no pixel data to detect on")
    g = img.gray.astype(np.float64)
    gx = ndimage.sobel(g, axis=1) / 8.0
    gy = ndimage.sobel(g, axis=0) / 8.0
    mag = np.hypot(gx, gy)
    # orientation of the gradient folded to [0, pi); both rims of a line agree
    ang2 = np.arctan2(gy, gx) * 2.0
    ca, sa = np.cos(ang2), np.sin(ang2)

    h, w = g.shape
    usable = mag > grad_threshold
    usable[0, :] = usable[-1, :] = False
    usable[:, 0] = usable[:, -1] = False

    order = np.argsort(
        (-mag * usable).ravel(), kind="stable"
    )[: int(usable.sum())]
    tol_cos = math.cos(2.0 * angle_tol_deg * DEG)
    visited = ~usable
    min_len = max(6.0, min_length_frac * img.diagonal)

    segments: list[LineSegment] = []
    neigh = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
    for flat in order:
        y0, x0 = divmod(int(flat), w)
        if visited[y0, x0]:
            continue
        stack = [(y0, x0)]
        visited[y0, x0] = True
        region = []
        sum_c, sum_s = 0.0, 0.0
        while stack:
            y, x = stack.pop()
            region.append((y, x))
            sum_c += ca[y, x]
            sum_s += sa[y, x]
            inv = 1.0 / math.hypot(sum_c, sum_s)
            mc, ms = sum_c * inv, sum_s * inv
            for dy, dx in neigh:
                ny, nx = y + dy, x + dx
                if visited[ny, nx]:
                    continue
                # doubled-angle dot against the running region orientation
                if ca[ny, nx] * mc + sa[ny, nx] * ms >= tol_cos:
                    visited[ny, nx] = True
                    stack.append((ny, nx))
        if len(region) < min_region_px:
            continue
        seg = _fit_segment(region, mag, w, h, min_len)
        if seg is not None:
            segments.append(seg)

    segments.sort(key=lambda s: (min(s.y0, s.y1), min(s.x0, s.x1), s.length))
    if len(segments) < min_segments:
        raise TooFewSegments(
            f"image {img.id}: found {len(segments)} segments, need {min_segments}"
        )
    return segments


def _fit_segment(region, mag, w, h, min_len):
    pts = np.array(region, dtype=float)[:, ::-1]  # (x, y)
    wts = np.array([mag[y, x] for y, x in region])
    total = wts.sum()
    c = (pts * wts[:, None]).sum(axis=0) / total
    d = pts - c
    cov = (d.T * wts) @ d / total
    evals, evecs = np.linalg.eigh(cov)
    axis = evecs[:, 1]  # largest eigenvalue
    proj = d @ axis
    lo, hi = float(proj.min()), float(proj.max())
    length = hi - lo
    width = 2.0 * math.sqrt(max(evals[0], 0.0))
    if length < min_len or length < 2.5 * max(width, 1.0):
        return None
    p0 = c + lo * axis
    p1 = c + hi * axis
    p0 = np.clip(p0, 1.0, [w - 2.0, h - 2.0])
    p1 = np.clip(p1, 1.0, [w - 2.0, h - 2.0])
    if p0[1] > p1[1] or (p0[1] == p1[1] and p0[0] > p1[0]):
        p0, p1 = p1, p0
    return LineSegment(float(p0[0]), float(p0[1]), float(p1[0]), float(p1[1]),
                       float(total / 255.0))


# ----------------------------------------------------------- feature matching

@dataclass
class MatchSet:
    i: int
    j: int
    points: np.ndarray  # (m, 4): xi, yi, xj, yj
    homography: np.ndarray | None = None
    inlier_ratio: float = 1.0

    def __len__(self):
        return len(self.points)

    @property
    def pts_i(self) -> np.ndarray:
        return self.points[:, 0:2]

    @property
    def pts_j(self) -> np.ndarray:
        return self.points[:, 2:4]


def _harris_corners(gray, max_corners=600, margin=13, nms_radius=5):
    g = gray.astype(np.float64)
    gx = ndimage.sobel(g, axis=1) / 8.0
    gy = ndimage.sobel(g, axis=0) / 8.0
    sxx = ndimage.gaussian_filter(gx * gx, 1.5)
    syy = ndimage.gaussian_filter(gy * gy, 1.5)
    sxy = ndimage.gaussian_filter(gx * gy, 1.5)
    resp = sxx * syy - sxy * sxy - 0.06 * (sxx + syy) ** 2
    resp[:margin, :] = resp[-margin:, :] = 0
    resp[:, :margin] = resp[:, -margin:] = 0
    peak = ndimage.maximum_filter(resp, size=2 * nms_radius + 1)
    ys, xs = np.nonzero((resp == peak) & (resp > 0.005 * resp.max()))
    if len(xs) == 0:
        return np.zeros((0, 2), dtype=int)
    order = np.argsort(-resp[ys, xs], kind="stable")[:max_corners]
    return np.stack([xs[order], ys[order]], axis=1)


def _descriptors(gray, corners, radius=6):
    g = gray.astype(np.float64)
    descs = np.empty((len(corners), (2 * radius + 1) ** 2))
    for k, (x, y) in enumerate(corners):
        patch = g[y - radius:y + radius + 1, x - radius:x + radius + 1].ravel()
        patch = patch - patch.mean()
        descs[k] = patch / (np.linalg.norm(patch) + 1e-9)
    return descs


def dlt_homography_npt(src, dst) -> np.ndarray:
    """Normalized DLT homography from n >= 4 correspondences."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)

    def normalizer(p):
        c = p.mean(axis=0)
        s = math.sqrt(2.0) / max(np.linalg.norm(p - c, axis=1).mean(), 1e-12)
        return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1]])

    ts, td = normalizer(src), normalizer(dst)
    ps = geom.apply_homography(ts, src)
    pd = geom.apply_homography(td, dst)
    a = np.zeros((2 * len(src), 9))
    for k in range(len(src)):
        x, y = ps[k]
        u, v = pd[k]
        a[2 * k] = [-x, -y, -1, 0, 0, 0, u * x, u * y, u]
        a[2 * k + 1] = [0, 0, 0, -x, -y, -1, v * x, v * y, v]
    _, _, vt = np.linalg.svd(a)
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(td) @ hn @ ts
    return geom.normalize_homography(h)


def ransac_homography(pts_a, pts_b, thresh_px=3.0, iters=1000, seed=0,
                      min_inliers=8):
    """RANSAC homography a -> b; returns (H, inlier mask)."""
    pts_a = np.asarray(pts_a, dtype=float)
    pts_b = np.asarray(pts_b, dtype=float)
    n = len(pts_a)
    if n < 4:
        raise InsufficientMatches(f"{n} correspondences, need at least 4")
    rng = np.random.default_rng(seed)
    best_mask = None
    best_count = 0
    for _ in range(iters):
        idx = rng.choice(n, size=4, replace=False)
        try:
            h = geom.dlt_homography_4pt(pts_a[idx], pts_b[idx])
        except Exception:
            continue
        proj = geom.apply_homography(h, pts_a)
        err = np.linalg.norm(proj - pts_b, axis=1)
        mask = err < thresh_px
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask = count, mask
    if best_mask is None or best_count < max(4, min_inliers):
        raise InsufficientMatches(
            f"RANSAC kept {best_count} inliers, need {min_inliers}")
    h = dlt_homography_npt(pts_a[best_mask], pts_b[best_mask])
    proj = geom.apply_homography(h, pts_a)
    err = np.linalg.norm(proj - pts_b, axis=1)
    mask = err < thresh_px
    if int(mask.sum()) < max(4, min_inliers):
        raise InsufficientMatches(
            f"refit kept {int(mask.sum())} inliers, need {min_inliers}")
    return h, mask


def match_features(
    a: ImageRecord,
    b: ImageRecord,
    ratio: float = 0.8,
    ransac_thresh_px: float = 3.0,
    ransac_iters: int = 1000,
    min_inliers: int = 8,
    seed: int = 0,
) -> MatchSet:
    """Harris + normalized patch matching with ratio test and RANSAC filter."""
    if a.gray is None or b.gray is None:
        raise FormatError("both images need pixel data for feature matching")
    ca = _harris_corners(a.gray)
    cb = _harris_corners(b.gray)
    if len(ca) < 8 or len(cb) < 8:
        raise InsufficientMatches(
            f"too few corners ({len(ca)}, {len(cb)}) in pair ({a.id}, {b.id})")
    da = _descriptors(a.gray, ca)
    db = _descriptors(b.gray, cb)
    # squared L2 via the dot-product expansion; descriptors are unit vectors
    sim = da @ db.T
    fwd = np.argsort(-sim, axis=1)
    pairs = []
    for k in range(len(ca)):
        one, two = fwd[k, 0], fwd[k, 1] if sim.shape[1] > 1 else fwd[k, 0]
        d1 = math.sqrt(max(0.0, 2.0 - 2.0 * sim[k, one]))
        d2 = math.sqrt(max(0.0, 2.0 - 2.0 * sim[k, two]))
        if d2 > 1e-12 and d1 / d2 > ratio:
            continue
        if np.argmax(sim[:, one]) != k:  # mutual check
            continue
        pairs.append((k, int(one)))
    if len(pairs) < 4:
        raise InsufficientMatches(
            f"{len(pairs)} tentative matches in pair ({a.id}, {b.id})")
    pa = ca[[p[0] for p in pairs]].astype(float)
    pb = cb[[p[1] for p in pairs]].astype(float)
    h, mask = ransac_homography(pa, pb, ransac_thresh_px, ransac_iters, seed,
                                min_inliers)
    pts = np.hstack([pa[mask], pb[mask]])
    return MatchSet(i=a.id, j=b.id, points=pts, homography=h,
                    inlier_ratio=float(mask.mean()))


# ------------------------------------------------------------ file ingestion

_SEG_RE = re.compile(r"^segments_(\d+)\.json$")
_MATCH_RE = re.compile(r"^matches_(\d+)_(\d+)\.json$")


@dataclass
class IngestResult:
    segments: dict = field(default_factory=dict)  # id -> list[LineSegment]
    matches: dict = field(default_factory=dict)   # (i, j) -> (m, 4) array
    warnings: list = field(default_factory=list)


def _require_number(entry, key, fname, idx):
    v = entry.get(key)
    if not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(v):
        raise FormatError(f"{fname}: entry {idx}: field '{key}' must be a finite number")
    return float(v)


def load_precomputed(project_dir, images: dict, min_pairs: int = 8) -> IngestResult:
    """Load segments_<id>.json / matches_<i>_<j>.json from a project directory.

    `images` maps image id -> ImageRecord (used for bounds validation).
    Edges with fewer than min_pairs correspondences are dropped with a
    recorded warning rather than an error.
    """
    root = Path(project_dir)
    result = IngestResult()
    for path in sorted(root.iterdir()):
        m = _SEG_RE.match(path.name)
        if not m:
            continue
        img_id = int(m.group(1))
        if img_id not in images:
            raise FormatError(f"{path.name}: unknown image id {img_id}")
        result.segments[img_id] = _load_segments(path, images[img_id])
    for path in sorted(root.iterdir()):
        m = _MATCH_RE.match(path.name)
        if not m:
            continue
        i, j = int(m.group(1)), int(m.group(2))
        if i not in images or j not in images:
            raise FormatError(f"{path.name}: unknown image pair ({i}, {j})")
        if i == j:
            raise FormatError(f"{path.name}: self matches are not allowed")
        arr = _load_matches(path, images[i], images[j])
        if len(arr) < min_pairs:
            result.warnings.append(
                f"{path.name}: only {len(arr)} pairs (< {min_pairs}), edge dropped")
            continue
        result.matches[(i, j)] = arr
    return result


def _load_segments(path: Path, img: ImageRecord) -> list[LineSegment]:
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path.name}: invalid JSON: {exc}") from exc
    if not isinstance(data, list):
        raise FormatError(f"{path.name}: expected a JSON array")
    out = []
    for idx, entry in enumerate(data):
        if not isinstance(entry, dict):
            raise FormatError(f"{path.name}: entry {idx} must be an object")
        vals = {k: _require_number(entry, k, path.name, idx)
                for k in ("x0", "y0", "x1", "y1", "strength")}
        for xk, yk in (("x0", "y0"), ("x1", "y1")):
            if not (0.0 <= vals[xk] <= img.width - 1 and 0.0 <= vals[yk] <= img.height - 1):
                raise BoundsError(
                    f"{path.name}: entry {idx}: endpoint ({vals[xk]}, {vals[yk]}) "
                    f"outside image {img.id} bounds {img.width}x{img.height}")
        if vals["strength"] < 0:
            raise FormatError(f"{path.name}: entry {idx}: negative strength")
        out.append(LineSegment(vals["x0"], vals["y0"], vals["x1"], vals["y1"],
                               vals["strength"]))
    return out


def _load_matches(path: Path, a: ImageRecord, b: ImageRecord) -> np.ndarray:
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path.name}: invalid JSON: {exc}") from exc
    if not isinstance(data, list):
        raise FormatError(f"{path.name}: expected a JSON array")
    rows = []
    for idx, entry in enumerate(data):
        if not isinstance(entry, dict):
            raise FormatError(f"{path.name}: entry {idx} must be an object")
        vals = {k: _require_number(entry, k, path.name, idx)
                for k in ("xi", "yi", "xj", "yj")}
        for img, xk, yk in ((a, "xi", "yi"), (b, "xj", "yj")):
            if not (0.0 <= vals[xk] <= img.width - 1 and 0.0 <= vals[yk] <= img.height - 1):
                raise BoundsError(
                    f"{path.name}: entry {idx}: point ({vals[xk]}, {vals[yk]}) "
                    f"outside image {img.id} bounds {img.width}x{img.height}")
        rows.append([vals["xi"], vals["yi"], vals["xj"], vals["yj"]])
    return np.array(rows) if rows else np.zeros((0, 4))
