"""Project configuration: one JSON file with full defaulting.

A project bundles the input images (or an inline synthetic-scene spec),
the orchestration choices (mode, reference image, seed, output
directory), and every tunable algorithm parameter. Unknown keys are
rejected so that typos fail loudly instead of silently using a default.
"""
from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import FormatError
from .synth import SceneSpec

MODES = ("auto", "manhattan", "fallback")
_MODE_ALIASES = {"force-manhattan": "manhattan", "force-fallback": "fallback"}

# Algorithm parameters and their documented defaults, grouped by stage.
PARAM_DEFAULTS: dict = {
    # line segments / feature matching
    "segment_angle_tol_deg": 22.5,
    "segment_min_length_frac": 0.02,
    "match_ratio": 0.8,
    "ransac_thresh_px": 3.0,
    "ransac_iters": 1000,
    "min_edge_matches": 8,
    "min_inlier_ratio": 0.3,
    # vanishing-point detection
    "vp_angle_tol_deg": 2.0,
    "vp_min_support": 5,
    "vp_max_pairs": 2000,
    "vp_max_candidates": 6,
    "focal_min": 0.3,
    "focal_max": 5.0,
    # similarity prior
    "lambda_smooth": 10.0,
    "tau": 0.15,
    "f_max": 3,
    "sigmoid_k": 10.0,
    "delta_support_deg": 5.0,
    "epsilon0": 0.10,
    "robust": True,
    "corrupt_alpha_fraction": 0.0,
    "corrupt_alpha_deg": 20.0,
    # mesh deformation
    "grid_nx": 20,
    "grid_ny": 20,
    "w_align": 1.0,
    "w_local": 0.56,
    "w_global": None,
    "quad_weight_mode": "uniform",
}

_TOP_LEVEL_KEYS = {
    "images", "synth", "mode", "reference", "seed", "out", "truth",
    "edges", "params",
}

_SYNTH_KEYS = {f.name for f in dataclasses.fields(SceneSpec)}


@dataclass
class ProjectConfig:
    """Fully-resolved project: inputs, orchestration, and parameters."""

    images: list = field(default_factory=list)  # dicts: id, width, height, path?
    synth: dict | None = None
    mode: str = "auto"
    reference: int | None = None
    seed: int = 0
    out_dir: str = "out"
    truth: str | None = None       # path to a ground-truth file, if any
    edges: list | None = None      # manual stitch-graph edges [(i, j), ...]
    base_dir: Path = field(default_factory=Path)
    params: dict = field(default_factory=lambda: dict(PARAM_DEFAULTS))

    def __getattr__(self, name):
        params = object.__getattribute__(self, "params")
        if name in params:
            return params[name]
        raise AttributeError(name)

    @property
    def image_ids(self) -> list:
        return sorted(entry["id"] for entry in self.images)

    def resolve(self, rel) -> Path:
        """A path from the project file, resolved against its directory."""
        p = Path(rel)
        return p if p.is_absolute() else self.base_dir / p

    def to_dict(self) -> dict:
        return {
            "images": copy.deepcopy(self.images),
            "synth": copy.deepcopy(self.synth),
            "mode": self.mode,
            "reference": self.reference,
            "seed": self.seed,
            "out": self.out_dir,
            "truth": self.truth,
            "edges": copy.deepcopy(self.edges),
            "params": dict(self.params),
        }


def _require_type(value, types, what):
    if isinstance(value, bool) and bool not in (
            types if isinstance(types, tuple) else (types,)):
        raise FormatError(f"{what} must not be a boolean")
    if not isinstance(value, types):
        raise FormatError(f"{what} has wrong type {type(value).__name__}")
    return value


def _validate_params(params: dict) -> dict:
    out = dict(PARAM_DEFAULTS)
    for key, value in params.items():
        if key not in PARAM_DEFAULTS:
            raise FormatError(f"unknown parameter '{key}'")
        default = PARAM_DEFAULTS[key]
        if key == "w_global":
            if value is not None:
                value = float(_require_type(value, (int, float), key))
        elif isinstance(default, bool):
            value = _require_type(value, bool, key)
        elif isinstance(default, int):
            value = int(_require_type(value, int, key))
        elif isinstance(default, float):
            value = float(_require_type(value, (int, float), key))
        elif isinstance(default, str):
            value = _require_type(value, str, key)
        out[key] = value

    positive = ("segment_angle_tol_deg", "segment_min_length_frac",
                "match_ratio", "ransac_thresh_px", "vp_angle_tol_deg",
                "tau", "sigmoid_k", "delta_support_deg", "epsilon0",
                "w_align", "w_local", "focal_min", "focal_max",
                "corrupt_alpha_deg")
    for key in positive:
        if out[key] <= 0:
            raise FormatError(f"parameter '{key}' must be positive")
    for key in ("vp_min_support", "ransac_iters", "min_edge_matches",
                "vp_max_pairs", "vp_max_candidates", "f_max",
                "grid_nx", "grid_ny"):
        if out[key] < 1:
            raise FormatError(f"parameter '{key}' must be at least 1")
    if out["lambda_smooth"] < 0:
        raise FormatError("parameter 'lambda_smooth' must be non-negative")
    if not 0.0 <= out["min_inlier_ratio"] <= 1.0:
        raise FormatError("parameter 'min_inlier_ratio' must be in [0, 1]")
    if not 0.0 <= out["corrupt_alpha_fraction"] <= 1.0:
        raise FormatError("parameter 'corrupt_alpha_fraction' must be in [0, 1]")
    if out["w_global"] is not None and out["w_global"] <= 0:
        raise FormatError("parameter 'w_global' must be positive when given")
    if out["quad_weight_mode"] not in ("uniform", "distance-to-overlap"):
        raise FormatError("parameter 'quad_weight_mode' must be 'uniform' "
                          "or 'distance-to-overlap'")
    if out["focal_min"] >= out["focal_max"]:
        raise FormatError("parameter 'focal_min' must be below 'focal_max'")
    return out


def _validate_images(entries) -> list:
    _require_type(entries, list, "'images'")
    seen = set()
    images = []
    for idx, entry in enumerate(entries):
        _require_type(entry, dict, f"images[{idx}]")
        extra = set(entry) - {"id", "width", "height", "path"}
        if extra:
            raise FormatError(
                f"images[{idx}] has unknown keys {sorted(extra)}")
        if "id" not in entry:
            raise FormatError(f"images[{idx}] is missing 'id'")
        img_id = _require_type(entry["id"], int, f"images[{idx}].id")
        if img_id < 0:
            raise FormatError(f"images[{idx}].id must be non-negative")
        if img_id in seen:
            raise FormatError(f"duplicate image id {img_id}")
        seen.add(img_id)
        clean = {"id": img_id}
        if "path" in entry:
            clean["path"] = _require_type(entry["path"], str,
                                          f"images[{idx}].path")
        for key in ("width", "height"):
            if key in entry:
                v = _require_type(entry[key], int, f"images[{idx}].{key}")
                if v < 32:
                    raise FormatError(
                        f"images[{idx}].{key} must be at least 32")
                clean[key] = v
        if "path" not in clean and ("width" not in clean
                                    or "height" not in clean):
            raise FormatError(
                f"images[{idx}] needs a path or explicit width and height")
        images.append(clean)
    return images


def _validate_synth(entry) -> dict:
    _require_type(entry, dict, "'synth'")
    extra = set(entry) - _SYNTH_KEYS
    if extra:
        raise FormatError(f"synth spec has unknown keys {sorted(extra)}")
    return copy.deepcopy(entry)


def _validate_edges(entries) -> list:
    _require_type(entries, list, "'edges'")
    edges = []
    for idx, pair in enumerate(entries):
        _require_type(pair, (list, tuple), f"edges[{idx}]")
        if len(pair) != 2:
            raise FormatError(f"edges[{idx}] must name exactly two images")
        i = _require_type(pair[0], int, f"edges[{idx}][0]")
        j = _require_type(pair[1], int, f"edges[{idx}][1]")
        if i == j:
            raise FormatError(f"edges[{idx}] links image {i} to itself")
        edges.append((i, j))
    return edges


def config_from_dict(data: dict, base_dir=".") -> ProjectConfig:
    """Build a validated ProjectConfig from parsed JSON."""
    _require_type(data, dict, "project")
    unknown = set(data) - _TOP_LEVEL_KEYS
    if unknown:
        raise FormatError(f"unknown project keys {sorted(unknown)}")

    cfg = ProjectConfig(base_dir=Path(base_dir))

    if "images" in data:
        cfg.images = _validate_images(data["images"])
    if data.get("synth") is not None:
        cfg.synth = _validate_synth(data["synth"])
    if not cfg.images and cfg.synth is None:
        raise FormatError("project needs an 'images' list or a 'synth' spec")
    if cfg.images and cfg.synth is not None:
        raise FormatError("project must give 'images' or 'synth', not both")

    mode = data.get("mode", "auto")
    _require_type(mode, str, "'mode'")
    mode = _MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise FormatError(f"mode must be one of {MODES} "
                          "(or force-manhattan / force-fallback)")
    cfg.mode = mode

    if data.get("reference") is not None:
        cfg.reference = _require_type(data["reference"], int, "'reference'")
    if "seed" in data:
        cfg.seed = _require_type(data["seed"], int, "'seed'")
    if "out" in data:
        cfg.out_dir = _require_type(data["out"], str, "'out'")
    if data.get("truth") is not None:
        cfg.truth = _require_type(data["truth"], str, "'truth'")
    if data.get("edges") is not None:
        cfg.edges = _validate_edges(data["edges"])
    cfg.params = _validate_params(_require_type(
        data.get("params", {}), dict, "'params'"))
    return cfg


def load_project(path, overrides: dict | None = None) -> ProjectConfig:
    """Read a project JSON file; `overrides` apply on top (CLI flags)."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise FormatError(f"cannot read project file {p}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"project file {p} is not valid JSON: {exc}") from exc
    cfg = config_from_dict(data, base_dir=p.parent)
    if overrides:
        if overrides.get("reference") is not None:
            cfg.reference = int(overrides["reference"])
        if overrides.get("mode") is not None:
            mode = _MODE_ALIASES.get(overrides["mode"], overrides["mode"])
            if mode not in MODES:
                raise FormatError(f"mode must be one of {MODES}")
            cfg.mode = mode
        if overrides.get("seed") is not None:
            cfg.seed = int(overrides["seed"])
        if overrides.get("out") is not None:
            cfg.out_dir = str(overrides["out"])
    return cfg
