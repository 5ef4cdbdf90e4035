"""End-to-end stitching pipeline.

Stages: ingest (images, segments, matches) -> vanishing-point detection
-> stitch graph + rotation estimation -> similarity prior (with
automatic degeneration to the VP-free fallback) -> mesh deformation ->
compositing -> naturalness metrics. Every run writes a machine-readable
report.json, even on failure; prior.json and metrics.json are written
deterministically so identical projects and seeds give identical bytes.
"""
from __future__ import annotations

import dataclasses
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ProjectConfig
from .errors import (
    AllOutliers,
    FocalEstimationFailed,
    FormatError,
    InsufficientMatches,
    MissingTruth,
    NoConsensus,
    NoHypothesis,
    NoOrthogonalPair,
    SingleImage,
    TooFewSegments,
)
from .ingest import (
    ImageRecord,
    MatchSet,
    detect_line_segments,
    load_image,
    load_precomputed,
    match_features,
    ransac_homography,
)
from .meshwarp import (
    EnergyWeights,
    assemble_energy,
    composite_panorama,
    compute_overlap_flags,
    make_grid_mesh,
    mesh_from_dict,
    mesh_to_dict,
    solve_deformation,
)
from .metrics import gdic, local_distortion
from .posegraph import annotate_rolls, build_stitch_graph, rotation_bundle_adjust
from .prior import (
    PriorAnnotations,
    SimilarityPrior,
    align_vps,
    camera_to_world,
    estimate_dominant_directions,
    estimate_scales,
    fallback_rotations,
    path_vote,
    reject_outliers,
    solve_rotations,
    vp_divergence,
)
from .synth import (
    SceneSpec,
    generate_scene,
    inject_alpha_noise,
    render_segment_array,
    truth_from_json,
)
from .vpdetect import detect_vps

_VP_FAILURES = (TooFewSegments, NoConsensus, NoOrthogonalPair,
                FocalEstimationFailed, NoHypothesis)


# ------------------------------------------------------------- utilities

def _jsonify(x):
    if isinstance(x, np.floating):
        x = float(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.ndarray):
        return _jsonify(x.tolist())
    if isinstance(x, float):
        return x if math.isfinite(x) else None
    if isinstance(x, dict):
        return {str(k): _jsonify(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonify(v) for v in x]
    if isinstance(x, Path):
        return str(x)
    return x


def write_json(path, obj) -> None:
    """Canonical JSON writer: sorted keys, stable float formatting."""
    Path(path).write_text(
        json.dumps(_jsonify(obj), sort_keys=True, indent=1) + "\n")


def _subseed(*parts) -> int:
    entropy = [abs(int(p)) for p in parts]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def thread_count(n_tasks: int) -> int:
    """Worker cap: min(cpu count, VPSTITCH_THREADS, task count)."""
    cap = os.cpu_count() or 1
    env = os.environ.get("VPSTITCH_THREADS", "").strip()
    if env:
        try:
            cap = min(cap, max(1, int(env)))
        except ValueError:
            raise FormatError(
                f"VPSTITCH_THREADS must be an integer, got {env!r}") from None
    return max(1, min(cap, n_tasks))


def _parallel_map(fn, items):
    """Map preserving item order; threads capped by VPSTITCH_THREADS."""
    items = list(items)
    workers = thread_count(len(items))
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


class _Stages:
    def __init__(self, report):
        self.report = report
        self.current = None

    @contextmanager
    def stage(self, name):
        self.current = name
        t0 = time.perf_counter()
        yield
        self.report["stages"].append(
            {"name": name, "seconds": round(time.perf_counter() - t0, 6)})
        self.current = None


# ------------------------------------------------------------ result type

@dataclass
class StitchOutputs:
    config: ProjectConfig
    out_dir: Path
    report: dict
    records: dict = field(default_factory=dict)
    graph: object = None
    estimate: object = None
    prior: SimilarityPrior | None = None
    meshes: dict | None = None
    composite: object = None
    distortion: object = None
    directions: object = None


# ----------------------------------------------------------------- input

def _materialize_synth(cfg: ProjectConfig, out_dir: Path) -> ProjectConfig:
    """Generate the inline synthetic scene and re-point the project at it."""
    spec_args = dict(cfg.synth)
    spec_args.setdefault("seed", cfg.seed)
    spec = SceneSpec(**spec_args)
    scene_dir = out_dir / "scene"
    generate_scene(spec, scene_dir)
    data = json.loads((scene_dir / "project.json").read_text())
    return dataclasses.replace(
        cfg, images=data["images"], synth=None, base_dir=scene_dir,
        truth=data.get("truth"))


def _build_records(cfg: ProjectConfig) -> dict:
    records = {}
    for entry in cfg.images:
        img_id = entry["id"]
        if "path" in entry:
            rec = load_image(cfg.resolve(entry["path"]), img_id)
            for key, actual in (("width", rec.width), ("height", rec.height)):
                if key in entry and entry[key] != actual:
                    raise FormatError(
                        f"image {img_id}: project says {key}={entry[key]} "
                        f"but file has {actual}")
        else:
            rec = ImageRecord(id=img_id, width=entry["width"],
                              height=entry["height"])
        records[img_id] = rec
    return records


def _segment_rows(segments) -> list:
    return [{"x0": s.x0, "y0": s.y0, "x1": s.x1, "y1": s.y1,
             "strength": s.strength} for s in segments]


def _ingest(cfg: ProjectConfig, records: dict, notes: list):
    """Segments per image and verified match sets, from files or pixels."""
    pre = load_precomputed(cfg.base_dir, records,
                           min_pairs=cfg.min_edge_matches)
    segments = dict(pre.segments)
    matchsets = []
    if pre.segments or pre.matches:
        notes.extend(pre.warnings)
        for (i, j), arr in sorted(pre.matches.items()):
            try:
                h, mask = ransac_homography(
                    arr[:, 0:2], arr[:, 2:4], cfg.ransac_thresh_px,
                    cfg.ransac_iters, _subseed(cfg.seed, i, j),
                    min_inliers=max(4, cfg.min_edge_matches))
            except InsufficientMatches as exc:
                notes.append(f"edge ({i}, {j}) dropped: {exc}")
                continue
            matchsets.append(MatchSet(i=i, j=j, points=arr[mask],
                                      homography=h,
                                      inlier_ratio=float(mask.mean())))
    else:
        for img_id in sorted(records):
            if records[img_id].gray is None:
                raise FormatError(
                    f"image {img_id} has neither pixel data nor "
                    "precomputed segment/match files")

        def detect_one(img_id):
            try:
                return detect_line_segments(
                    records[img_id], cfg.segment_angle_tol_deg,
                    cfg.segment_min_length_frac)
            except TooFewSegments as exc:
                return exc

        ids = sorted(records)
        for img_id, got in zip(ids, _parallel_map(detect_one, ids)):
            if isinstance(got, TooFewSegments):
                notes.append(f"image {img_id}: {got}")
                segments[img_id] = []
            else:
                segments[img_id] = got

        pairs = [(i, j) for i in ids for j in ids if i < j]

        def match_one(pair):
            i, j = pair
            try:
                return match_features(
                    records[i], records[j], ratio=cfg.match_ratio,
                    ransac_thresh_px=cfg.ransac_thresh_px,
                    ransac_iters=cfg.ransac_iters,
                    min_inliers=max(8, cfg.min_edge_matches),
                    seed=_subseed(cfg.seed, i, j))
            except InsufficientMatches as exc:
                return exc

        for pair, got in zip(pairs, _parallel_map(match_one, pairs)):
            if isinstance(got, InsufficientMatches):
                notes.append(f"edge {pair}: {got}")
            else:
                matchsets.append(got)

    # images without pixel data get a rendering of their segments so the
    # panorama stage has something to composite
    for img_id, rec in records.items():
        if rec.gray is None:
            rows = _segment_rows(segments.get(img_id, []))
            rec.gray = render_segment_array(rows, rec.width, rec.height)
    return segments, matchsets


# ------------------------------------------------------------------ prior

def _detect_triplets(cfg: ProjectConfig, records: dict, segments: dict,
                     notes: list) -> dict:
    ids = sorted(records)

    def detect_one(img_id):
        segs = segments.get(img_id, [])
        try:
            return detect_vps(
                segs, records[img_id].width, records[img_id].height,
                angle_tol_deg=cfg.vp_angle_tol_deg,
                min_support=cfg.vp_min_support,
                max_pairs=cfg.vp_max_pairs,
                max_candidates=cfg.vp_max_candidates,
                focal_range=(cfg.focal_min, cfg.focal_max),
                seed=_subseed(cfg.seed, img_id))
        except _VP_FAILURES as exc:
            return exc

    triplets = {}
    for img_id, got in zip(ids, _parallel_map(detect_one, ids)):
        if isinstance(got, Exception):
            notes.append(
                f"image {img_id}: no vanishing triplet "
                f"({type(got).__name__}: {got})")
        else:
            triplets[img_id] = got
    return triplets


def _compute_prior(cfg: ProjectConfig, graph, rotations: dict, betas: dict,
                   triplets: dict, notes: list):
    """The similarity prior plus report extras, honoring forced modes."""
    n = len(graph.nodes)
    alphas: dict = {}
    inliers: list = []
    weights: dict = {}
    corrupted: list = []
    residuals: dict = {}
    rho = 0.0
    epsilon = math.inf
    mode = None

    if cfg.mode == "fallback":
        mode = "fallback"
        notes.append("fallback mode forced by configuration")
    elif not triplets:
        if cfg.mode == "manhattan":
            raise NoHypothesis(
                "manhattan mode forced but no image has a vanishing triplet")
        mode = "fallback"
        notes.append("no vanishing triplets detected; degenerating to the "
                     "VP-free fallback")
    else:
        aligned = align_vps(triplets, rotations, graph.reference)
        supports = {i: tuple(t.supports) for i, t in triplets.items()}
        try:
            dominant = estimate_dominant_directions(aligned,
                                                    supports=supports)
            alphas, _ = camera_to_world(dominant, triplets)
        except _VP_FAILURES as exc:
            if cfg.mode == "manhattan":
                raise
            mode = "fallback"
            notes.append(f"dominant-direction fit failed "
                         f"({type(exc).__name__}: {exc}); degenerating")
        else:
            residuals = {i: float(e)
                         for i, e in sorted(dominant.residuals.items())}
            if cfg.corrupt_alpha_fraction > 0:
                alphas, corrupted = inject_alpha_noise(
                    alphas, cfg.corrupt_alpha_fraction,
                    cfg.corrupt_alpha_deg, cfg.seed)
                notes.append(f"roll estimates corrupted for images "
                             f"{corrupted}")
            if cfg.robust:
                try:
                    inliers, rho = reject_outliers(dominant, n, cfg.tau)
                except AllOutliers as exc:
                    if cfg.mode == "manhattan":
                        raise
                    inliers, rho = [], 0.0
                    notes.append(str(exc))
            else:
                inliers = sorted(alphas)
                rho = len(inliers) / n
            epsilon, is_manhattan = vp_divergence(dominant, inliers, n,
                                                  cfg.epsilon0)
            if cfg.mode == "manhattan":
                mode = "manhattan"
            elif inliers and is_manhattan:
                mode = "manhattan"
            else:
                mode = "fallback"
                notes.append(
                    f"vp divergence {epsilon:.4f} exceeds "
                    f"{cfg.epsilon0}; degenerating to the VP-free fallback")

    if mode == "manhattan":
        if cfg.robust:
            weights = path_vote(graph, inliers, alphas, betas, cfg.f_max,
                                cfg.delta_support_deg, cfg.sigmoid_k)
        else:
            weights = {i: 1.0 for i in inliers}
        thetas = solve_rotations(graph, alphas, betas, inliers, weights,
                                 cfg.lambda_smooth)
    else:
        thetas = fallback_rotations(graph, betas)

    scales = estimate_scales(graph)
    annotations = PriorAnnotations(inliers=inliers, ratio=rho,
                                   weights=weights, alphas=alphas)
    prior = SimilarityPrior(thetas=thetas, scales=scales, mode=mode,
                            epsilon=epsilon, annotations=annotations)
    extras = {"residuals": residuals, "corrupted": corrupted}
    return prior, extras


def prior_payload(prior: SimilarityPrior, extras: dict, reference) -> dict:
    ann = prior.annotations
    return {
        "mode": prior.mode,
        "epsilon": prior.epsilon,
        "reference": reference,
        "thetas_deg": {str(i): math.degrees(t)
                       for i, t in sorted(prior.thetas.items())},
        "scales": {str(i): float(s)
                   for i, s in sorted(prior.scales.items())},
        "alphas_deg": {str(i): math.degrees(a)
                       for i, a in sorted(ann.alphas.items())},
        "inliers": list(ann.inliers),
        "inlier_ratio": ann.ratio,
        "weights": {str(i): float(w)
                    for i, w in sorted(ann.weights.items())},
        "vp_residuals": {str(i): v
                         for i, v in sorted(extras["residuals"].items())},
        "corrupted_ids": list(extras["corrupted"]),
    }


def metrics_payload(distortion, direction_report, reference) -> dict:
    payload = {
        "ld": distortion.ld if distortion else None,
        "per_image_distortion": (
            {str(i): v for i, v in sorted(distortion.per_image.items())}
            if distortion else {}),
        "gdic_deg": None,
        "kappas_deg": None,
        "gammas_deg": None,
        "reference": reference,
    }
    if direction_report is not None:
        payload["gdic_deg"] = direction_report.gdic_deg
        payload["kappas_deg"] = {
            str(i): v for i, v in sorted(direction_report.kappas_deg.items())}
        payload["gammas_deg"] = {
            str(i): v for i, v in sorted(direction_report.gammas_deg.items())}
    return payload


# ------------------------------------------------------------ entry point

def run_stitch(cfg: ProjectConfig, stop_after: str | None = None
               ) -> StitchOutputs:
    """Run the pipeline and write outputs into cfg.out_dir.

    stop_after="prior" skips warping, compositing, and metrics (the
    prior-only command). report.json is written even when a stage
    fails; the offending stage is recorded on the exception and in the
    report's failed_stage field.
    """
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report: dict = {"stages": [], "notes": [], "mode": None, "epsilon": None}
    outputs = StitchOutputs(config=cfg, out_dir=out_dir, report=report)
    stages = _Stages(report)
    try:
        _run_pipeline(cfg, out_dir, report, outputs, stages, stop_after)
    except Exception as exc:
        report["error"] = f"{type(exc).__name__}: {exc}"
        if stages.current:
            report["failed_stage"] = stages.current
            if not getattr(exc, "pipeline_stage", None):
                exc.pipeline_stage = stages.current
        raise
    finally:
        write_json(out_dir / "report.json", report)
    return outputs


def _run_pipeline(cfg, out_dir, report, outputs, stages, stop_after):
    notes = report["notes"]

    with stages.stage("ingest"):
        if cfg.synth is not None:
            cfg = _materialize_synth(cfg, out_dir)
            outputs.config = cfg
        records = _build_records(cfg)
        segments, matchsets = _ingest(cfg, records, notes)
        outputs.records = records
        report["images"] = len(records)

    with stages.stage("vp-detect"):
        if cfg.mode == "fallback":
            triplets = {}
            notes.append("vanishing-point detection skipped in forced "
                         "fallback mode")
        else:
            triplets = _detect_triplets(cfg, records, segments, notes)
        report["vp_triplets"] = sorted(triplets)

    with stages.stage("pose-graph"):
        dims = {i: (r.width, r.height) for i, r in records.items()}
        graph = build_stitch_graph(
            dims, matchsets, reference=cfg.reference,
            manual_edges=cfg.edges, min_matches=cfg.min_edge_matches,
            min_inlier_ratio=cfg.min_inlier_ratio)
        estimate = rotation_bundle_adjust(graph)
        betas = annotate_rolls(graph, estimate.rotations)
        outputs.graph = graph
        outputs.estimate = estimate
        report["reference"] = graph.reference
        report["edges"] = [list(k) for k in sorted(graph.edges)]
        report["mean_reprojection_px"] = estimate.mean_reprojection_px
        report["focals_px"] = {str(i): float(f)
                               for i, f in sorted(estimate.focals.items())}

    with stages.stage("prior"):
        prior, extras = _compute_prior(cfg, graph, estimate.rotations,
                                       betas, triplets, notes)
        outputs.prior = prior
        report["mode"] = prior.mode
        report["epsilon"] = prior.epsilon if math.isfinite(prior.epsilon) \
            else None
        write_json(out_dir / "prior.json",
                   prior_payload(prior, extras, graph.reference))

    if stop_after == "prior":
        return

    with stages.stage("mesh-warp"):
        meshes = {i: make_grid_mesh(i, records[i].width, records[i].height,
                                    cfg.grid_nx, cfg.grid_ny)
                  for i in graph.nodes}
        weights = EnergyWeights(w_align=cfg.w_align, w_local=cfg.w_local,
                                w_global=cfg.w_global,
                                quad_mode=cfg.quad_weight_mode)
        system = assemble_energy(meshes, graph, prior, weights)
        meshes, folds, energy = solve_deformation(system)
        compute_overlap_flags(meshes)
        outputs.meshes = meshes
        report["fold_overs"] = folds
        report["energy"] = {"initial": system.initial_energy,
                            "final": energy}
        for i, mesh in sorted(meshes.items()):
            write_json(out_dir / f"deformed_{i}.json", mesh_to_dict(mesh))

    with stages.stage("composite"):
        comp = composite_panorama(records, meshes)
        outputs.composite = comp
        from PIL import Image

        Image.fromarray(comp.image).save(out_dir / "panorama.png")
        report["canvas"] = {"width": int(comp.image.shape[1]),
                            "height": int(comp.image.shape[0]),
                            "origin": [float(comp.origin[0]),
                                       float(comp.origin[1])]}

    with stages.stage("metrics"):
        distortion = local_distortion(meshes)
        outputs.distortion = distortion
        direction_report = None
        truth = None
        if cfg.truth:
            truth_file = cfg.resolve(cfg.truth)
            try:
                truth = truth_from_json(json.loads(truth_file.read_text()))
            except (OSError, KeyError, ValueError) as exc:
                notes.append(f"truth file {truth_file.name} unusable: {exc}")
        if truth is not None:
            try:
                direction_report = gdic(meshes, truth, graph.reference)
            except (MissingTruth, SingleImage) as exc:
                notes.append(f"direction consistency skipped: {exc}")
        outputs.directions = direction_report
        payload = metrics_payload(distortion, direction_report,
                                  graph.reference)
        write_json(out_dir / "metrics.json", payload)
        report["ld"] = distortion.ld
        report["gdic_deg"] = payload["gdic_deg"]


def run_prior(cfg: ProjectConfig) -> StitchOutputs:
    """Pipeline through the similarity prior only."""
    return run_stitch(cfg, stop_after="prior")


# ------------------------------------------------------------------- eval

def run_eval(directory, truth_path=None, reference=None, out_dir=None) -> dict:
    """Standalone metrics over deformed-vertex files.

    Computes the distortion score always and the direction-consistency
    score when a truth file is supplied; raises MissingTruth only in
    that case. Returns the metrics payload (also written to
    metrics.json in out_dir or the input directory).
    """
    root = Path(directory)
    meshes = {}
    for path in sorted(root.glob("deformed_*.json")):
        mesh = mesh_from_dict(json.loads(path.read_text()))
        meshes[mesh.image_id] = mesh
    if not meshes:
        raise FormatError(f"no deformed_<id>.json files in {root}")

    distortion = local_distortion(meshes)
    direction_report = None
    ref = reference
    if truth_path is not None:
        try:
            truth = truth_from_json(json.loads(Path(truth_path).read_text()))
        except (OSError, KeyError, ValueError) as exc:
            raise MissingTruth(f"cannot read truth file "
                               f"{truth_path}: {exc}") from exc
        if ref is None:
            ref = min(meshes)
        direction_report = gdic(meshes, truth, ref)
    elif ref is None:
        ref = min(meshes)

    payload = metrics_payload(distortion, direction_report, ref)
    target = Path(out_dir) if out_dir else root
    target.mkdir(parents=True, exist_ok=True)
    write_json(target / "metrics.json", payload)
    return payload
