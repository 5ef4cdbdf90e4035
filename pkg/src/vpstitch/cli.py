"""Command-line interface.

Subcommands: stitch (full pipeline), synth (generate a synthetic scene
project), eval (standalone metrics over deformed-vertex files), prior
(pipeline through the similarity prior only). Exit codes: 0 success,
2 disconnected stitch graph, 3 ingest failure, 4 invalid scene spec,
1 any other error.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from .config import load_project
from .errors import DisconnectedGraph, InvalidSpec, VpStitchError
from .pipeline import run_eval, run_prior, run_stitch, write_json
from .synth import SceneSpec, generate_scene

_MODE_CHOICES = ("auto", "manhattan", "fallback",
                 "force-manhattan", "force-fallback")


def _add_project_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--project", required=True,
                   help="project JSON file")
    p.add_argument("--reference", type=int, default=None,
                   help="reference image id (default: auto)")
    p.add_argument("--mode", choices=_MODE_CHOICES, default=None,
                   help="stitching mode (default: from project file)")
    p.add_argument("--seed", type=int, default=None,
                   help="seed override")
    p.add_argument("--out", default=None,
                   help="output directory (default: from project file)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vpstitch",
        description="Panorama stitching with vanishing-point-guided "
                    "similarity priors")
    sub = parser.add_subparsers(dest="command", required=True)

    p_stitch = sub.add_parser(
        "stitch", help="run the full stitching pipeline")
    _add_project_flags(p_stitch)

    p_prior = sub.add_parser(
        "prior", help="run the pipeline through the similarity prior only")
    _add_project_flags(p_prior)

    p_synth = sub.add_parser(
        "synth", help="generate a synthetic scene project")
    p_synth.add_argument("--spec", default=None,
                         help="scene spec JSON file (defaults apply "
                              "when omitted)")
    p_synth.add_argument("--seed", type=int, default=None,
                         help="seed override")
    p_synth.add_argument("--out", required=True,
                         help="scene output directory")

    p_eval = sub.add_parser(
        "eval", help="compute metrics from deformed-vertex files")
    p_eval.add_argument("directory",
                        help="directory holding deformed_<id>.json files")
    p_eval.add_argument("--truth", default=None,
                        help="ground-truth JSON (enables the direction-"
                             "consistency score)")
    p_eval.add_argument("--reference", type=int, default=None,
                        help="reference image id (default: smallest)")
    p_eval.add_argument("--out", default=None,
                        help="output directory (default: the input "
                             "directory)")
    return parser


def _overrides(args) -> dict:
    return {"reference": args.reference, "mode": args.mode,
            "seed": args.seed, "out": args.out}


def _print_report(outputs) -> None:
    report = outputs.report
    eps = report.get("epsilon")
    eps_text = f"{eps:.4f}" if isinstance(eps, float) else "n/a"
    print(f"mode: {report.get('mode')}   epsilon: {eps_text}")
    ref = report.get("reference")
    edges = report.get("edges", [])
    print(f"reference: {ref}   images: {report.get('images')}   "
          f"edges: {len(edges)}")
    prior = outputs.prior
    if prior is not None:
        thetas = "  ".join(
            f"{i}:{math.degrees(t):+.2f}"
            for i, t in sorted(prior.thetas.items()))
        print(f"theta (deg): {thetas}")
    if "ld" in report:
        gd = report.get("gdic_deg")
        gd_text = f"{gd:.4f}" if isinstance(gd, float) else "n/a"
        print(f"distortion: {report['ld']:.6f}   "
              f"direction inconsistency (deg): {gd_text}")
    timings = "  ".join(f"{s['name']}:{s['seconds']:.2f}s"
                        for s in report.get("stages", []))
    print(f"timings: {timings}")
    for note in report.get("notes", []):
        print(f"note: {note}")
    print(f"outputs written to {outputs.out_dir}")


def _cmd_stitch(args) -> int:
    cfg = load_project(args.project, _overrides(args))
    outputs = run_stitch(cfg)
    _print_report(outputs)
    return 0


def _cmd_prior(args) -> int:
    cfg = load_project(args.project, _overrides(args))
    outputs = run_prior(cfg)
    _print_report(outputs)
    return 0


def _cmd_synth(args) -> int:
    spec_args = {}
    if args.spec is not None:
        text = Path(args.spec).read_text()
        spec_args = json.loads(text)
        if not isinstance(spec_args, dict):
            raise InvalidSpec("scene spec file must hold a JSON object")
        known = {f.name for f in SceneSpec.__dataclass_fields__.values()}
        unknown = set(spec_args) - known
        if unknown:
            raise InvalidSpec(f"unknown scene spec keys {sorted(unknown)}")
    if args.seed is not None:
        spec_args["seed"] = args.seed
    spec = SceneSpec(**spec_args)
    truth = generate_scene(spec, args.out)
    print(f"scene with {spec.n_cameras} cameras ({truth.mode}) "
          f"written to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    payload = run_eval(args.directory, truth_path=args.truth,
                       reference=args.reference, out_dir=args.out)
    ld = payload["ld"]
    gd = payload["gdic_deg"]
    gd_text = f"{gd:.4f}" if isinstance(gd, float) else "n/a"
    print(f"distortion: {ld:.6f}   direction inconsistency (deg): {gd_text}")
    return 0


_HANDLERS = {
    "stitch": _cmd_stitch,
    "prior": _cmd_prior,
    "synth": _cmd_synth,
    "eval": _cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = _HANDLERS[args.command]
    try:
        return handler(args)
    except DisconnectedGraph as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except InvalidSpec as exc:
        print(f"error: invalid scene spec: {exc}", file=sys.stderr)
        return 4
    except VpStitchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if getattr(exc, "pipeline_stage", None) == "ingest":
            return 3
        return 1


if __name__ == "__main__":
    sys.exit(main())
