"""Command-line entry point: gen, match, pose, triangulate, selftest.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(bad or missing inputs, I/O), 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, io, pipeline, pose, selftest, synth
from .config import ConfigError, RunConfig, load_config
from .errors import DataError, EmptyList, NumericalError

log = logging.getLogger("erpmatch")

REPORT_SCHEMA = "erpmatch-report"
REPORT_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_report(out_dir: Path, command: str, cfg: RunConfig, results: dict, timing: dict) -> Path:
    report = {
        "schema": REPORT_SCHEMA,
        "schema_version": REPORT_VERSION,
        "erpmatch_version": __version__,
        "command": command,
        "config": cfg.echo(),
        "results": results,
        "timing": timing,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{command}.json"
    path.write_text(json.dumps(_clean(report), sort_keys=True, indent=2) + "\n")
    return path


def _config_from_args(args) -> RunConfig:
    flags = {"seed": args.seed}
    if getattr(args, "workers", None) is not None:
        flags["workers"] = args.workers
    return load_config(args.config, args.set, **flags)


def cmd_gen(args, cfg: RunConfig) -> dict:
    out = Path(args.out)
    sc = cfg.scene
    scene = sc.spec or synth.default_room_scene(sc.room_seed)
    grid = cfg.grid.spec()
    rows = []
    for k in range(sc.pairs):
        pair = synth.make_pair(scene, sc.baseline, sc.rotation, grid, cfg.seed + k, sc.tilt, sc.supersample)
        a, b = f"p{k:03d}a", f"p{k:03d}b"
        io.save_frame(out, a, pair.frame_A)
        io.save_frame(out, b, pair.frame_B)
        rows.append((a, b, pair.overlap))
    io.write_pairs(out / "pairs.csv", rows)
    return {"pairs": [{"frameA": a, "frameB": b, "overlap": o} for a, b, o in rows]}


def cmd_match(args, cfg: RunConfig) -> tuple[dict, dict]:
    frame_A = io.load_frame(args.frames, args.frame_a)
    frame_B = io.load_frame(args.frames, args.frame_b)
    if args.gt_eval:
        gt = pipeline.gt_field(frame_A, frame_B, cfg.loss.alpha)
    result = pipeline.match_frames(pipeline.maybe_augment(frame_A, cfg), frame_B, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    m = result.refined
    io.save_matchfield(out / "match", m)
    io.write_png(out / "warp.png", pipeline.warped_image(frame_B.image, m))
    lines, n_lines = pipeline.match_lines_image(frame_A.image, frame_B.image, m)
    lines.save(out / "lines.png")
    results = {
        "frameA": frame_A.name,
        "frameB": frame_B.name,
        "mean_certainty": float(m.certainty.mean()),
        "confident_fraction": float((m.certainty >= cfg.sampling.threshold).mean()),
        "overlay_lines": n_lines,
        "files": ["match.dirs.pfm", "match.certainty.png", "warp.png", "lines.png"],
    }
    if args.gt_eval:
        results["gt"] = pipeline.evaluate_matches(result, gt)
    return results, result.timing


def _pose_task(task):
    frames, a, b, cfg_json, gt_matches = task
    cfg = RunConfig.model_validate(cfg_json)
    return pipeline.evaluate_pose(io.load_frame(frames, a), io.load_frame(frames, b), cfg, gt_matches)


def cmd_pose(args, cfg: RunConfig) -> dict:
    if args.pair:
        names = [tuple(args.pair)]
    else:
        pairs_path = Path(args.pairs) if args.pairs else Path(args.frames) / "pairs.csv"
        names = [(a, b) for a, b, _ in io.read_pairs(pairs_path)]
    if not names:
        raise EmptyList("pair list is empty")
    tasks = [(args.frames, a, b, cfg.echo(), args.gt_matches) for a, b in names]
    if cfg.workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            records = list(pool.map(_pose_task, tasks))
    else:
        records = [_pose_task(t) for t in tasks]
    errors = [r["error_deg"] for r in records]
    auc = pose.auc_at(errors)
    return {
        "matches": "ground-truth" if args.gt_matches else "estimated",
        "pairs": records,
        "failures": sum(r["status"] != "ok" for r in records),
        "auc": {f"@{int(k)}": v for k, v in auc.items()},
    }


def cmd_triangulate(args, cfg: RunConfig) -> tuple[dict, dict]:
    frame_A = io.load_frame(args.frames, args.frame_a)
    frame_B = io.load_frame(args.frames, args.frame_b)
    out = Path(args.out)
    ply = Path(args.ply) if args.ply else out / "cloud.ply"
    if args.gt_matches:
        m, timing = pipeline.gt_field(frame_A, frame_B, cfg.loss.alpha), {}
    else:
        result = pipeline.match_frames(frame_A, frame_B, cfg)
        m, timing = result.refined, result.timing
    scale = 1.0
    if frame_A.pose is not None and frame_B.pose is not None:
        scale = float(np.linalg.norm(frame_B.pose.translation - frame_A.pose.translation))
    results = {
        "frameA": frame_A.name,
        "frameB": frame_B.name,
        "ply": str(ply),
        "baseline_scale": scale,
        "matches": "ground-truth" if args.gt_matches else "estimated",
    }
    try:
        est = pipeline.pose_for_field(m, cfg)
        points, pixels = pipeline.triangulate_field(m, est, scale if scale > 0 else 1.0, cfg)
    except NumericalError as exc:
        log.warning("no reliable two-view geometry (%s); writing an empty cloud", exc)
        results["warning"] = f"{type(exc).__name__}: {exc}"
        points, pixels = np.zeros((0, 3)), np.zeros((0, 2), dtype=int)
    colors = frame_A.image.data[pixels[:, 1], pixels[:, 0]] if len(points) else None
    if colors is not None and colors.shape[1] == 1:
        colors = np.repeat(colors, 3, axis=1)
    ply.parent.mkdir(parents=True, exist_ok=True)
    io.write_ply(ply, points, colors)
    results["points"] = int(len(points))
    if len(points) and frame_A.depth is not None:
        results["median_relative_depth_error"] = pipeline.scale_aligned_depth_error(points, pixels, frame_A.depth)
    return results, timing


def cmd_selftest(args, cfg: RunConfig) -> tuple[dict, bool]:
    results = selftest.run_selftest(cfg.seed)
    print(selftest.format_report(results))
    table = [
        {"suite": r.name, "passed": r.passed, "max_error": r.max_error, "tolerance": r.tolerance}
        for r in results
    ]
    return {"suites": table}, all(r.passed for r in results)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run configuration")
    common.add_argument("--seed", type=int, help="global seed (sampling, RANSAC, generation)")
    common.add_argument("--workers", type=int, help="parallel workers for pair lists")
    common.add_argument("--out", default="out", help="output directory (default: ./out)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config value, e.g. --set refiner.temperature=50")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="erpmatch", description="Dense spherical matching for ERP panoramas.")
    parser.add_argument("--version", action="version", version=f"erpmatch {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen", parents=[common], help="render synthetic frame pairs")

    p = sub.add_parser("match", parents=[common], help="dense matches for one pair")
    p.add_argument("frames", help="frame directory")
    p.add_argument("frame_a")
    p.add_argument("frame_b")
    p.add_argument("--gt-eval", action="store_true", help="score against depth/pose ground truth")

    p = sub.add_parser("pose", parents=[common], help="relative pose and AUC over pairs")
    p.add_argument("frames", help="frame directory")
    p.add_argument("--pairs", help="pair CSV (default: FRAMES/pairs.csv)")
    p.add_argument("--pair", nargs=2, metavar=("A", "B"))
    p.add_argument("--gt-matches", action="store_true", help="use depth-derived GT matches")

    p = sub.add_parser("triangulate", parents=[common], help="point cloud for one pair")
    p.add_argument("frames", help="frame directory")
    p.add_argument("frame_a")
    p.add_argument("frame_b")
    p.add_argument("--ply", help="output PLY path (default: OUT/cloud.ply)")
    p.add_argument("--gt-matches", action="store_true", help="use depth-derived GT matches")

    sub.add_parser("selftest", parents=[common], help="run embedded invariant checks")
    return parser


def main(argv: Optional[list] = None) -> int:
    logging.basicConfig(format="%(levelname)s: %(message)s", level=logging.WARNING)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    if args.verbose:
        log.setLevel(logging.INFO)
    try:
        cfg = _config_from_args(args)
        t0 = time.perf_counter()
        timing = {}
        ok = True
        if args.command == "gen":
            results = cmd_gen(args, cfg)
        elif args.command == "match":
            results, timing = cmd_match(args, cfg)
        elif args.command == "pose":
            results = cmd_pose(args, cfg)
        elif args.command == "triangulate":
            results, timing = cmd_triangulate(args, cfg)
        else:
            results, ok = cmd_selftest(args, cfg)
        timing = dict(timing, total=time.perf_counter() - t0)
        path = write_report(Path(args.out), args.command, cfg, results, timing)
        log.info("wrote %s", path)
    except (ConfigError, UsageError) as exc:
        print(f"erpmatch: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"erpmatch: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"erpmatch: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK if ok else EXIT_NUMERICAL
