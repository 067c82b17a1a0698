"""``tsdf-dse`` command line: gen, fuse, sweep, select, eval.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O or format error,
3 infeasible selection.  Results are written as files and echoed as JSON on
stdout.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import accuracy, dse
from .dataflow import (LoadError, SamplingConfig, SceneSpec, Trajectory, default_scene, generate_synthetic,
                       load_sequence, sample_uniform, write_sequence)
from .fusion import FusionConfig, fuse_sequence, new_grid
from .perfmodel import LatencyModel, PowerModel, energy, latency_frame, load_perfmodel, scale_measured, work_units

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_INFEASIBLE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, default=float))


def _models(args) -> tuple[PowerModel, LatencyModel]:
    if getattr(args, "perfmodel", None):
        pm, lm = load_perfmodel(args.perfmodel)
    else:
        pm, lm = PowerModel(), LatencyModel()
    return pm, LatencyModel(mode=args.mode, throughput_max=lm.throughput_max, sigma=lm.sigma, costs=lm.costs)


def _read_cloud(path) -> np.ndarray:
    try:
        return accuracy.read_xyz(path)
    except ValueError as e:
        raise LoadError(f"{path}: malformed point cloud ({e})") from e


def cmd_gen(args) -> int:
    if args.scene:
        try:
            doc = json.loads(Path(args.scene).read_text())
        except OSError as e:
            raise LoadError(f"{args.scene}: {e.strerror or e}") from e
        except json.JSONDecodeError as e:
            raise LoadError(f"{args.scene}: malformed JSON ({e})") from e
        try:
            scene = SceneSpec.from_dict(doc)
        except (KeyError, TypeError, ValueError) as e:
            raise UsageError(f"{args.scene}: invalid scene ({e})") from e
    else:
        scene = default_scene()
    traj = Trajectory(kind=args.traj, frame_count=args.frames)
    frames, gt = generate_synthetic(scene, traj, seed=args.seed, noise=args.noise)
    out = Path(args.out)
    n = write_sequence(out, frames)
    accuracy.write_xyz(out / "gt.xyz", gt)
    _emit({"frames": n, "gt_points": int(len(gt)), "out": str(out)})
    return EXIT_OK


def cmd_fuse(args) -> int:
    design = dse.DesignConfig(args.algo, args.freq, args.fps)
    base_cfg = design.fusion_config()
    threads = args.threads if args.threads is not None else base_cfg.threads
    cfg = FusionConfig(base_cfg.voxel_pruning, base_cfg.op_pruning, threads=threads)
    pm, lm = _models(args)
    frames = list(load_sequence(args.seq))
    grid = new_grid(cfg)
    per_frame = []
    t0 = time.perf_counter()
    stats = fuse_sequence(grid, sample_uniform(frames, SamplingConfig(design.fps)), cfg, per_frame)
    wall = time.perf_counter() - t0
    try:
        pts = accuracy.extract_surface(grid)
    except accuracy.EmptyGrid:
        pts = np.empty((0, 3))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    accuracy.write_xyz(out / "recon.xyz", pts)
    work = work_units(stats, cfg.op_pruning, lm.costs)
    stats_doc = stats.to_dict()
    stats_doc["work_units"] = {"serial": work.serial, "parallel": work.parallel}
    stats_doc["wall_clock_s"] = wall
    (out / "stats.json").write_text(json.dumps(stats_doc, indent=2) + "\n")

    n = stats.frames
    if lm.mode == "modeled":
        total = latency_frame(work, lm, design.freq, threads)
    else:
        total = sum(scale_measured(s.elapsed, design.freq) for s in per_frame)
    doc = {
        "design_id": design.label,
        "config": {"algo": design.algo, "freq": design.freq, "fps": design.fps, "threads": threads},
        "frames_processed": n,
        "energy": energy(total, pm, design.freq, threads),
        "latency": total / n if n else 0.0,
        "points": int(len(pts)),
    }
    if args.gt:
        rep = accuracy.fscore(pts, _read_cloud(args.gt))
        doc.update(fscore=rep.fscore, precision=rep.precision, recall=rep.recall)
    (out / "design.json").write_text(json.dumps(doc, indent=2) + "\n")
    _emit(doc)
    return EXIT_OK


def cmd_sweep(args) -> int:
    pm, lm = _models(args)
    frames = list(load_sequence(args.seq))
    gt = _read_cloud(args.gt)
    if len(gt) == 0:
        raise accuracy.EmptyGroundTruth(f"{args.gt}: ground-truth cloud is empty")
    log = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    points = dse.run_sweep(frames, gt, pm, lm, progress=log)
    front = dse.pareto_front(points)
    selections = {name: dse.select_optimal(points, c) for name, c in dse.USE_CASES.items()}
    paths = dse.emit_report(points, front, selections, args.out)
    _emit({"designs": len(points), "pareto": [p.design_id for p in front],
           "selections": {k: v and v.design_id for k, v in selections.items()},
           "files": {k: str(v) for k, v in paths.items()}})
    return EXIT_OK


def cmd_select(args) -> int:
    try:
        points, _ = dse.read_sweep_json(args.sweep)
    except (KeyError, TypeError, ValueError) as e:
        raise LoadError(f"{args.sweep}: not a sweep report ({e})") from e
    if args.usecase:
        if args.latency_max is not None or args.accuracy_loss_max is not None:
            raise UsageError("--usecase cannot be combined with explicit constraints")
        c = dse.USE_CASES[args.usecase]
    else:
        lat = math.inf if args.latency_max is None else args.latency_max / 1000.0
        acc = math.inf if args.accuracy_loss_max is None else args.accuracy_loss_max
        c = dse.Constraints(lat, acc)
    best = dse.select_optimal(points, c)
    if best is None:
        _emit({"selected": None, "latency_max_ms": c.latency_max * 1000.0,
               "accuracy_loss_max": c.accuracy_loss_max})
        print("no design satisfies the constraints", file=sys.stderr)
        return EXIT_INFEASIBLE
    _emit({"selected": best.design_id, **best.to_dict()})
    return EXIT_OK


def cmd_eval(args) -> int:
    recon = _read_cloud(args.recon)
    gt = _read_cloud(args.gt)
    _emit(accuracy.fscore(recon, gt, args.tau).to_dict())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tsdf-dse", description="TSDF fusion design-space exploration")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="render a synthetic depth sequence and ground truth")
    g.add_argument("--scene", help="scene JSON (default: built-in room)")
    g.add_argument("--traj", default="orbit", choices=("orbit", "lawnmower", "static"))
    g.add_argument("--frames", type=int, default=90)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise", type=float, default=0.0, help="depth noise sigma in meters")
    g.set_defaults(func=cmd_gen)

    f = sub.add_parser("fuse", help="run one design")
    f.add_argument("--seq", required=True)
    f.add_argument("--algo", default="baseline", choices=dse.ALGOS)
    f.add_argument("--freq", type=int, default=100)
    f.add_argument("--fps", type=float, default=30.0)
    f.add_argument("--threads", type=int, default=None, help="default: 8 for baseline, 4 for A")
    f.add_argument("--mode", default="modeled", choices=("modeled", "measured"))
    f.add_argument("--out", required=True)
    f.add_argument("--gt", help="optional ground truth for an F-score")
    f.add_argument("--perfmodel")
    f.set_defaults(func=cmd_fuse)

    s = sub.add_parser("sweep", help="evaluate all 72 designs")
    s.add_argument("--seq", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--mode", default="modeled", choices=("modeled", "measured"))
    s.add_argument("--out", required=True)
    s.add_argument("--perfmodel")
    s.add_argument("-v", "--verbose", action="store_true")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("select", help="pick the minimum-energy design under constraints")
    c.add_argument("--sweep", required=True)
    c.add_argument("--usecase", choices=sorted(dse.USE_CASES))
    c.add_argument("--latency-max", type=float, help="milliseconds per frame")
    c.add_argument("--accuracy-loss-max", type=float)
    c.set_defaults(func=cmd_select)

    e = sub.add_parser("eval", help="F-score of a reconstruction against ground truth")
    e.add_argument("--recon", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--tau", type=float, default=0.05)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (LoadError, OSError, accuracy.EmptyGroundTruth) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
