"""Design-space sweep over algorithm, frequency and frame-rate choices.

A design is ``(algo, freq, fps)``: ``algo`` is ``baseline`` or ``A`` (voxel
pruning, running-sum storage and the 4-thread sweet spot), ``freq`` a percent
of the maximum clock and ``fps`` the uniform sampling rate.  Every design is
scored on total sequence energy, mean per-frame latency and F-score, and
compared against ``(baseline, E(100), D(30))``.
"""

from __future__ import annotations

import csv
import json
import math
import xml.etree.ElementTree as ET
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .accuracy import accuracy_loss, extract_surface, fscore
from .dataflow import SAMPLING_RATES, DepthFrame, SamplingConfig, sample_uniform
from .fusion import FusionConfig, FusionStats, PruningMode, fuse_sequence, new_grid
from .perfmodel import (FREQ_LEVELS, LatencyModel, PowerModel, energy, latency_frame, scale_measured,
                        work_units)
from .voxelgrid import GridParams

ALGOS = ("baseline", "A")
BASELINE_THREADS = 8
SWEET_SPOT_THREADS = 4
CSV_HEADER = ("design_id,algo,freq_pct,fps,frames_processed,energy_j,latency_ms,fscore,"
              "accuracy_loss,energy_reduction,latency_reduction,pareto").split(",")


@dataclass(frozen=True)
class DesignConfig:
    algo: str = "baseline"
    freq: int = 100
    fps: float = 30.0

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise ValueError(f"algo must be one of {ALGOS}")
        if self.freq not in FREQ_LEVELS:
            raise ValueError(f"freq must be one of {FREQ_LEVELS}")
        if float(self.fps) not in SAMPLING_RATES:
            raise ValueError(f"fps must be one of {SAMPLING_RATES}")
        object.__setattr__(self, "fps", float(self.fps))

    @property
    def label(self) -> str:
        body = f"E({self.freq})+D({self.fps:g})"
        return f"A+{body}" if self.algo == "A" else body

    def fusion_config(self) -> FusionConfig:
        if self.algo == "A":
            return FusionConfig(voxel_pruning=PruningMode.ON, op_pruning=True, threads=SWEET_SPOT_THREADS)
        return FusionConfig(voxel_pruning=PruningMode.OFF, op_pruning=False, threads=BASELINE_THREADS)


BASELINE_DESIGN = DesignConfig("baseline", 100, 30.0)


def enumerate_designs() -> list[DesignConfig]:
    """All 72 designs: algo-major, then frequency and frame rate descending."""
    return [DesignConfig(a, f, fps) for a in ALGOS for f in FREQ_LEVELS for fps in SAMPLING_RATES]


@dataclass(frozen=True)
class Constraints:
    latency_max: float = math.inf      # seconds per frame
    accuracy_loss_max: float = math.inf

    def __post_init__(self):
        if self.latency_max < 0 or self.accuracy_loss_max < 0:
            raise ValueError("constraints must be non-negative")


USE_CASES = {
    "scan_share": Constraints(0.033, 0.0),
    "spatial_audio": Constraints(math.inf, 0.03),
    "intermediate": Constraints(0.033, 0.01),
}


@dataclass
class DesignPoint:
    config: DesignConfig
    frames_processed: int
    energy: float            # J over the sequence
    latency: float           # s, mean per processed frame
    fscore: float
    energy_reduction: float = 1.0
    latency_reduction: float = 1.0
    accuracy_loss: float = 0.0
    precision: float | None = None
    recall: float | None = None
    work_serial: float = 0.0
    work_parallel: float = 0.0

    @property
    def design_id(self) -> str:
        return self.config.label

    def to_dict(self) -> dict:
        d = asdict(self)
        d["config"] = asdict(self.config)
        d["design_id"] = self.design_id
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DesignPoint":
        d = dict(d)
        d.pop("design_id", None)
        d["config"] = DesignConfig(**d["config"])
        return cls(**d)


@dataclass
class FusionOutcome:
    """Fusion result shared by every frequency level of an (algo, fps) pair."""

    stats: FusionStats
    per_frame: list
    points: np.ndarray
    precision: float
    recall: float
    fscore: float


def run_fusion(frames: Sequence[DepthFrame], design: DesignConfig, gt: np.ndarray,
               params: GridParams | None = None, tau: float = 0.05) -> FusionOutcome:
    cfg = design.fusion_config()
    grid = new_grid(cfg, params)
    per_frame: list[FusionStats] = []
    stats = fuse_sequence(grid, sample_uniform(frames, SamplingConfig(design.fps)), cfg, per_frame)
    if any(b.weight.any() for b in grid):
        pts = extract_surface(grid)
    else:
        pts = np.empty((0, 3))
    rep = fscore(pts, gt, tau)
    return FusionOutcome(stats, per_frame, pts, rep.precision, rep.recall, rep.fscore)


def evaluate_design(frames: Sequence[DepthFrame], design: DesignConfig, power_model: PowerModel,
                    latency_model: LatencyModel, gt: np.ndarray, baseline: DesignPoint | None = None,
                    params: GridParams | None = None, tau: float = 0.05,
                    outcome: FusionOutcome | None = None) -> DesignPoint:
    """Score one design.  Without ``baseline`` the point is its own reference."""
    if outcome is None:
        outcome = run_fusion(frames, design, gt, params, tau)
    cfg = design.fusion_config()
    n = outcome.stats.frames
    work = work_units(outcome.stats, cfg.op_pruning, latency_model.costs)
    if latency_model.mode == "modeled":
        total = latency_frame(work, latency_model, design.freq, cfg.threads)
    else:
        total = sum(scale_measured(s.elapsed, design.freq) for s in outcome.per_frame)
    point = DesignPoint(
        config=design,
        frames_processed=n,
        energy=energy(total, power_model, design.freq, cfg.threads),
        latency=total / n if n else 0.0,
        fscore=outcome.fscore,
        precision=outcome.precision,
        recall=outcome.recall,
        work_serial=work.serial,
        work_parallel=work.parallel,
    )
    ref = baseline or point
    point.energy_reduction = ref.energy / point.energy if point.energy > 0 else math.inf
    point.latency_reduction = ref.latency / point.latency if point.latency > 0 else math.inf
    point.accuracy_loss = accuracy_loss(point.fscore, ref.fscore)
    return point


def run_sweep(frames: Sequence[DepthFrame], gt: np.ndarray, power_model: PowerModel | None = None,
              latency_model: LatencyModel | None = None, designs: Sequence[DesignConfig] | None = None,
              params: GridParams | None = None, tau: float = 0.05,
              progress: Callable[[str], None] | None = None) -> list[DesignPoint]:
    """Evaluate ``designs`` (default: all 72) in order, baseline first.

    Fusion depends only on ``(algo, fps)``, so in modeled mode each pair is
    fused once and reused across frequency levels.  Measured mode re-runs
    fusion per design so every point carries its own timing.
    """
    power_model = power_model or PowerModel()
    latency_model = latency_model or LatencyModel()
    frames = list(frames)
    designs = list(designs or enumerate_designs())
    reuse = latency_model.mode == "modeled"
    cache: dict[tuple[str, float], FusionOutcome] = {}

    def outcome_for(d: DesignConfig) -> FusionOutcome:
        key = (d.algo, d.fps)
        if not reuse:
            return run_fusion(frames, d, gt, params, tau)
        if key not in cache:
            if progress:
                progress(f"fusing algo={d.algo} fps={d.fps:g}")
            cache[key] = run_fusion(frames, d, gt, params, tau)
        return cache[key]

    base = evaluate_design(frames, BASELINE_DESIGN, power_model, latency_model, gt, None, params, tau,
                           outcome_for(BASELINE_DESIGN))
    points = []
    for d in designs:
        if d == BASELINE_DESIGN:
            points.append(base)
            continue
        points.append(evaluate_design(frames, d, power_model, latency_model, gt, base, params, tau, outcome_for(d)))
    return points


# ---------------------------------------------------------------------------
# frontier and selection


def dominates(a: tuple[float, float], b: tuple[float, float]) -> bool:
    return a[0] <= b[0] and a[1] <= b[1] and (a[0] < b[0] or a[1] < b[1])


def pareto_indices(objs: Sequence[tuple[float, float]]) -> list[int]:
    """Indices of points not dominated under joint minimization, in input order."""
    order = sorted(range(len(objs)), key=lambda i: (objs[i][0], objs[i][1]))
    keep = []
    best_prev = math.inf  # min second objective among strictly smaller first objective
    i = 0
    while i < len(order):
        j = i
        e = objs[order[i]][0]
        while j < len(order) and objs[order[j]][0] == e:
            j += 1
        group = order[i:j]
        group_min = objs[group[0]][1]  # sorted, so first has the smallest second objective
        for k in group:
            lat = objs[k][1]
            if lat < best_prev and lat == group_min:
                keep.append(k)
        best_prev = min(best_prev, group_min)
        i = j
    return sorted(keep)


def pareto_front(points: Sequence[DesignPoint]) -> list[DesignPoint]:
    if not points:
        raise ValueError("pareto_front needs at least one point")
    return [points[i] for i in pareto_indices([(p.energy, p.latency) for p in points])]


def select_optimal(points: Sequence[DesignPoint], c: Constraints) -> DesignPoint | None:
    """Minimum-energy point meeting both constraints.

    Ties go to lower latency, then lower accuracy loss, then list order.
    """
    feasible = [(p.energy, p.latency, p.accuracy_loss, i) for i, p in enumerate(points)
                if p.latency <= c.latency_max and p.accuracy_loss <= c.accuracy_loss_max]
    if not feasible:
        return None
    return points[min(feasible)[3]]


# ---------------------------------------------------------------------------
# reports


def write_csv(path: str | Path, points: Sequence[DesignPoint], front_ids: set[str]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_HEADER)
        for p in points:
            c = p.config
            w.writerow([p.design_id, c.algo, c.freq, f"{c.fps:g}", p.frames_processed, repr(p.energy),
                        repr(p.latency * 1000.0), repr(p.fscore), repr(p.accuracy_loss),
                        repr(p.energy_reduction), repr(p.latency_reduction),
                        "true" if p.design_id in front_ids else "false"])


def read_sweep_json(path: str | Path) -> tuple[list[DesignPoint], dict]:
    d = json.loads(Path(path).read_text())
    return [DesignPoint.from_dict(p) for p in d["points"]], d


def _svg_tradeoff(points: Sequence[DesignPoint], front: Sequence[DesignPoint]) -> ET.Element:
    W, H, L, R, T, B = 720, 520, 70, 30, 40, 60
    xs = [p.latency_reduction for p in points]
    ys = [math.log10(p.energy_reduction) for p in points]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    padx = (x1 - x0) * 0.05 or 0.1
    pady = (y1 - y0) * 0.05 or 0.1
    x0, x1, y0, y1 = x0 - padx, x1 + padx, y0 - pady, y1 + pady

    def sx(x):
        return L + (x - x0) / (x1 - x0) * (W - L - R)

    def sy(y):
        return H - B - (y - y0) / (y1 - y0) * (H - T - B)

    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(W), height=str(H),
                     viewBox=f"0 0 {W} {H}")
    ET.SubElement(svg, "rect", x="0", y="0", width=str(W), height=str(H), fill="white")
    ET.SubElement(svg, "line", x1=str(L), y1=str(H - B), x2=str(W - R), y2=str(H - B), stroke="black")
    ET.SubElement(svg, "line", x1=str(L), y1=str(T), x2=str(L), y2=str(H - B), stroke="black")
    xl = ET.SubElement(svg, "text", x=str((L + W - R) / 2), y=str(H - 15), **{"text-anchor": "middle"})
    xl.text = "latency reduction (x)"
    yl = ET.SubElement(svg, "text", x="18", y=str((T + H - B) / 2), transform=f"rotate(-90 18 {(T + H - B) / 2})",
                       **{"text-anchor": "middle"})
    yl.text = "energy reduction (x, log scale)"
    for k in range(int(math.floor(y0)), int(math.ceil(y1)) + 1):
        for m in (1, 2, 5):
            v = math.log10(m) + k
            if y0 <= v <= y1:
                t = ET.SubElement(svg, "text", x=str(L - 6), y=f"{sy(v) + 4:.1f}", **{"text-anchor": "end",
                                                                                         "font-size": "11"})
                t.text = f"{m * 10.0 ** k:g}"
    for v in np.linspace(x0, x1, 6):
        t = ET.SubElement(svg, "text", x=f"{sx(v):.1f}", y=str(H - B + 16), **{"text-anchor": "middle",
                                                                               "font-size": "11"})
        t.text = f"{v:.2f}"

    hues = {f: i * 55 for i, f in enumerate(FREQ_LEVELS)}
    fr = sorted(front, key=lambda p: p.latency_reduction)
    ET.SubElement(svg, "polyline", fill="none", stroke="orange", **{"stroke-width": "2", "class": "pareto"},
                  points=" ".join(f"{sx(p.latency_reduction):.2f},{sy(math.log10(p.energy_reduction)):.2f}"
                                  for p in fr))
    for p in points:
        r = 3.0 + 400.0 * max(p.accuracy_loss, 0.0)
        c = ET.SubElement(svg, "circle", cx=f"{sx(p.latency_reduction):.2f}",
                          cy=f"{sy(math.log10(p.energy_reduction)):.2f}", r=f"{r:.2f}",
                          fill=f"hsl({hues[p.config.freq]},70%,45%)",
                          stroke="black" if p.config.algo == "A" else "none",
                          **{"fill-opacity": "0.7", "class": "design", "data-design": p.design_id})
        title = ET.SubElement(c, "title")
        title.text = f"{p.design_id}: loss {p.accuracy_loss:.4f}"
    return svg


def emit_report(points: Sequence[DesignPoint], front: Sequence[DesignPoint],
                selections: dict[str, DesignPoint | None], out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    front_ids = {p.design_id for p in front}
    paths = {"csv": out / "sweep.csv", "json": out / "sweep.json", "svg": out / "tradeoff.svg"}
    write_csv(paths["csv"], points, front_ids)
    doc = {
        "points": [p.to_dict() for p in points],
        "pareto": [p.design_id for p in points if p.design_id in front_ids],
        "selections": {k: (None if v is None else v.design_id) for k, v in selections.items()},
    }
    paths["json"].write_text(json.dumps(doc, indent=2) + "\n")
    tree = ET.ElementTree(_svg_tradeoff(points, front))
    tree.write(paths["svg"], encoding="utf-8", xml_declaration=True)
    return paths
