"""Analytic power, latency and energy model for frequency and thread scaling.

Power follows the CMOS relation ``P = P_static + P_dyn * V(f)^2 * f`` with a
linear voltage curve.  Latency is the work of a frame divided by a throughput
that scales linearly with frequency; the parallel part is spread over worker
threads whose efficiency decays as ``1 / (1 + sigma * (n - 1))``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .fusion import FusionStats

FREQ_LEVELS = (100, 90, 80, 70, 60, 50)
PERFMODEL_KEYS = ("p_static_w", "p_dyn_max_w", "v_floor", "sigma", "throughput_units_per_s")


class CalibrationError(ValueError):
    pass


def check_freq(percent) -> int:
    p = int(round(float(percent)))
    if p not in FREQ_LEVELS or abs(float(percent) - p) > 1e-9:
        raise ValueError(f"frequency level must be one of {FREQ_LEVELS}, got {percent}")
    return p


@dataclass(frozen=True)
class PowerModel:
    p_static: float = 1.0
    p_dyn_max: float = 8.0
    v_floor: float = 0.6
    n_cores: int = 8

    def __post_init__(self):
        if self.p_static < 0:
            raise ValueError("p_static must be >= 0")
        if not self.p_dyn_max > 0:
            raise ValueError("p_dyn_max must be > 0")
        if not 0 < self.v_floor < 1:
            raise ValueError("v_floor must be in (0, 1)")
        if self.n_cores < 1:
            raise ValueError("n_cores must be >= 1")

    def voltage(self, f_frac: float) -> float:
        return self.v_floor + (1.0 - self.v_floor) * f_frac


def power(model: PowerModel, f, active_workers: int | None = None) -> float:
    """Board power in W at frequency level ``f`` (percent of max).

    With ``active_workers`` the dynamic part is scaled by the share of cores
    kept busy; the default assumes all cores are active.
    """
    frac = check_freq(f) / 100.0
    share = 1.0 if active_workers is None else min(active_workers, model.n_cores) / model.n_cores
    return model.p_static + model.p_dyn_max * share * model.voltage(frac) ** 2 * frac


def energy(total_time: float, model: PowerModel, f, active_workers: int | None = None) -> float:
    if total_time < 0:
        raise ValueError("total_time must be >= 0")
    return power(model, f, active_workers) * total_time


@dataclass(frozen=True)
class WorkCosts:
    """Abstract work units charged per counted event."""

    c_frame: float = 5000.0      # per-frame setup (serial)
    c_block: float = 64.0        # visibility test + dispatch per visited block (serial)
    c_alloc: float = 2048.0      # allocation and zero-fill per new block (serial)
    c_classify: float = 1.0      # projection and early-termination checks per voxel
    c_fuse: float = 1.5          # weighted average with division per fused voxel
    c_fuse_sum: float = 0.5      # running-sum accumulate per fused voxel
    c_position: float = 1.0      # per pruning test position


@dataclass(frozen=True)
class WorkUnits:
    serial: float = 0.0
    parallel: float = 0.0

    def __post_init__(self):
        if self.serial < 0 or self.parallel < 0:
            raise ValueError("work must be non-negative")

    def __add__(self, other: "WorkUnits") -> "WorkUnits":
        return WorkUnits(self.serial + other.serial, self.parallel + other.parallel)


def work_units(stats: FusionStats, op_pruning: bool = False, costs: WorkCosts = WorkCosts()) -> WorkUnits:
    serial = costs.c_frame * stats.frames + costs.c_block * stats.blocks_visited + costs.c_alloc * stats.blocks_allocated
    fuse = costs.c_fuse_sum if op_pruning else costs.c_fuse
    parallel = costs.c_classify * stats.classified + fuse * stats.fused + costs.c_position * stats.positions_tested
    return WorkUnits(float(serial), float(parallel))


@dataclass(frozen=True)
class LatencyModel:
    mode: str = "modeled"
    throughput_max: float = 1.0e7
    sigma: float = 0.08
    costs: WorkCosts = field(default_factory=WorkCosts)

    def __post_init__(self):
        if self.mode not in ("modeled", "measured"):
            raise ValueError(f"unknown latency mode {self.mode!r}")
        if not self.throughput_max > 0:
            raise ValueError("throughput_max must be > 0")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")

    def efficiency(self, threads: int) -> float:
        return 1.0 / (1.0 + self.sigma * (threads - 1))


def latency_frame(work: WorkUnits, lat: LatencyModel, f, threads: int = 1) -> float:
    """Modeled seconds to process ``work`` at frequency level ``f``."""
    if threads < 1:
        raise ValueError("threads must be >= 1")
    frac = check_freq(f) / 100.0
    eff_work = work.serial + work.parallel / (threads * lat.efficiency(threads))
    return eff_work / (lat.throughput_max * frac)


def scale_measured(wall_clock: float, f) -> float:
    """Host wall-clock (taken at full speed) mapped to frequency level ``f``."""
    return wall_clock * 100.0 / check_freq(f)


def calibrate(work_samples: Sequence[WorkUnits], wall_clock_samples: Sequence[float],
              threads: Sequence[int] | int = 1, base: LatencyModel | None = None) -> LatencyModel:
    """Least-squares fit of throughput (and sigma when threads vary).

    The modeled time ``(S + P (1 + sigma (n - 1)) / n) / theta`` is linear in
    ``1 / theta`` and ``sigma / theta``, so an ordinary least-squares solve
    recovers both.  Wall-clock samples are assumed taken at 100% frequency.
    """
    base = base or LatencyModel()
    works = list(work_samples)
    times = np.asarray(wall_clock_samples, dtype=np.float64)
    if len(works) != len(times):
        raise CalibrationError("work and timing sample counts differ")
    if len(works) < 2:
        raise CalibrationError("need at least two samples")
    n = np.broadcast_to(np.asarray(threads, dtype=np.float64), times.shape)
    s = np.array([w.serial for w in works])
    p = np.array([w.parallel for w in works])
    x1 = s + p / n
    x2 = p * (n - 1) / n
    if np.unique(np.round(s + p, 12)).size < 2 and np.unique(n).size < 2:
        raise CalibrationError("samples must have distinct work")
    fit_sigma = np.any(x2 > 0) and np.linalg.matrix_rank(np.stack([x1, x2], axis=1)) == 2
    if fit_sigma:
        coef, *_ = np.linalg.lstsq(np.stack([x1, x2], axis=1), times, rcond=None)
        a, b = coef
        sigma = b / a if a > 0 else -1.0
    else:
        x = s + p * (1.0 + base.sigma * (n - 1)) / n
        a = float(x @ times / (x @ x))
        sigma = base.sigma
    if not a > 0 or sigma < 0:
        raise CalibrationError("fit produced non-physical parameters")
    return LatencyModel(mode=base.mode, throughput_max=1.0 / a, sigma=float(sigma), costs=base.costs)


def median_relative_error(lat: LatencyModel, work_samples, wall_clock_samples, threads=1) -> float:
    n = np.broadcast_to(np.asarray(threads), (len(wall_clock_samples),))
    pred = np.array([latency_frame(w, lat, 100, int(k)) for w, k in zip(work_samples, n)])
    t = np.asarray(wall_clock_samples, dtype=np.float64)
    return float(np.median(np.abs(pred - t) / t))


def load_perfmodel(path: str | Path) -> tuple[PowerModel, LatencyModel]:
    d = json.loads(Path(path).read_text())
    if not isinstance(d, dict) or set(d) != set(PERFMODEL_KEYS):
        raise ValueError(f"{path}: perfmodel keys must be exactly {', '.join(PERFMODEL_KEYS)}")
    pm = PowerModel(p_static=float(d["p_static_w"]), p_dyn_max=float(d["p_dyn_max_w"]), v_floor=float(d["v_floor"]))
    lm = LatencyModel(throughput_max=float(d["throughput_units_per_s"]), sigma=float(d["sigma"]))
    return pm, lm


def save_perfmodel(path: str | Path, pm: PowerModel, lm: LatencyModel) -> None:
    d = {
        "p_static_w": pm.p_static,
        "p_dyn_max_w": pm.p_dyn_max,
        "v_floor": pm.v_floor,
        "sigma": lm.sigma,
        "throughput_units_per_s": lm.throughput_max,
    }
    Path(path).write_text(json.dumps(d, indent=2) + "\n")
