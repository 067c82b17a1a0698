"""Surface extraction from a fused grid and F-score evaluation."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .voxelgrid import VoxelGrid

MAX_PAIRS = 4_000_000
_OFFSETS = sorted(
    ((dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)),
    key=lambda o: (abs(o[0]) + abs(o[1]) + abs(o[2]), o),
)


class EmptyGrid(ValueError):
    pass


class EmptyGroundTruth(ValueError):
    pass


@dataclass(frozen=True)
class FScoreReport:
    precision: float
    recall: float
    fscore: float
    tau: float

    def to_dict(self) -> dict:
        return asdict(self)


def _row_keys(rows: np.ndarray) -> np.ndarray:
    """Pack integer rows into sortable int64 keys (coords must fit in 21 bits)."""
    r = rows + (1 << 20)
    return (r[:, 0] << 42) | (r[:, 1] << 21) | r[:, 2]


def extract_surface(grid: VoxelGrid) -> np.ndarray:
    """Zero crossings between face-adjacent observed voxels, as an ``(N, 3)`` array.

    A pair crosses when the finalized values have strictly opposite signs, or
    when exactly one of them is 0 (the point then sits on that voxel's center).
    Points closer than ``voxel_size / 4`` are merged, keeping the first in
    lexicographic order.
    """
    coords, tsdf, _ = grid.observed_voxels()
    if len(coords) == 0:
        raise EmptyGrid("grid has no observed voxels")
    vs = grid.params.voxel_size
    keys = _row_keys(coords)
    order = np.argsort(keys, kind="stable")
    skeys = keys[order]
    pts = []
    for axis in range(3):
        step = np.zeros(3, dtype=np.int64)
        step[axis] = 1
        nk = _row_keys(coords + step)
        pos = np.searchsorted(skeys, nk)
        pos = np.minimum(pos, len(skeys) - 1)
        has = skeys[pos] == nk
        i = np.flatnonzero(has)
        j = order[pos[has]]
        t1, t2 = tsdf[i], tsdf[j]
        cross = ((t1 > 0) & (t2 < 0)) | ((t1 < 0) & (t2 > 0)) | ((t1 == 0) != (t2 == 0))
        i, j, t1, t2 = i[cross], j[cross], t1[cross], t2[cross]
        t = t1 / (t1 - t2)
        c1 = (coords[i] + 0.5) * vs
        c2 = (coords[j] + 0.5) * vs
        pts.append(c1 + t[:, None] * (c2 - c1))
    pts = np.concatenate(pts)
    if len(pts) == 0:
        return pts.reshape(0, 3)
    pts = pts[np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))]
    q = np.floor(pts / (vs / 4)).astype(np.int64)
    _, first = np.unique(q, axis=0, return_index=True)
    return pts[np.sort(first)]


def _sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    dx = a[..., 0] - b[..., 0]
    dy = a[..., 1] - b[..., 1]
    dz = a[..., 2] - b[..., 2]
    return dx * dx + dy * dy + dz * dz


def within_tau(queries: np.ndarray, targets: np.ndarray, tau: float) -> np.ndarray:
    """For each query, whether some target lies within ``tau`` (``d**2 <= tau**2``).

    Targets are bucketed into a uniform grid with cell edge ``tau``, so only
    the 27 cells around a query can hold a match.  Decisions are exact.
    """
    nq = len(queries)
    matched = np.zeros(nq, dtype=bool)
    if nq == 0 or len(targets) == 0:
        return matched
    tau2 = tau * tau
    tcell = np.floor(targets / tau).astype(np.int64)
    tcells, tid = np.unique(tcell, axis=0, return_inverse=True)
    tid = tid.ravel()
    torder = np.argsort(tid, kind="stable")
    starts = np.searchsorted(tid[torder], np.arange(len(tcells) + 1))
    qcells, qinv = np.unique(np.floor(queries / tau).astype(np.int64), axis=0, return_inverse=True)
    qinv = qinv.ravel()
    nt = len(tcells)

    for off in _OFFSETS:
        rem = np.flatnonzero(~matched)
        if rem.size == 0:
            break
        nb = qcells + np.asarray(off)
        allc, inv = np.unique(np.concatenate([tcells, nb]), axis=0, return_inverse=True)
        inv = inv.ravel()
        lookup = np.full(len(allc), -1, dtype=np.int64)
        lookup[inv[:nt]] = np.arange(nt)
        cell_of_q = lookup[inv[nt:]][qinv[rem]]
        keep = cell_of_q >= 0
        rem, cell_of_q = rem[keep], cell_of_q[keep]
        s, e = starts[cell_of_q], starts[cell_of_q + 1]
        lens = e - s
        # chunk so the expanded pair list stays bounded
        csum = np.cumsum(lens)
        lo = 0
        while lo < len(rem):
            base = csum[lo - 1] if lo else 0
            hi = int(np.searchsorted(csum, base + MAX_PAIRS, side="right"))
            hi = max(hi, lo + 1)
            ln = lens[lo:hi]
            total = int(ln.sum())
            if total:
                qrep = np.repeat(rem[lo:hi], ln)
                within = np.arange(total) - np.repeat(np.cumsum(ln) - ln, ln)
                tidx = torder[np.repeat(s[lo:hi], ln) + within]
                hit = _sq_dist(queries[qrep], targets[tidx]) <= tau2
                matched[qrep[hit]] = True
            lo = hi
    return matched


def fscore(recon: np.ndarray, gt: np.ndarray, tau: float = 0.05) -> FScoreReport:
    if not tau > 0:
        raise ValueError("tau must be positive")
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    recon = np.asarray(recon, dtype=np.float64).reshape(-1, 3)
    if len(gt) == 0:
        raise EmptyGroundTruth("ground-truth cloud is empty")
    if len(recon) == 0:
        return FScoreReport(0.0, 0.0, 0.0, tau)
    precision = float(within_tau(recon, gt, tau).mean())
    recall = float(within_tau(gt, recon, tau).mean())
    f = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return FScoreReport(precision, recall, f, tau)


def accuracy_loss(design_fscore: float, baseline_fscore: float) -> float:
    """Signed F-score drop relative to the baseline (positive means worse)."""
    return baseline_fscore - design_fscore


def write_xyz(path: str | Path, points: np.ndarray) -> None:
    np.savetxt(path, np.asarray(points).reshape(-1, 3), fmt="%.6f")


def read_xyz(path: str | Path) -> np.ndarray:
    text = Path(path).read_text()
    if not text.strip():
        return np.empty((0, 3))
    return np.loadtxt(path, dtype=np.float64, ndmin=2).reshape(-1, 3)
