"""Depth-only TSDF fusion over a sparse block grid.

Per frame: select visible blocks (existing blocks in the clipped frustum plus
blocks touched by the truncation band around measured depth), allocate the new
ones, then classify every voxel of every visible block against the frame and
fuse the ones that land inside the truncation band.

Classification order is camera plane -> image bounds -> depth validity ->
truncation band; the signed distance can only be formed once a valid depth has
been looked up.

Work is split across threads by block, round robin over the sorted block list.
Each voxel is touched by exactly one worker and all arithmetic is elementwise,
so the resulting grid is bitwise identical for any thread count.
"""

from __future__ import annotations

import enum
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Iterable

import numpy as np

from .dataflow import DepthFrame
from .geometry import world_to_camera
from .voxelgrid import GridParams, StorageMode, VoxelGrid, local_indices

CHUNK_BLOCKS = 48


class StorageModeMismatch(ValueError):
    pass


class VoxelStatus(enum.IntEnum):
    FUSED = 0
    BEHIND_CAMERA_PLANE = 1
    OUT_OF_TRUNC_BAND = 2
    OUT_OF_IMAGE_SCOPE = 3
    INVALID_DEPTH = 4


class PruningMode(str, enum.Enum):
    OFF = "off"
    ON = "on"
    FLASHFUSION8 = "flashfusion8"


@dataclass(frozen=True)
class FusionConfig:
    voxel_pruning: PruningMode = PruningMode.OFF
    op_pruning: bool = False
    threads: int = 4
    weight_per_frame: float = 1.0
    max_weight: float = 255.0

    def __post_init__(self):
        object.__setattr__(self, "voxel_pruning", PruningMode(self.voxel_pruning))
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if not self.weight_per_frame > 0:
            raise ValueError("weight_per_frame must be positive")

    @property
    def storage_mode(self) -> StorageMode:
        return StorageMode.RUNNING_SUM if self.op_pruning else StorageMode.CLASSIC


@dataclass
class FusionStats:
    counts: np.ndarray = field(default_factory=lambda: np.zeros(len(VoxelStatus), dtype=np.int64))
    blocks_visited: int = 0
    blocks_allocated: int = 0
    blocks_pruned_whole: int = 0
    voxels_skipped_by_pruning: int = 0
    positions_tested: int = 0
    frames: int = 0
    elapsed: float = 0.0

    @property
    def classified(self) -> int:
        return int(self.counts.sum())

    def count(self, status: VoxelStatus) -> int:
        return int(self.counts[status])

    @property
    def fused(self) -> int:
        return self.count(VoxelStatus.FUSED)

    def __add__(self, other: "FusionStats") -> "FusionStats":
        out = FusionStats()
        for f in fields(self):
            setattr(out, f.name, getattr(self, f.name) + getattr(other, f.name))
        return out

    def to_dict(self) -> dict:
        d = {s.name.lower(): self.count(s) for s in VoxelStatus}
        d.update(
            classified=self.classified,
            blocks_visited=self.blocks_visited,
            blocks_allocated=self.blocks_allocated,
            blocks_pruned_whole=self.blocks_pruned_whole,
            voxels_skipped_by_pruning=self.voxels_skipped_by_pruning,
            positions_tested=self.positions_tested,
            frames=self.frames,
            elapsed_s=self.elapsed,
        )
        return d


# ---------------------------------------------------------------------------
# per-voxel math


def tsdf_update(t_prev, w_prev, w, d, max_weight: float = 255.0):
    """Weighted running average of normalized signed distances.

    Works on scalars or arrays.  The stored weight saturates at ``max_weight``.
    """
    t = (w_prev * t_prev + w * d) / (w_prev + w)
    return t, np.minimum(w_prev + w, max_weight)


def classify_points(p_cam: np.ndarray, frame: DepthFrame, trunc: float) -> tuple[np.ndarray, np.ndarray]:
    """Status and normalized sdf for camera-space points ``(N, 3)``.

    sdf is clamped to [-1, 1] for fused points, raw for out-of-band points and
    NaN otherwise.
    """
    intr = frame.intr
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    status = np.full(len(z), VoxelStatus.OUT_OF_IMAGE_SCOPE, dtype=np.int8)
    sdf = np.full(len(z), np.nan)
    front = z > 0
    status[~front] = VoxelStatus.BEHIND_CAMERA_PLANE
    zs = np.where(front, z, 1.0)
    # clip before rounding so far-off projections cannot overflow int64
    u = np.clip(intr.fx * x / zs + intr.cx, -2.0, intr.width + 2.0)
    v = np.clip(intr.fy * y / zs + intr.cy, -2.0, intr.height + 2.0)
    ui = np.floor(u + 0.5).astype(np.int64)
    vi = np.floor(v + 0.5).astype(np.int64)
    inside = front & (ui >= 0) & (ui < intr.width) & (vi >= 0) & (vi < intr.height)
    idx = np.flatnonzero(inside)
    raw = frame.raw[vi[idx], ui[idx]]
    has_depth = raw > 0
    status[idx[~has_depth]] = VoxelStatus.INVALID_DEPTH
    idx = idx[has_depth]
    depth = frame.depth[vi[idx], ui[idx]]
    s = (depth - z[idx]) / trunc
    band = np.abs(s) <= 1.0
    status[idx] = np.where(band, VoxelStatus.FUSED, VoxelStatus.OUT_OF_TRUNC_BAND)
    sdf[idx] = np.where(band, np.clip(s, -1.0, 1.0), s)
    return status, sdf


def classify_voxel(p_world, frame: DepthFrame, params: GridParams) -> tuple[VoxelStatus, float]:
    p_cam = world_to_camera(frame.pose, np.asarray(p_world, dtype=np.float64).reshape(1, 3))
    status, sdf = classify_points(p_cam, frame, params.trunc)
    return VoxelStatus(int(status[0])), float(sdf[0])


def voxel_centers(coords: np.ndarray, local: np.ndarray, params: GridParams) -> np.ndarray:
    """World centers for paired rows of block coords and local indices."""
    return (coords * params.block_dim + local + 0.5) * params.voxel_size


# ---------------------------------------------------------------------------
# block selection


def _frustum_bounds(frame: DepthFrame):
    intr = frame.intr
    xl = (-0.5 - intr.cx) / intr.fx
    xr = (intr.width - 0.5 - intr.cx) / intr.fx
    yl = (-0.5 - intr.cy) / intr.fy
    yr = (intr.height - 0.5 - intr.cy) / intr.fy
    return xl, xr, yl, yr


def _existing_in_frustum(grid: VoxelGrid, frame: DepthFrame, znear: float, zfar: float) -> list[tuple]:
    if not grid.blocks:
        return []
    params = grid.params
    keys = np.array(list(grid.blocks), dtype=np.int64)
    offs = np.array([[i, j, k] for k in (0, 1) for j in (0, 1) for i in (0, 1)], dtype=np.float64)
    corners = (keys[:, None, :] + offs[None]) * params.block_size
    pc = world_to_camera(frame.pose, corners)
    lo, hi = pc.min(axis=1), pc.max(axis=1)
    z0 = np.maximum(lo[:, 2], znear)
    z1 = np.minimum(hi[:, 2], zfar)
    ok = z0 <= z1
    xl, xr, yl, yr = _frustum_bounds(frame)
    fx_lo = np.minimum(xl * z0, xl * z1)
    fx_hi = np.maximum(xr * z0, xr * z1)
    fy_lo = np.minimum(yl * z0, yl * z1)
    fy_hi = np.maximum(yr * z0, yr * z1)
    ok &= (hi[:, 0] >= fx_lo) & (lo[:, 0] <= fx_hi) & (hi[:, 1] >= fy_lo) & (lo[:, 1] <= fy_hi)
    return [tuple(int(c) for c in k) for k in keys[ok]]


def _dda_blocks(p0: np.ndarray, p1: np.ndarray, block_size: float) -> np.ndarray:
    """Integer coords of every block cell crossed by the segments ``p0 -> p1``."""
    a = p0 / block_size
    d = p1 / block_size - a
    cell = np.floor(a).astype(np.int64)
    end = np.floor(a + d).astype(np.int64)
    step = np.sign(d).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_delta = np.where(d != 0, np.abs(1.0 / d), np.inf)
        boundary = np.where(step > 0, cell + 1, cell)
        t_max = np.where(d != 0, (boundary - a) / d, np.inf)
    out = [cell.copy()]
    active = np.any(cell != end, axis=1)
    # each step crosses one face; bound the loop by the lattice distance
    for _ in range(int(np.abs(end - cell).sum(axis=1).max(initial=0)) + 3):
        if not active.any():
            break
        axis = np.argmin(t_max, axis=1)
        rows = np.arange(len(cell))
        tm = t_max[rows, axis]
        active &= tm <= 1.0
        r = rows[active]
        ax = axis[active]
        cell[r, ax] += step[r, ax]
        t_max[r, ax] += t_delta[r, ax]
        out.append(cell[r].copy())
        active &= np.any(cell != end, axis=1)
    return np.concatenate(out)


def _footprint_blocks(frame: DepthFrame, v: np.ndarray, u: np.ndarray, z0: np.ndarray, z1: np.ndarray,
                      block_size: float) -> np.ndarray:
    """Blocks overlapping the world AABB of each pixel's band slab (conservative)."""
    intr = frame.intr
    pts = []
    for du in (-0.5, 0.5):
        for dv in (-0.5, 0.5):
            for z in (z0, z1):
                pc = np.stack([(u + du - intr.cx) * z / intr.fx, (v + dv - intr.cy) * z / intr.fy, z], axis=-1)
                pts.append(pc)
    pw = np.stack([frame.pose.rotation @ p.T for p in pts], axis=0).transpose(0, 2, 1) + frame.pose.translation
    eps = 1e-9
    lo = np.floor((pw.min(axis=0) - eps) / block_size).astype(np.int64)
    hi = np.floor((pw.max(axis=0) + eps) / block_size).astype(np.int64)
    ext = hi - lo
    out = []
    for dx in range(int(ext[:, 0].max(initial=0)) + 1):
        for dy in range(int(ext[:, 1].max(initial=0)) + 1):
            for dz in range(int(ext[:, 2].max(initial=0)) + 1):
                off = np.array([dx, dy, dz])
                keep = np.all(off <= ext, axis=1)
                out.append(lo[keep] + off)
    return np.concatenate(out) if out else np.empty((0, 3), np.int64)


def visible_blocks(grid: VoxelGrid, frame: DepthFrame, params: GridParams | None = None,
                   alloc_stride: int | None = None, exhaustive: bool = False) -> set[tuple[int, int, int]]:
    """Coords of blocks to process for ``frame``.

    Union of existing blocks whose camera-space bounding box meets the frustum
    clipped to ``[d_min - trunc, d_max + trunc]`` and blocks crossed by the
    band segment ``[d - trunc, d + trunc]`` along valid pixel rays, sampling
    every ``alloc_stride`` pixels (default ``block_dim // 2``).  With
    ``exhaustive`` every valid pixel contributes the bounding box of its whole
    pixel footprint, which guarantees that any voxel this frame can fuse lies
    in a returned block.  Nothing is allocated here.
    """
    params = params or grid.params
    valid = frame.valid
    if not valid.any():
        return set()
    depth = frame.depth
    trunc = params.trunc
    dv = depth[valid]
    znear = max(float(dv.min()) - trunc, 0.0)
    zfar = float(dv.max()) + trunc
    out = set(_existing_in_frustum(grid, frame, znear, zfar))

    intr = frame.intr
    stride = 1 if exhaustive else (alloc_stride or params.block_dim // 2)
    sub = valid[::stride, ::stride]
    v, u = np.nonzero(sub)
    v = v * stride
    u = u * stride
    d = depth[v, u]
    z0 = np.maximum(d - trunc, 1e-6)
    z1 = d + trunc
    if exhaustive:
        cells = _footprint_blocks(frame, v.astype(float), u.astype(float), z0, z1, params.block_size)
    else:
        rays = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones(len(u))], axis=-1)
        rw = rays @ frame.pose.rotation.T
        p0 = frame.pose.translation + rw * z0[:, None]
        p1 = frame.pose.translation + rw * z1[:, None]
        cells = _dda_blocks(p0, p1, params.block_size)
    if len(cells):
        out.update(map(tuple, np.unique(cells, axis=0).tolist()))
    return out


# ---------------------------------------------------------------------------
# voxel pruning

_CORNER_OFFSETS = np.array([[i, j, k] for k in (0, 1) for j in (0, 1) for i in (0, 1)], dtype=np.float64)


def _octant_of_voxel(block_dim: int) -> np.ndarray:
    loc = local_indices(block_dim)
    h = block_dim // 2
    return ((loc[:, 0] >= h) + 2 * (loc[:, 1] >= h) + 4 * (loc[:, 2] >= h)).astype(np.int64)


def _critical_positions(coords: np.ndarray, params: GridParams) -> np.ndarray:
    """``(B, 9, 3)`` world positions: 8 corners (octant order) then the center."""
    corners = (coords[:, None, :] + _CORNER_OFFSETS[None]) * params.block_size
    center = (coords[:, None, :] + 0.5) * params.block_size
    return np.concatenate([corners, center], axis=1)


def _positions_in_band(coords: np.ndarray, frame: DepthFrame, params: GridParams) -> np.ndarray:
    pos = _critical_positions(coords, params).reshape(-1, 3)
    status, _ = classify_points(world_to_camera(frame.pose, pos), frame, params.trunc)
    return (status == VoxelStatus.FUSED).reshape(len(coords), 9)


def _masks(coords: np.ndarray, frame: DepthFrame, params: GridParams, mode: PruningMode) -> np.ndarray:
    """``(B, dim**3)`` eligibility masks."""
    inb = _positions_in_band(coords, frame, params)
    corners, center = inb[:, :8], inb[:, 8]
    if mode is PruningMode.FLASHFUSION8:
        return np.repeat(corners.any(axis=1)[:, None], params.voxels_per_block, axis=1)
    mask = corners[:, _octant_of_voxel(params.block_dim)]
    mask[center] = True
    return mask


def prune_mask(block_coord, frame: DepthFrame, params: GridParams) -> np.ndarray:
    """Voxels of one block eligible under the 9-position test.

    Center inside the band: the whole block.  Otherwise each in-band corner
    enables the octant it belongs to.
    """
    coords = np.asarray(block_coord, dtype=np.int64).reshape(1, 3)
    return _masks(coords, frame, params, PruningMode.ON)[0]


def prune_mask_ff8(block_coord, frame: DepthFrame, params: GridParams) -> np.ndarray:
    """Whole block eligible iff any of its 8 corners is inside the band."""
    coords = np.asarray(block_coord, dtype=np.int64).reshape(1, 3)
    return _masks(coords, frame, params, PruningMode.FLASHFUSION8)[0]


# ---------------------------------------------------------------------------
# fusion


def _fuse_chunk(blocks, frame: DepthFrame, params: GridParams, config: FusionConfig, stats: FusionStats) -> None:
    n = params.voxels_per_block
    coords = np.array([b.coord for b in blocks], dtype=np.int64)
    loc = local_indices(params.block_dim)
    if config.voxel_pruning is PruningMode.OFF:
        bi = np.repeat(np.arange(len(blocks)), n)
        li = np.tile(np.arange(n), len(blocks))
    else:
        mask = _masks(coords, frame, params, config.voxel_pruning)
        stats.positions_tested += len(blocks) * (9 if config.voxel_pruning is PruningMode.ON else 8)
        stats.blocks_pruned_whole += int((~mask.any(axis=1)).sum())
        bi, li = np.nonzero(mask)
        stats.voxels_skipped_by_pruning += len(blocks) * n - len(bi)
    if len(bi) == 0:
        return
    centers = voxel_centers(coords[bi], loc[li], params)
    status, sdf = classify_points(world_to_camera(frame.pose, centers), frame, params.trunc)
    stats.counts += np.bincount(status, minlength=len(VoxelStatus))
    hit = status == VoxelStatus.FUSED
    if not hit.any():
        return
    bi, li, d = bi[hit], li[hit], sdf[hit]
    w = config.weight_per_frame
    for k in np.unique(bi):
        sel = bi == k
        block = blocks[k]
        idx = li[sel]
        dk = d[sel]
        if config.op_pruning:
            block.wsum[idx] += w * dk
            block.weight[idx] += w
        else:
            t, wt = tsdf_update(block.tsdf[idx], block.weight[idx], w, dk, config.max_weight)
            block.tsdf[idx] = t
            block.weight[idx] = wt


def _fuse_worker(blocks, frame, params, config) -> FusionStats:
    stats = FusionStats()
    for i in range(0, len(blocks), CHUNK_BLOCKS):
        _fuse_chunk(blocks[i:i + CHUNK_BLOCKS], frame, params, config, stats)
    return stats


def fuse_frame(grid: VoxelGrid, frame: DepthFrame, config: FusionConfig | None = None,
               alloc_stride: int | None = None) -> FusionStats:
    config = config or FusionConfig()
    if grid.mode is not config.storage_mode:
        raise StorageModeMismatch(
            f"grid stores {grid.mode.value} but config asks for {config.storage_mode.value}"
        )
    t0 = time.perf_counter()
    params = grid.params
    coords = sorted(visible_blocks(grid, frame, params, alloc_stride))
    before = len(grid)
    blocks = [grid.get_or_allocate(c) for c in coords]
    stats = FusionStats(blocks_visited=len(blocks), blocks_allocated=len(grid) - before, frames=1)

    shards = [blocks[k::config.threads] for k in range(config.threads)]
    if config.threads == 1:
        parts = [_fuse_worker(blocks, frame, params, config)]
    else:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            parts = list(pool.map(lambda s: _fuse_worker(s, frame, params, config), shards))
    for p in parts:
        stats.counts += p.counts
        stats.blocks_pruned_whole += p.blocks_pruned_whole
        stats.voxels_skipped_by_pruning += p.voxels_skipped_by_pruning
        stats.positions_tested += p.positions_tested
    stats.elapsed = time.perf_counter() - t0
    return stats


def fuse_sequence(grid: VoxelGrid, frames: Iterable[DepthFrame], config: FusionConfig | None = None,
                  per_frame: list | None = None, alloc_stride: int | None = None) -> FusionStats:
    """Fuse frames in order; returns summed stats.  Per-frame stats are appended to ``per_frame``."""
    total = FusionStats()
    for frame in frames:
        s = fuse_frame(grid, frame, config, alloc_stride)
        if per_frame is not None:
            per_frame.append(s)
        total = total + s
    return total


def new_grid(config: FusionConfig, params: GridParams | None = None) -> VoxelGrid:
    return VoxelGrid(params or GridParams(), config.storage_mode)
