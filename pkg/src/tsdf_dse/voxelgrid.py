"""Sparse block grid holding TSDF state.

The scene is a dict of dense ``block_dim**3`` blocks keyed by integer block
coordinates.  Within a block, voxels are stored flat in x-fastest order:
``flat = x + dim * (y + dim * z)``.

TSDF values are kept as a fraction of the truncation distance, so every
observed value lies in [-1, 1].  Two storage modes exist:

* ``classic``: per-voxel running average ``tsdf`` and ``weight``.
* ``running_sum``: per-voxel ``wsum`` (sum of weight * sdf) and ``weight``;
  the average is only formed when the value is read.
"""

from __future__ import annotations

import enum
import io
import struct
from dataclasses import dataclass
from functools import lru_cache
from typing import BinaryIO, Iterator

import numpy as np

TSDF_SENTINEL = 1.0
DUMP_MAGIC = b"TSDG"
DUMP_VERSION = 1


class StorageMode(str, enum.Enum):
    CLASSIC = "classic"
    RUNNING_SUM = "running_sum"


@dataclass(frozen=True)
class GridParams:
    voxel_size: float = 0.01
    trunc: float = 0.10
    block_dim: int = 16

    def __post_init__(self):
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        if self.trunc < self.voxel_size:
            raise ValueError("trunc must be at least one voxel")
        if self.block_dim not in (8, 16):
            raise ValueError("block_dim must be 8 or 16")

    @property
    def block_size(self) -> float:
        """Block edge length in meters."""
        return self.voxel_size * self.block_dim

    @property
    def voxels_per_block(self) -> int:
        return self.block_dim**3


@lru_cache(maxsize=4)
def local_indices(block_dim: int) -> np.ndarray:
    """``(dim**3, 3)`` integer (x, y, z) local indices in storage order."""
    z, y, x = np.meshgrid(
        np.arange(block_dim), np.arange(block_dim), np.arange(block_dim), indexing="ij"
    )
    idx = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)
    idx.flags.writeable = False
    return idx


def flat_index(local_idx, block_dim: int) -> int:
    x, y, z = (int(c) for c in local_idx)
    for c in (x, y, z):
        if not 0 <= c < block_dim:
            raise IndexError(f"local index {tuple(local_idx)} outside block of size {block_dim}")
    return x + block_dim * (y + block_dim * z)


def block_coord_of(p_world, params: GridParams) -> tuple[int, int, int]:
    p = np.asarray(p_world, dtype=np.float64)
    b = np.floor(p / params.block_size).astype(np.int64)
    return int(b[0]), int(b[1]), int(b[2])


def voxel_center(block_coord, local_idx, params: GridParams) -> np.ndarray:
    flat_index(local_idx, params.block_dim)  # range check
    b = np.asarray(block_coord, dtype=np.float64)
    li = np.asarray(local_idx, dtype=np.float64)
    return (b * params.block_dim + li + 0.5) * params.voxel_size


def block_origin(block_coord, params: GridParams) -> np.ndarray:
    return np.asarray(block_coord, dtype=np.float64) * params.block_dim * params.voxel_size


class VolumeBlock:
    __slots__ = ("coord", "mode", "tsdf", "wsum", "weight")

    def __init__(self, coord, n_voxels: int, mode: StorageMode):
        self.coord = tuple(int(c) for c in coord)
        self.mode = mode
        self.weight = np.zeros(n_voxels, dtype=np.float64)
        if mode is StorageMode.CLASSIC:
            self.tsdf = np.full(n_voxels, TSDF_SENTINEL, dtype=np.float64)
            self.wsum = None
        else:
            self.tsdf = None
            self.wsum = np.zeros(n_voxels, dtype=np.float64)

    @property
    def values(self) -> np.ndarray:
        """The mode's value array (tsdf or wsum)."""
        return self.tsdf if self.mode is StorageMode.CLASSIC else self.wsum

    def finalized(self) -> np.ndarray:
        """Per-voxel TSDF with NaN for never-observed voxels."""
        out = np.full(self.weight.shape, np.nan)
        seen = self.weight > 0
        if self.mode is StorageMode.CLASSIC:
            out[seen] = self.tsdf[seen]
        else:
            out[seen] = self.wsum[seen] / self.weight[seen]
        return out

    def copy(self) -> "VolumeBlock":
        b = VolumeBlock.__new__(VolumeBlock)
        b.coord = self.coord
        b.mode = self.mode
        b.weight = self.weight.copy()
        b.tsdf = None if self.tsdf is None else self.tsdf.copy()
        b.wsum = None if self.wsum is None else self.wsum.copy()
        return b


def finalize_tsdf(block: VolumeBlock, local_idx) -> float | None:
    i = flat_index(local_idx, round(len(block.weight) ** (1 / 3)))
    w = block.weight[i]
    if w == 0:
        return None
    if block.mode is StorageMode.CLASSIC:
        return float(block.tsdf[i])
    return float(block.wsum[i] / w)


class VoxelGrid:
    def __init__(self, params: GridParams | None = None, mode: StorageMode = StorageMode.CLASSIC):
        self.params = params or GridParams()
        self.mode = StorageMode(mode)
        self.blocks: dict[tuple[int, int, int], VolumeBlock] = {}

    def __len__(self) -> int:
        return len(self.blocks)

    def __contains__(self, coord) -> bool:
        return tuple(coord) in self.blocks

    def __iter__(self) -> Iterator[VolumeBlock]:
        return iter(self.blocks.values())

    def get_or_allocate(self, block_coord) -> VolumeBlock:
        key = tuple(int(c) for c in block_coord)
        block = self.blocks.get(key)
        if block is None:
            block = VolumeBlock(key, self.params.voxels_per_block, self.mode)
            self.blocks[key] = block
        return block

    def copy(self) -> "VoxelGrid":
        g = VoxelGrid(self.params, self.mode)
        g.blocks = {k: b.copy() for k, b in self.blocks.items()}
        return g

    def sorted_coords(self) -> list[tuple[int, int, int]]:
        return sorted(self.blocks)

    def observed_voxels(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Global integer voxel coords, finalized TSDF and weight of every observed voxel.

        Rows follow sorted block order, then storage order within a block.
        """
        dim = self.params.block_dim
        loc = local_indices(dim)
        coords, tsdf, weight = [], [], []
        for key in self.sorted_coords():
            block = self.blocks[key]
            seen = block.weight > 0
            if not seen.any():
                continue
            coords.append(np.asarray(key, dtype=np.int64) * dim + loc[seen])
            tsdf.append(block.finalized()[seen])
            weight.append(block.weight[seen])
        if not coords:
            return np.empty((0, 3), np.int64), np.empty(0), np.empty(0)
        return np.concatenate(coords), np.concatenate(tsdf), np.concatenate(weight)

    # ---- snapshot dump -------------------------------------------------

    def dump(self, fp: BinaryIO) -> None:
        """Write the flat little-endian snapshot.

        Layout: ``b"TSDG"``, u32 version, f64 voxel_size, f64 trunc,
        u32 block_dim, u8 mode (0 classic, 1 running_sum), u32 block count,
        then for every block in sorted coordinate order: 3 x i32 coord,
        ``dim**3`` f64 values (tsdf or wsum), ``dim**3`` f64 weights.
        """
        p = self.params
        fp.write(DUMP_MAGIC)
        fp.write(
            struct.pack(
                "<IddIBI",
                DUMP_VERSION,
                p.voxel_size,
                p.trunc,
                p.block_dim,
                0 if self.mode is StorageMode.CLASSIC else 1,
                len(self.blocks),
            )
        )
        for key in self.sorted_coords():
            block = self.blocks[key]
            fp.write(struct.pack("<iii", *key))
            fp.write(block.values.astype("<f8").tobytes())
            fp.write(block.weight.astype("<f8").tobytes())

    def dumps(self) -> bytes:
        buf = io.BytesIO()
        self.dump(buf)
        return buf.getvalue()

    @classmethod
    def load(cls, fp: BinaryIO) -> "VoxelGrid":
        if fp.read(4) != DUMP_MAGIC:
            raise ValueError("not a grid snapshot")
        head = struct.calcsize("<IddIBI")
        version, vs, trunc, dim, mode, count = struct.unpack("<IddIBI", fp.read(head))
        if version != DUMP_VERSION:
            raise ValueError(f"unsupported snapshot version {version}")
        grid = cls(GridParams(vs, trunc, dim), StorageMode.CLASSIC if mode == 0 else StorageMode.RUNNING_SUM)
        n = dim**3
        for _ in range(count):
            key = struct.unpack("<iii", fp.read(12))
            block = grid.get_or_allocate(key)
            block.values[:] = np.frombuffer(fp.read(8 * n), dtype="<f8")
            block.weight[:] = np.frombuffer(fp.read(8 * n), dtype="<f8")
        return grid
