import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsdf_dse.voxelgrid import (GridParams, StorageMode, VoxelGrid, block_coord_of, finalize_tsdf,
                                flat_index, local_indices, voxel_center)

P = GridParams()


@pytest.mark.parametrize("p,expected", [((0, 0, 0), (0, 0, 0)), ((0.17, 0, 0), (1, 0, 0)),
                                        ((-0.01, 0, 0), (-1, 0, 0))])
def test_block_coord_of(p, expected):
    assert block_coord_of(p, P) == expected


def test_voxel_center_examples():
    assert np.allclose(voxel_center((0, 0, 0), (0, 0, 0), P), [0.005] * 3)
    assert np.allclose(voxel_center((1, 0, 0), (0, 0, 0), P), [0.165, 0.005, 0.005])


@pytest.mark.parametrize("idx", [(16, 0, 0), (0, -1, 0)])
def test_voxel_center_rejects_bad_index(idx):
    with pytest.raises(IndexError):
        voxel_center((0, 0, 0), idx, P)


@settings(max_examples=300, deadline=None)
@given(st.tuples(*[st.integers(-500, 500)] * 3), st.tuples(*[st.integers(0, 15)] * 3))
def test_center_and_block_coord_inverse(b, l):
    assert block_coord_of(voxel_center(b, l, P), P) == b


@pytest.mark.parametrize("kw", [dict(voxel_size=0), dict(trunc=0.005), dict(block_dim=12)])
def test_params_validation(kw):
    with pytest.raises(ValueError):
        GridParams(**kw)


def test_flat_index_x_fastest():
    assert flat_index((1, 0, 0), 16) == 1
    assert flat_index((0, 1, 0), 16) == 16
    assert flat_index((0, 0, 1), 16) == 256
    loc = local_indices(8)
    assert all(flat_index(loc[i], 8) == i for i in range(0, 512, 37))


def test_get_or_allocate():
    g = VoxelGrid()
    b = g.get_or_allocate((3, -2, 1))
    assert b.weight.shape == (4096,) and not b.weight.any()
    assert np.all(b.tsdf == 1.0)
    b.weight[5] = 2
    assert g.get_or_allocate((3, -2, 1)) is b and b.weight[5] == 2
    for c in [(0, 0, 0), (1, 0, 0), (3, -2, 1)]:
        g.get_or_allocate(c)
    assert len(g) == 3


def test_finalize_running_sum():
    g = VoxelGrid(mode=StorageMode.RUNNING_SUM)
    b = g.get_or_allocate((0, 0, 0))
    b.wsum[0] = 0.5 * 3
    b.weight[0] = 3
    assert finalize_tsdf(b, (0, 0, 0)) == pytest.approx(0.5)
    assert finalize_tsdf(b, (1, 0, 0)) is None


def test_finalize_classic():
    g = VoxelGrid()
    b = g.get_or_allocate((0, 0, 0))
    b.tsdf[1], b.weight[1] = -0.25, 4
    assert finalize_tsdf(b, (1, 0, 0)) == -0.25
    assert finalize_tsdf(b, (2, 0, 0)) is None


def test_dump_layout_and_round_trip():
    g = VoxelGrid(GridParams(block_dim=8))
    b = g.get_or_allocate((1, -1, 0))
    b.tsdf[3], b.weight[3] = 0.25, 1
    data = g.dumps()
    assert data[:4] == b"TSDG"
    n = 8 ** 3
    assert len(data) == 4 + 4 + 8 + 8 + 4 + 1 + 4 + 12 + 16 * n
    back = VoxelGrid.load(io.BytesIO(data))
    assert back.dumps() == data
    assert back.params == g.params and back.mode == g.mode


def test_observed_voxels_global_coords():
    g = VoxelGrid()
    b = g.get_or_allocate((1, 0, -1))
    b.tsdf[flat_index((2, 3, 4), 16)] = 0.5
    b.weight[flat_index((2, 3, 4), 16)] = 1
    coords, t, w = g.observed_voxels()
    assert coords.tolist() == [[18, 3, -12]]
    assert t.tolist() == [0.5] and w.tolist() == [1]
