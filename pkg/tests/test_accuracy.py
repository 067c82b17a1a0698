import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsdf_dse.accuracy import (EmptyGrid, EmptyGroundTruth, accuracy_loss, extract_surface, fscore, read_xyz,
                               within_tau, write_xyz)
from tsdf_dse.dataflow import Box, DepthFrame, SceneSpec, quantize_depth, render_depth
from tsdf_dse.fusion import FusionConfig, fuse_sequence, new_grid
from tsdf_dse.geometry import Intrinsics, look_at
from tsdf_dse.voxelgrid import GridParams, VoxelGrid, flat_index


def brute_fscore(recon, gt, tau):
    """All-pairs reference: squared distances against tau**2, no index."""
    if len(recon) == 0:
        return 0.0, 0.0, 0.0
    diff = recon[:, None, :] - gt[None, :, :]
    d2 = diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]
    close = d2 <= tau * tau
    p = close.any(axis=1).mean()
    r = close.any(axis=0).mean()
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return float(p), float(r), float(f)


def grid_with(values):
    """Grid holding observed voxels at global coords -> tsdf."""
    g = VoxelGrid()
    for (x, y, z), t in values.items():
        b = g.get_or_allocate((x // 16, y // 16, z // 16))
        i = flat_index((x % 16, y % 16, z % 16), 16)
        b.tsdf[i], b.weight[i] = t, 1
    return g


def test_midpoint_crossing():
    pts = extract_surface(grid_with({(0, 0, 0): 0.5, (1, 0, 0): -0.5}))
    assert np.allclose(pts, [[0.01, 0.005, 0.005]])


def test_zero_voxel_crossing_at_its_center():
    pts = extract_surface(grid_with({(0, 0, 0): 0.0, (0, 1, 0): 0.3}))
    assert np.allclose(pts, [[0.005, 0.005, 0.005]])


def test_all_positive_empty():
    assert len(extract_surface(grid_with({(0, 0, 0): 0.2, (1, 0, 0): 0.4}))) == 0


def test_crossing_needs_both_observed():
    g = grid_with({(0, 0, 0): 0.5})
    g.blocks[(0, 0, 0)].tsdf[1] = -0.5  # weight stays 0
    assert len(extract_surface(g)) == 0


def test_empty_grid_raises():
    with pytest.raises(EmptyGrid):
        extract_surface(VoxelGrid())


def test_crossing_across_block_boundary():
    pts = extract_surface(grid_with({(15, 0, 0): 0.25, (16, 0, 0): -0.75}))
    assert np.allclose(pts, [[0.155 + 0.25 * 0.01, 0.005, 0.005]])


def test_wall_plane_oracle():
    intr = Intrinsics(fx=80, fy=80, cx=40, cy=30, width=80, height=60)
    scene = SceneSpec(Box((-1, -1, -1), (2.0, 1, 1)), ())
    frames = []
    for i, y in enumerate((-0.1, 0.0, 0.1)):
        pose = look_at((0.5, y, 0), (2.0, y, 0))
        frames.append(DepthFrame(i, intr, pose, quantize_depth(render_depth(scene, intr, pose), intr)))
    cfg = FusionConfig()
    g = new_grid(cfg)
    fuse_sequence(g, frames, cfg)
    pts = extract_surface(g)
    near = pts[np.abs(pts[:, 1]) < 0.3]
    assert len(near) > 100
    dev = near[:, 0] - 2.0
    assert np.abs(dev).max() <= 0.005
    assert np.sqrt(np.mean(dev ** 2)) <= 0.0025


def test_fscore_identical_and_empty(rng):
    pts = rng.random((500, 3))
    r = fscore(pts, pts)
    assert (r.precision, r.recall, r.fscore) == (1.0, 1.0, 1.0)
    e = fscore(np.empty((0, 3)), pts)
    assert (e.precision, e.recall, e.fscore) == (0.0, 0.0, 0.0)
    with pytest.raises(EmptyGroundTruth):
        fscore(pts, np.empty((0, 3)))
    with pytest.raises(ValueError):
        fscore(pts, pts, tau=0)


def test_fscore_half_tau_offset(rng):
    gt = rng.random((800, 3))
    r = fscore(gt + np.array([0.025, 0, 0]), gt, 0.05)
    assert (r.precision, r.recall, r.fscore) == (1.0, 1.0, 1.0)


def test_fscore_far_clouds(rng):
    a = rng.random((100, 3))
    assert fscore(a + 10, a).fscore == 0.0


@pytest.mark.parametrize("seed", range(25))
def test_fscore_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n, m = rng.integers(1, 2000, size=2)
    tau = float(rng.choice([0.01, 0.05, 0.2]))
    a = rng.random((n, 3)) * rng.uniform(0.1, 2)
    b = rng.random((m, 3)) * rng.uniform(0.1, 2)
    r = fscore(a, b, tau)
    assert (r.precision, r.recall, r.fscore) == brute_fscore(a, b, tau)


def test_within_tau_exact_boundary():
    q = np.array([[0.0, 0.0, 0.0]])
    t = np.array([[0.05, 0.0, 0.0]])
    assert within_tau(q, t, 0.05).tolist() == [True]
    assert within_tau(q, t * 1.000001, 0.05).tolist() == [False]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 0.3))
def test_symmetry_and_rigid_invariance(seed, tau):
    rng = np.random.default_rng(seed)
    a, b = rng.random((200, 3)), rng.random((150, 3))
    r1, r2 = fscore(a, b, tau), fscore(b, a, tau)
    assert r1.precision == r2.recall and r1.recall == r2.precision
    # a quarter turn about z is exact in floating point, so decisions cannot move
    rot = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    r3 = fscore(a @ rot.T, b @ rot.T, tau)
    assert (r3.precision, r3.recall) == (r1.precision, r1.recall)
    shift = np.array([1.0, -2.0, 0.5])
    r4 = fscore(a + shift, b + shift, tau)
    assert r4.fscore == pytest.approx(r1.fscore, abs=0.011)  # a boundary pair may round across


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_monotone_in_tau(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((150, 3)), rng.random((150, 3))
    prev = (0.0, 0.0)
    for tau in (0.01, 0.03, 0.1, 0.3):
        r = fscore(a, b, tau)
        assert r.precision >= prev[0] and r.recall >= prev[1]
        prev = (r.precision, r.recall)


def test_accuracy_loss_examples():
    assert accuracy_loss(0.90, 0.90) == 0
    assert accuracy_loss(0.88, 0.90) == pytest.approx(0.02)


def test_xyz_round_trip(tmp_path, rng):
    pts = rng.random((20, 3))
    write_xyz(tmp_path / "a.xyz", pts)
    lines = (tmp_path / "a.xyz").read_text().splitlines()
    assert len(lines) == 20 and len(lines[0].split()[0].split(".")[1]) == 6
    assert np.allclose(read_xyz(tmp_path / "a.xyz"), pts, atol=5e-7)
    (tmp_path / "e.xyz").write_text("")
    assert read_xyz(tmp_path / "e.xyz").shape == (0, 3)
