import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsdf_dse.geometry import (DegenerateProjection, Intrinsics, InvalidDepth, Pose, back_project,
                               camera_to_world, look_at, pixel_index, project, world_to_camera)

VGA = Intrinsics(fx=500, fy=500, cx=320, cy=240, width=640, height=480)

finite = st.floats(-5, 5, allow_nan=False)
vec3 = st.tuples(finite, finite, finite)


def random_pose(seed):
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q @ np.diag(np.sign(np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return Pose(q, rng.normal(size=3))


def test_identity_world_to_camera():
    assert np.allclose(world_to_camera(Pose.identity(), [1, 2, 3]), [1, 2, 3])


def test_translation_inverse():
    pose = Pose(np.eye(3), (1, 0, 0))
    assert np.allclose(world_to_camera(pose, [1, 0, 0]), [0, 0, 0])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10_000), vec3)
def test_world_camera_round_trip(seed, p):
    pose = random_pose(seed)
    back = camera_to_world(pose, world_to_camera(pose, p))
    assert np.allclose(back, p, atol=1e-9, rtol=0)


def test_project_principal_axis():
    px = project(VGA, (0, 0, 2))
    assert (px.u, px.v, px.z) == (320, 240, 2)


def test_project_formula():
    px = project(VGA, (0.1, 0, 1))
    assert px.u == pytest.approx(370) and px.v == pytest.approx(240) and px.z == 1


def test_project_zero_depth_raises():
    with pytest.raises(DegenerateProjection):
        project(VGA, (1, 1, 0))


def test_project_keeps_negative_z():
    assert project(VGA, (0, 0, -1)).z == -1


def test_back_project_examples():
    assert np.allclose(back_project(VGA, 320, 240, 2), [0, 0, 2])
    assert np.allclose(back_project(VGA, 370, 240, 1), [0.1, 0, 1])


@pytest.mark.parametrize("depth", [0.0, -1.0])
def test_back_project_rejects_nonpositive_depth(depth):
    with pytest.raises(InvalidDepth):
        back_project(VGA, 10, 10, depth)


@settings(max_examples=200, deadline=None)
@given(st.floats(-50, 700), st.floats(-50, 500), st.floats(0.05, 20))
def test_project_back_project_identity(u, v, z):
    px = project(VGA, back_project(VGA, u, v, z))
    assert px.u == pytest.approx(u, rel=1e-9, abs=1e-9)
    assert px.v == pytest.approx(v, rel=1e-9, abs=1e-9)
    assert px.z == pytest.approx(z, rel=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 10_000))
def test_compose_stays_orthonormal(a, b):
    c = random_pose(a)
    for _ in range(20):
        c = c.compose(random_pose(b))
    r = c.rotation
    assert np.allclose(r.T @ r, np.eye(3), atol=1e-6)
    assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-6)


def test_pose_validation():
    with pytest.raises(ValueError):
        Pose(np.diag([1.0, 1.0, -1.0]), (0, 0, 0))
    with pytest.raises(ValueError):
        Pose(np.eye(3) * 1.1, (0, 0, 0))


def test_pose_inverse_and_matrix():
    p = random_pose(7)
    assert np.allclose(p.matrix() @ p.inverse().matrix(), np.eye(4), atol=1e-12)
    assert np.allclose(Pose.from_matrix(p.matrix()).matrix(), p.matrix())


@pytest.mark.parametrize("kw", [dict(fx=0), dict(cx=640), dict(cy=-1), dict(depth_scale=0)])
def test_intrinsics_validation(kw):
    args = dict(fx=500, fy=500, cx=320, cy=240, width=640, height=480)
    args.update(kw)
    with pytest.raises(ValueError):
        Intrinsics(**args)


def test_intrinsics_dict_round_trip():
    assert Intrinsics.from_dict(VGA.to_dict()) == VGA


def test_pixel_index_rounds_half_up():
    u, v = pixel_index(np.array([0.5, 1.49, -0.5]), np.array([2.5, 2.4999, 0.0]))
    assert list(u) == [1, 1, 0] and list(v) == [3, 2, 0]


def test_look_at_points_optical_axis_at_target():
    pose = look_at((1, 2, 1), (0, 0, 0))
    pc = world_to_camera(pose, (0, 0, 0))
    assert np.allclose(pc[:2], 0, atol=1e-12) and pc[2] == pytest.approx(np.sqrt(6))
