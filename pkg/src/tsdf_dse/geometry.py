"""Pinhole camera model and rigid camera-to-world poses.

Every function here accepts either a single 3-vector or an ``(..., 3)`` array
of points.  Transforms are written out component by component instead of going
through ``@`` so that results do not depend on BLAS blocking: the fusion engine
relies on bitwise-reproducible voxel coordinates for any batch size.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

ORTHO_TOL = 1e-6


class DegenerateProjection(ValueError):
    """Raised when projecting a point that lies on the camera plane (z == 0)."""


class InvalidDepth(ValueError):
    """Raised when back-projecting with a non-positive depth."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 0.001

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )
        if not self.depth_scale > 0:
            raise ValueError(f"depth_scale must be positive, got {self.depth_scale}")

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "depth_scale": self.depth_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
            depth_scale=float(d["depth_scale"]),
        )


@dataclass(frozen=True, eq=False)
class Pose:
    """Camera-to-world rigid transform: ``p_world = R @ p_cam + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=ORTHO_TOL, rtol=0):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation determinant is not +1")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -(rt @ self.translation))

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        r = self.rotation @ other.rotation
        # re-orthonormalize so long chains stay within tolerance
        u, _, vt = np.linalg.svd(r)
        r = u @ vt
        return Pose(r, self.rotation @ other.translation + self.translation)

    @property
    def position(self) -> np.ndarray:
        return self.translation


class PixelCoord(NamedTuple):
    u: float
    v: float
    z: float


def _rotate_t(r: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Compute ``R.T @ p`` along the last axis, elementwise."""
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    return np.stack(
        [
            r[0, 0] * x + r[1, 0] * y + r[2, 0] * z,
            r[0, 1] * x + r[1, 1] * y + r[2, 1] * z,
            r[0, 2] * x + r[1, 2] * y + r[2, 2] * z,
        ],
        axis=-1,
    )


def _rotate(r: np.ndarray, p: np.ndarray) -> np.ndarray:
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    return np.stack(
        [
            r[0, 0] * x + r[0, 1] * y + r[0, 2] * z,
            r[1, 0] * x + r[1, 1] * y + r[1, 2] * z,
            r[2, 0] * x + r[2, 1] * y + r[2, 2] * z,
        ],
        axis=-1,
    )


def world_to_camera(pose: Pose, p_world) -> np.ndarray:
    p = np.asarray(p_world, dtype=np.float64)
    return _rotate_t(pose.rotation, p - pose.translation)


def camera_to_world(pose: Pose, p_cam) -> np.ndarray:
    p = np.asarray(p_cam, dtype=np.float64)
    return _rotate(pose.rotation, p) + pose.translation


def project(intr: Intrinsics, p_cam) -> PixelCoord:
    """Project camera-space point(s) to continuous pixel coordinates.

    Raises DegenerateProjection if any z is exactly zero; callers that
    classify many voxels check ``z > 0`` themselves and use ``project_array``.
    """
    p = np.asarray(p_cam, dtype=np.float64)
    z = p[..., 2]
    if np.any(z == 0):
        raise DegenerateProjection("point lies on the camera plane (z = 0)")
    u, v = project_array(intr, p[..., 0], p[..., 1], z)
    if p.ndim == 1:
        return PixelCoord(float(u), float(v), float(z))
    return PixelCoord(u, v, z)


def project_array(intr: Intrinsics, x, y, z):
    """Unchecked projection; z must be nonzero where the result is used."""
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * x / z + intr.cx
        v = intr.fy * y / z + intr.cy
    return u, v


def back_project(intr: Intrinsics, u, v, depth) -> np.ndarray:
    depth_arr = np.asarray(depth, dtype=np.float64)
    if np.any(depth_arr <= 0) or np.any(~np.isfinite(depth_arr)):
        raise InvalidDepth("back-projection requires depth > 0")
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    x = (u - intr.cx) * depth_arr / intr.fx
    y = (v - intr.cy) * depth_arr / intr.fy
    return np.stack(np.broadcast_arrays(x, y, depth_arr), axis=-1)


def pixel_index(u, v):
    """Nearest pixel, rounding half up."""
    return np.floor(np.asarray(u) + 0.5).astype(np.int64), np.floor(np.asarray(v) + 0.5).astype(np.int64)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose looking from ``eye`` at ``target`` (x right, y down, z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    n = np.linalg.norm(forward)
    if n == 0:
        raise ValueError("eye and target coincide")
    forward /= n
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    rn = np.linalg.norm(right)
    if rn < 1e-9:
        raise ValueError("viewing direction is parallel to the up vector")
    right /= rn
    down = np.cross(forward, right)
    return Pose(np.stack([right, down, forward], axis=1), eye)
