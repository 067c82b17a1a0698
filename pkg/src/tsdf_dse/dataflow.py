"""Depth sequences: on-disk format, synthetic generation, frame sampling, redundancy.

Sequence directory layout::

    intrinsics.json   {"fx", "fy", "cx", "cy", "width", "height", "depth_scale"}
    frames.jsonl      one {"index": int, "depth": "depth/000000.d16", "pose": [16 floats]}
                      per line; pose is the row-major 4x4 camera-to-world matrix
    depth/*.d16       b"D16\\0", u32 width, u32 height, width*height u16 (all little-endian)
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .geometry import Intrinsics, Pose, back_project, camera_to_world, look_at, pixel_index, world_to_camera

D16_MAGIC = b"D16\x00"
MAX_DEPTH_M = 20.0
SOURCE_FPS = 30.0
SAMPLING_RATES = (30.0, 15.0, 7.5, 3.75, 2.0, 1.0)


class LoadError(Exception):
    """A sequence file is missing or malformed."""


class FormatError(LoadError):
    """A depth raster does not match its declared layout."""


# ---------------------------------------------------------------------------
# frames and rasters


def write_d16(path: str | Path, raw: np.ndarray) -> None:
    raw = np.asarray(raw)
    if raw.ndim != 2:
        raise ValueError("depth raster must be 2-D")
    h, w = raw.shape
    with open(path, "wb") as f:
        f.write(D16_MAGIC)
        f.write(struct.pack("<II", w, h))
        f.write(raw.astype("<u2").tobytes())


def read_d16(path: str | Path, expect_shape: tuple[int, int] | None = None) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise LoadError(f"{path}: {e.strerror or e}") from e
    if len(data) < 12 or data[:4] != D16_MAGIC:
        raise FormatError(f"{path}: missing D16 header")
    w, h = struct.unpack("<II", data[4:12])
    if len(data) != 12 + 2 * w * h:
        raise FormatError(f"{path}: expected {w}x{h} raster, got {len(data) - 12} payload bytes")
    if expect_shape is not None and (h, w) != expect_shape:
        raise FormatError(f"{path}: raster is {w}x{h}, intrinsics say {expect_shape[1]}x{expect_shape[0]}")
    return np.frombuffer(data, dtype="<u2", offset=12).reshape(h, w).astype(np.uint16)


class DepthFrame:
    """One posed depth image.

    ``raw`` holds u16 depth units (0 = invalid); ``depth`` is meters and is
    computed on first access.  Frames loaded from disk read their raster lazily.
    """

    def __init__(self, index: int, intr: Intrinsics, pose: Pose, raw: np.ndarray | None = None, path=None):
        self.index = int(index)
        self.intr = intr
        self.pose = pose
        self._raw = None
        self._depth = None
        self._path = None if path is None else Path(path)
        if raw is not None:
            self._set_raw(raw)
        elif self._path is None:
            raise ValueError("frame needs a raster or a path")

    def _set_raw(self, raw) -> None:
        raw = np.asarray(raw)
        if raw.shape != (self.intr.height, self.intr.width):
            raise FormatError(
                f"raster shape {raw.shape} does not match {self.intr.width}x{self.intr.height}"
            )
        raw = raw.astype(np.uint16, copy=True)
        if raw.max(initial=0) * self.intr.depth_scale > MAX_DEPTH_M:
            raise ValueError(f"depth exceeds {MAX_DEPTH_M} m")
        raw.flags.writeable = False
        self._raw = raw

    @property
    def raw(self) -> np.ndarray:
        if self._raw is None:
            self._set_raw(read_d16(self._path, (self.intr.height, self.intr.width)))
        return self._raw

    @property
    def depth(self) -> np.ndarray:
        if self._depth is None:
            d = self.raw.astype(np.float64) * self.intr.depth_scale
            d.flags.writeable = False
            self._depth = d
        return self._depth

    @property
    def valid(self) -> np.ndarray:
        return self.raw > 0

    def __repr__(self) -> str:
        return f"DepthFrame(index={self.index}, {self.intr.width}x{self.intr.height})"


# ---------------------------------------------------------------------------
# sequence I/O


def _read_json(path: Path):
    try:
        return json.loads(path.read_text())
    except OSError as e:
        raise LoadError(f"{path}: {e.strerror or e}") from e
    except json.JSONDecodeError as e:
        raise LoadError(f"{path}: malformed JSON ({e})") from e


def load_intrinsics(directory: str | Path) -> Intrinsics:
    path = Path(directory) / "intrinsics.json"
    d = _read_json(path)
    try:
        return Intrinsics.from_dict(d)
    except (KeyError, TypeError, ValueError) as e:
        raise LoadError(f"{path}: invalid intrinsics ({e})") from e


def load_sequence(directory: str | Path) -> Iterator[DepthFrame]:
    """Yield frames in manifest order. Rasters are read when first accessed."""
    directory = Path(directory)
    intr = load_intrinsics(directory)
    manifest = directory / "frames.jsonl"
    try:
        lines = manifest.read_text().splitlines()
    except OSError as e:
        raise LoadError(f"{manifest}: {e.strerror or e}") from e
    entries = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            pose = np.asarray(rec["pose"], dtype=np.float64)
            if pose.size != 16:
                raise ValueError("pose must have 16 numbers")
            entries.append((int(rec["index"]), directory / rec["depth"], Pose.from_matrix(pose)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise LoadError(f"{manifest}:{lineno}: {e}") from e
    for index, path, pose in entries:
        if not path.is_file():
            raise LoadError(f"{path}: referenced depth file not found")
        yield DepthFrame(index, intr, pose, path=path)


def write_sequence(directory: str | Path, frames: Iterable[DepthFrame]) -> int:
    directory = Path(directory)
    (directory / "depth").mkdir(parents=True, exist_ok=True)
    intr = None
    n = 0
    with open(directory / "frames.jsonl", "w") as manifest:
        for frame in frames:
            if intr is None:
                intr = frame.intr
                (directory / "intrinsics.json").write_text(json.dumps(intr.to_dict(), indent=2) + "\n")
            elif frame.intr != intr:
                raise ValueError("all frames in a sequence must share intrinsics")
            rel = f"depth/{frame.index:06d}.d16"
            write_d16(directory / rel, frame.raw)
            rec = {"index": frame.index, "depth": rel, "pose": [float(x) for x in frame.pose.matrix().ravel()]}
            manifest.write(json.dumps(rec) + "\n")
            n += 1
    if intr is None:
        raise ValueError("cannot write a sequence without frames (intrinsics unknown)")
    return n


# ---------------------------------------------------------------------------
# analytic scenes


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def __post_init__(self):
        if not all(a < b for a, b in zip(self.lo, self.hi)):
            raise ValueError(f"box min {self.lo} must be below max {self.hi}")

    def contains(self, other: "Box | Sphere") -> bool:
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        if isinstance(other, Box):
            return bool(np.all(np.asarray(other.lo) >= lo) and np.all(np.asarray(other.hi) <= hi))
        c = np.asarray(other.center)
        return bool(np.all(c - other.radius >= lo) and np.all(c + other.radius <= hi))

    def slabs(self, o: np.ndarray, d: np.ndarray):
        """Entry and exit ray parameters for rays ``o + s * d``."""
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - o) / d
            t2 = (hi - o) / d
        # zero direction components: inside slab -> unbounded, outside -> empty
        par = d == 0
        inside = (o >= lo) & (o <= hi)
        t1 = np.where(par, np.where(inside, -np.inf, np.inf), t1)
        t2 = np.where(par, np.where(inside, np.inf, -np.inf), t2)
        near = np.minimum(t1, t2).max(axis=-1)
        far = np.maximum(t1, t2).min(axis=-1)
        return near, far

    def faces(self):
        """Yield (origin, edge_a, edge_b) for the six faces."""
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        ext = hi - lo
        for axis in range(3):
            a, b = [k for k in range(3) if k != axis]
            ea = np.zeros(3)
            eb = np.zeros(3)
            ea[a] = ext[a]
            eb[b] = ext[b]
            for side in (lo, hi):
                origin = lo.copy()
                origin[axis] = side[axis]
                yield origin, ea, eb

    def to_dict(self) -> dict:
        return {"type": "box", "min": list(self.lo), "max": list(self.hi)}


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")

    def to_dict(self) -> dict:
        return {"type": "sphere", "center": list(self.center), "radius": self.radius}


@dataclass(frozen=True)
class SceneSpec:
    room: Box
    objects: tuple = ()

    def __post_init__(self):
        for obj in self.objects:
            if not self.room.contains(obj):
                raise ValueError(f"{obj} is not inside the room")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        room = d["room"]
        objs = []
        for o in d.get("objects", []):
            if o["type"] == "box":
                objs.append(Box(tuple(map(float, o["min"])), tuple(map(float, o["max"]))))
            elif o["type"] == "sphere":
                objs.append(Sphere(tuple(map(float, o["center"])), float(o["radius"])))
            else:
                raise ValueError(f"unknown primitive type {o['type']!r}")
        return cls(Box(tuple(map(float, room["min"])), tuple(map(float, room["max"]))), tuple(objs))

    def to_dict(self) -> dict:
        return {"room": {"min": list(self.room.lo), "max": list(self.room.hi)},
                "objects": [o.to_dict() for o in self.objects]}

    @property
    def center(self) -> np.ndarray:
        return (np.asarray(self.room.lo) + np.asarray(self.room.hi)) / 2

    def raycast(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        """First positive hit parameter ``s`` for rays ``o + s * d`` (inf on miss).

        ``o`` is a 3-vector or broadcastable array, ``d`` is ``(..., 3)``.
        """
        o = np.broadcast_to(np.asarray(o, dtype=np.float64), d.shape)
        near, far = self.room.slabs(o, d)
        best = np.where(near > 0, near, np.where(far > 0, far, np.inf))
        best = np.where(near <= far, best, np.inf)
        for obj in self.objects:
            if isinstance(obj, Box):
                near, far = obj.slabs(o, d)
                hit = (near <= far) & (near > 0)
                best = np.where(hit & (near < best), near, best)
            else:
                oc = o - np.asarray(obj.center)
                a = np.einsum("...i,...i->...", d, d)
                b = np.einsum("...i,...i->...", d, oc)
                c = np.einsum("...i,...i->...", oc, oc) - obj.radius**2
                disc = b * b - a * c
                ok = disc >= 0
                s = np.where(ok, (-b - np.sqrt(np.where(ok, disc, 0.0))) / a, np.inf)
                hit = ok & (s > 0)
                best = np.where(hit & (s < best), s, best)
        return best

    def surface_area(self) -> float:
        return sum(_surface_area(p) for p in (self.room, *self.objects))


def _surface_area(prim) -> float:
    if isinstance(prim, Box):
        return float(sum(np.linalg.norm(np.cross(a, b)) for _, a, b in prim.faces()))
    return 4 * math.pi * prim.radius**2


def default_scene() -> SceneSpec:
    """A small room with a table-like box, a crate and a ball."""
    return SceneSpec(
        room=Box((0.0, 0.0, 0.0), (1.6, 1.6, 1.2)),
        objects=(
            Box((0.55, 0.60, 0.0), (1.05, 1.00, 0.35)),
            Box((0.15, 1.15, 0.0), (0.45, 1.45, 0.25)),
            Sphere((1.20, 0.45, 0.15), 0.15),
        ),
    )


def default_intrinsics() -> Intrinsics:
    return Intrinsics(fx=120.0, fy=120.0, cx=80.0, cy=60.0, width=160, height=120, depth_scale=0.001)


# ---------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True)
class Trajectory:
    """Camera path.

    ``orbit``: circle of ``radius`` around the room center at ``height``,
    looking at ``target`` (room center at ``target_height``), advancing
    ``speed`` rad/s.  ``lawnmower``: back-and-forth sweep along x at
    ``speed`` m/s over ``radius`` half-width, facing +y.  ``static``: a fixed
    pose, for tests only.
    """

    kind: str = "orbit"
    frame_count: int = 90
    frame_rate: float = SOURCE_FPS
    radius: float = 0.35
    height: float = 0.75
    speed: float = 0.35
    target_height: float = 0.3
    start_angle: float = 0.0

    def __post_init__(self):
        if self.kind not in ("orbit", "lawnmower", "static"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.frame_count < 1:
            raise ValueError("trajectory needs at least one frame")
        if self.frame_rate <= 0:
            raise ValueError("frame_rate must be positive")
        if self.kind != "static" and (self.speed == 0 or self.radius <= 0):
            raise ValueError("degenerate trajectory: moving kinds need nonzero speed and radius")

    def poses(self, scene: SceneSpec) -> list[Pose]:
        c = scene.center
        target = np.array([c[0], c[1], self.target_height])
        out = []
        for i in range(self.frame_count):
            t = i / self.frame_rate
            if self.kind == "static":
                eye = np.array([c[0] - self.radius, c[1], self.height])
            elif self.kind == "orbit":
                a = self.start_angle + self.speed * t
                eye = np.array([c[0] + self.radius * math.cos(a), c[1] + self.radius * math.sin(a), self.height])
            else:
                # triangle wave along x, stepping down 5 cm per pass
                period = 4 * self.radius / abs(self.speed)
                phase = (t % period) / period
                x = c[0] + self.radius * (4 * phase - 1 if phase < 0.5 else 3 - 4 * phase)
                passes = int(t // (period / 2))
                eye = np.array([x, scene.room.lo[1] + 0.25, self.height - 0.05 * (passes % 4)])
                out.append(look_at(eye, eye + np.array([0.0, 1.0, -0.35])))
                continue
            out.append(look_at(eye, target))
        return out


# ---------------------------------------------------------------------------
# synthetic generation


def render_depth(scene: SceneSpec, intr: Intrinsics, pose: Pose) -> np.ndarray:
    """Exact camera-space z of the first hit per pixel; inf where nothing is hit."""
    u, v = np.meshgrid(np.arange(intr.width, dtype=np.float64), np.arange(intr.height, dtype=np.float64))
    rays_cam = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)
    rays = rays_cam @ pose.rotation.T
    # rays have unit camera-z, so the hit parameter is the depth itself
    return scene.raycast(pose.translation, rays)


def quantize_depth(depth_m: np.ndarray, intr: Intrinsics) -> np.ndarray:
    ok = np.isfinite(depth_m) & (depth_m > 0) & (depth_m <= MAX_DEPTH_M)
    units = np.zeros(depth_m.shape, dtype=np.uint16)
    q = np.floor(depth_m[ok] / intr.depth_scale + 0.5)
    units[ok] = np.clip(q, 0, min(65535, math.floor(MAX_DEPTH_M / intr.depth_scale))).astype(np.uint16)
    return units


def sample_surfaces(scene: SceneSpec, density: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform random points on every primitive surface, ``density`` points per m^2."""
    chunks = []
    for prim in (scene.room, *scene.objects):
        if isinstance(prim, Box):
            for origin, ea, eb in prim.faces():
                area = np.linalg.norm(np.cross(ea, eb))
                n = math.ceil(density * area)
                st = rng.random((n, 2))
                chunks.append(origin + st[:, :1] * ea + st[:, 1:] * eb)
        else:
            n = math.ceil(density * 4 * math.pi * prim.radius**2)
            g = rng.normal(size=(n, 3))
            g /= np.linalg.norm(g, axis=1, keepdims=True)
            chunks.append(np.asarray(prim.center) + prim.radius * g)
    return np.concatenate(chunks)


def visible_mask(scene: SceneSpec, points: np.ndarray, intr: Intrinsics, poses: Sequence[Pose],
                 tol: float = 1e-6) -> np.ndarray:
    """Points seen unoccluded and inside the image by at least one pose."""
    seen = np.zeros(len(points), dtype=bool)
    for pose in poses:
        todo = np.flatnonzero(~seen)
        if todo.size == 0:
            break
        p = points[todo]
        pc = world_to_camera(pose, p)
        z = pc[:, 2]
        front = z > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            ui, vi = pixel_index(intr.fx * pc[:, 0] / z + intr.cx, intr.fy * pc[:, 1] / z + intr.cy)
        inside = front & (ui >= 0) & (ui < intr.width) & (vi >= 0) & (vi < intr.height) & (z <= MAX_DEPTH_M)
        cand = todo[inside]
        if cand.size == 0:
            continue
        d = points[cand] - pose.translation
        s = scene.raycast(pose.translation, d)
        dist = np.linalg.norm(d, axis=1)
        seen[cand[(1.0 - s) * dist <= tol]] = True
    return seen


def generate_synthetic(scene: SceneSpec, traj: Trajectory, intr: Intrinsics | None = None, seed: int = 0,
                       noise: float = 0.0, voxel_size: float = 0.01,
                       gt_density: float = 4.0) -> tuple[list[DepthFrame], np.ndarray]:
    """Render a depth sequence and the visible ground-truth surface cloud.

    Ground truth holds ``gt_density`` points per ``voxel_size**2`` of surface,
    restricted to points some frame sees.
    """
    if noise < 0:
        raise ValueError("noise must be non-negative")
    intr = intr or default_intrinsics()
    poses = traj.poses(scene)
    if traj.kind != "static" and len(poses) > 1:
        if any(np.allclose(a.matrix(), b.matrix()) for a, b in zip(poses, poses[1:])):
            raise ValueError("degenerate trajectory: consecutive poses coincide")
    rng = np.random.default_rng(seed)
    frames = []
    for i, pose in enumerate(poses):
        depth = render_depth(scene, intr, pose)
        if noise > 0:
            depth = depth + rng.normal(0.0, noise, depth.shape)
        frames.append(DepthFrame(i, intr, pose, quantize_depth(depth, intr)))
    pts = sample_surfaces(scene, gt_density / voxel_size**2, rng)
    gt = pts[visible_mask(scene, pts, intr, poses)]
    return frames, gt


# ---------------------------------------------------------------------------
# sampling and redundancy


@dataclass(frozen=True)
class SamplingConfig:
    target_fps: float = SOURCE_FPS
    source_fps: float = SOURCE_FPS

    def __post_init__(self):
        ratio = self.source_fps / self.target_fps
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError(f"{self.target_fps} FPS is not an integral subsample of {self.source_fps} FPS")

    @property
    def stride(self) -> int:
        return int(round(self.source_fps / self.target_fps))


def sample_uniform(stream: Iterable[DepthFrame], cfg: SamplingConfig) -> Iterator[DepthFrame]:
    stride = cfg.stride
    for frame in stream:
        if frame.index % stride == 0:
            yield frame


def redundancy(current: DepthFrame, last_fused: DepthFrame, tol: float = 0.05) -> float:
    """Share of current valid pixels already observed (within ``tol``) by ``last_fused``."""
    valid = current.valid
    total = int(valid.sum())
    if total == 0:
        return 0.0
    v, u = np.nonzero(valid)
    pts = back_project(current.intr, u, v, current.depth[v, u])
    world = camera_to_world(current.pose, pts)
    pc = world_to_camera(last_fused.pose, world)
    z = pc[:, 2]
    intr = last_fused.intr
    front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        ui, vi = pixel_index(intr.fx * pc[:, 0] / z + intr.cx, intr.fy * pc[:, 1] / z + intr.cy)
    inside = front & (ui >= 0) & (ui < intr.width) & (vi >= 0) & (vi < intr.height)
    ok = np.zeros(total, dtype=bool)
    ui, vi = ui[inside], vi[inside]
    dl = last_fused.depth[vi, ui]
    ok[inside] = (last_fused.raw[vi, ui] > 0) & (np.abs(dl - z[inside]) <= tol)
    return float(ok.sum()) / total
