"""Synthetic stereo-sequence renderer with exact per-pixel ground truth.

Scenes are textured planes and axis-aligned boxes ray-cast analytically,
so rendered depth is exact and the procedural texture (a band-limited sum
of cosines over world position) is alias-free at test scales and
view-consistent between the two cameras.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry as geo
from .datasets import StereoFrame, Trajectory
from .depth import DepthMap
from .errors import IndexOutOfRange
from .geometry import RigidTransform, StereoRig
from .imaging import Image

_RAY_EPS = 1e-9


@dataclass(frozen=True)
class Plane:
    """Plane through `point` with normal `normal`; infinite when extent
    is None, else a rectangle with half-sizes along two in-plane axes."""

    point: np.ndarray
    normal: np.ndarray
    extent: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "point", np.asarray(self.point, dtype=float))
        n = np.asarray(self.normal, dtype=float)
        object.__setattr__(self, "normal", n / np.linalg.norm(n))

    def axes(self):
        n = self.normal
        ref = np.array([0.0, 1.0, 0.0]) if abs(n[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        u = np.cross(ref, n)
        u /= np.linalg.norm(u)
        return u, np.cross(n, u)

    def intersect(self, origin, dirs):
        denom = dirs @ self.normal
        num = (self.point - origin) @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(np.abs(denom) > _RAY_EPS, num / denom, np.inf)
        s = np.where(s > _RAY_EPS, s, np.inf)
        if self.extent is not None:
            u, v = self.axes()
            hit = origin + s[:, None] * dirs
            rel = hit - self.point
            inside = (np.abs(rel @ u) <= self.extent[0]) & (
                np.abs(rel @ v) <= self.extent[1]
            )
            s = np.where(inside, s, np.inf)
        return s


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by min and max corners (world frame)."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float))

    def intersect(self, origin, dirs):
        parallel = np.abs(dirs) <= _RAY_EPS
        safe = np.where(parallel, 1.0, dirs)
        t1 = (self.lo - origin) / safe
        t2 = (self.hi - origin) / safe
        # Rays parallel to a slab: inside spans everything, outside misses.
        inside = (origin >= self.lo) & (origin <= self.hi)
        t1 = np.where(parallel, np.where(inside, -np.inf, np.inf), t1)
        t2 = np.where(parallel, np.where(inside, np.inf, -np.inf), t2)
        near = np.minimum(t1, t2).max(axis=1)
        far = np.maximum(t1, t2).min(axis=1)
        s = np.where((far >= near) & (far > _RAY_EPS), np.where(near > _RAY_EPS, near, far), np.inf)
        return s


@dataclass(frozen=True)
class Texture:
    """Band-limited value noise: sum of random-direction cosines."""

    seed: int = 0
    contrast: float = 0.35
    scale: float = 0.6
    waves: int = 12

    def _components(self):
        rng = np.random.default_rng(self.seed)
        dirs = rng.standard_normal((self.waves, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        wavelengths = rng.uniform(0.4 * self.scale, 1.6 * self.scale, self.waves)
        phases = rng.uniform(0, 2 * np.pi, self.waves)
        amps = rng.uniform(0.4, 1.0, self.waves)
        amps /= amps.sum()
        return dirs, 2 * np.pi / wavelengths, phases, amps

    def sample(self, points):
        """Intensity in [0.5 - contrast, 0.5 + contrast] at (N, 3) points."""
        dirs, freqs, phases, amps = self._components()
        phase = points @ (dirs * freqs[:, None]).T + phases
        return 0.5 + self.contrast * (np.cos(phase) @ amps)


@dataclass
class SyntheticScene:
    rig: StereoRig
    trajectory: Trajectory
    primitives: list
    texture: Texture = field(default_factory=Texture)
    noise_sigma: float = 0.0
    right_offset: float = 0.0
    seed: int = 0


def _ray_dirs(intrinsics):
    ys, xs = np.mgrid[0 : intrinsics.height, 0 : intrinsics.width]
    dirs = np.stack(
        [
            (xs - intrinsics.cx) / intrinsics.fx,
            (ys - intrinsics.cy) / intrinsics.fy,
            np.ones_like(xs, dtype=float),
        ],
        axis=-1,
    )
    return dirs.reshape(-1, 3)


def _render_camera(scene, pose_cw, cam_index, frame_index, offset):
    """Ray-cast one camera. pose_cw maps camera coords to world coords.
    Ray parameter s equals camera z-depth because rays have unit z in the
    camera frame."""
    intr = scene.rig.intrinsics
    dirs_cam = _ray_dirs(intr)
    dirs_world = dirs_cam @ pose_cw.rotation.T
    origin = pose_cw.translation

    depth = np.full(len(dirs_world), np.inf)
    for prim in scene.primitives:
        depth = np.minimum(depth, prim.intersect(origin, dirs_world))
    hit = np.isfinite(depth)

    intensity = np.zeros(len(dirs_world))
    if hit.any():
        pts = origin + depth[hit, None] * dirs_world[hit]
        intensity[hit] = scene.texture.sample(pts)
    intensity += offset
    if scene.noise_sigma > 0:
        rng = np.random.default_rng([scene.seed, frame_index, cam_index])
        intensity = intensity + rng.normal(0, scene.noise_sigma, intensity.shape)

    h, w = intr.height, intr.width
    return Image(intensity.reshape(h, w)), depth.reshape(h, w), hit.reshape(h, w)


def render(scene: SyntheticScene, frame_index: int):
    """Render a stereo frame plus the left camera's ground-truth depth map."""
    if not 0 <= frame_index < len(scene.trajectory):
        raise IndexOutOfRange(f"frame {frame_index} of {len(scene.trajectory)}")
    t, pose_cw = scene.trajectory[frame_index]

    left, depth, hit = _render_camera(scene, pose_cw, 0, frame_index, 0.0)
    # Right camera center sits one baseline along the camera x axis.
    right_cw = geo.compose(
        pose_cw, RigidTransform(np.eye(3), [scene.rig.baseline, 0.0, 0.0])
    )
    right, _, _ = _render_camera(scene, right_cw, 1, frame_index, scene.right_offset)

    gt = DepthMap.empty(*depth.shape)
    gt.mask = hit
    gt.d[hit] = 1.0 / depth[hit]
    gt.var[hit] = 1e-8
    return StereoFrame(t, left, right, scene.rig), gt


def make_loop_trajectory(radius, count, dt=0.1) -> Trajectory:
    """Circular camera path, viewing tangentially, closing on itself."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    if count < 8:
        raise ValueError("need at least 8 poses")
    poses = []
    thetas = np.linspace(0.0, 2 * np.pi, count)
    for theta in thetas:
        pos = np.array([radius * np.cos(theta), 0.0, radius * np.sin(theta)])
        forward = np.array([-np.sin(theta), 0.0, np.cos(theta)])
        down = np.array([0.0, 1.0, 0.0])
        right = np.cross(down, forward)
        r_cw = np.stack([right, down, forward], axis=1)
        poses.append(RigidTransform(r_cw, pos))
    return Trajectory(np.arange(count) * dt, poses)


def make_motion_trajectory(count, step: geo.Twist, start=None, dt=0.1) -> Trajectory:
    """Constant-velocity path: each frame moves by `step` in the previous
    camera's frame."""
    pose = start if start is not None else RigidTransform.identity()
    step_t = geo.exp_map(step)
    poses = [pose]
    for _ in range(count - 1):
        pose = geo.compose(pose, step_t)
        poses.append(pose)
    return Trajectory(np.arange(count) * dt, poses)


# --- declarative scene files ---


def load_scene(path) -> SyntheticScene:
    """Parse a scene description: one record per line, '#' comments.

    camera fx fy cx cy width height baseline
    texture seed contrast scale [waves]
    noise sigma [right_offset]
    plane px py pz nx ny nz [half_u half_v]
    box xmin ymin zmin xmax ymax zmax
    trajectory loop radius count
    trajectory line count vx vy vz wx wy wz
    """
    rig = None
    texture = Texture()
    primitives = []
    trajectory = None
    noise_sigma = 0.0
    right_offset = 0.0
    seed = 0

    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        kind, *args = line.split()
        if kind == "camera":
            fx, fy, cx, cy, w, h, b = (float(v) for v in args)
            rig = StereoRig(
                geo.CameraIntrinsics(fx, fy, cx, cy, int(w), int(h)), b
            )
        elif kind == "texture":
            seed = int(args[0])
            texture = Texture(
                seed=seed,
                contrast=float(args[1]),
                scale=float(args[2]),
                waves=int(args[3]) if len(args) > 3 else 12,
            )
        elif kind == "noise":
            noise_sigma = float(args[0])
            if len(args) > 1:
                right_offset = float(args[1])
        elif kind == "plane":
            vals = [float(v) for v in args]
            extent = (vals[6], vals[7]) if len(vals) >= 8 else None
            primitives.append(Plane(vals[:3], vals[3:6], extent))
        elif kind == "box":
            vals = [float(v) for v in args]
            primitives.append(Box(vals[:3], vals[3:6]))
        elif kind == "trajectory":
            if args[0] == "loop":
                trajectory = make_loop_trajectory(float(args[1]), int(args[2]))
            elif args[0] == "line":
                count = int(args[1])
                step = geo.Twist([float(v) for v in args[2:5]], [float(v) for v in args[5:8]])
                trajectory = make_motion_trajectory(count, step)
            else:
                raise ValueError(f"{path}:{lineno}: unknown trajectory {args[0]!r}")
        else:
            raise ValueError(f"{path}:{lineno}: unknown record {kind!r}")

    if rig is None or trajectory is None or not primitives:
        raise ValueError(f"{path}: scene needs camera, trajectory, and geometry")
    return SyntheticScene(rig, trajectory, primitives, texture, noise_sigma, right_offset, seed)
