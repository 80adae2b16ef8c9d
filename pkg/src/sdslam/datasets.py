"""Dataset ingestion and file exchange.

Readers for KITTI odometry and EuRoC ASL stereo layouts, plus the exchange
formats used throughout: TUM trajectory text, binary PLY point clouds.
Trajectory poses are stored camera-to-world, matching the TUM convention.
"""

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry as geo
from .errors import (
    IoFailure,
    MalformedCalibration,
    MalformedLine,
    MissingFile,
    UnpairableFrames,
)
from .geometry import CameraIntrinsics, RigidTransform, StereoRig
from .imaging import Image, RectificationMap, rectify


@dataclass(frozen=True)
class StereoFrame:
    """Timestamped rectified stereo pair."""

    timestamp: float
    left: Image
    right: Image
    rig: StereoRig


@dataclass
class Trajectory:
    """Timestamped camera-to-world pose sequence."""

    timestamps: np.ndarray
    poses: list

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamp/pose count mismatch")
        if len(self.timestamps) > 1 and not (np.diff(self.timestamps) > 0).all():
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, i):
        return self.timestamps[i], self.poses[i]

    @classmethod
    def empty(cls):
        return cls(np.empty(0), [])

    def positions(self):
        if not self.poses:
            return np.empty((0, 3))
        return np.stack([p.translation for p in self.poses])


@dataclass
class SequenceSource:
    """Ordered stereo sequence with calibration and optional ground truth."""

    frames: list  # (timestamp, left path, right path)
    rig: StereoRig
    ground_truth: Trajectory = None
    rect_left: RectificationMap = None
    rect_right: RectificationMap = None

    def __len__(self):
        return len(self.frames)

    def load_frame(self, i) -> StereoFrame:
        t, lpath, rpath = self.frames[i]
        left = Image.from_file(lpath)
        right = Image.from_file(rpath)
        if self.rect_left is not None:
            left, _ = rectify(left, self.rect_left)
            right, _ = rectify(right, self.rect_right)
        return StereoFrame(t, left, right, self.rig)

    def __iter__(self):
        for i in range(len(self.frames)):
            yield self.load_frame(i)


# --- KITTI odometry layout ---


def _parse_kitti_calib(path):
    projections = {}
    for line in Path(path).read_text().splitlines():
        if ":" not in line:
            continue
        name, rest = line.split(":", 1)
        try:
            vals = np.array([float(v) for v in rest.split()])
        except ValueError as exc:
            raise MalformedCalibration(f"{path}: {line!r}") from exc
        if vals.size == 12:
            projections[name.strip()] = vals.reshape(3, 4)
    if "P0" not in projections or "P1" not in projections:
        raise MalformedCalibration(f"{path}: missing P0/P1 projection matrices")
    return projections


def load_kitti(root, sequence) -> SequenceSource:
    """Load a KITTI odometry sequence.

    `root` may be the dataset root (containing sequences/<id>/ and
    optionally poses/<id>.txt) or the sequence directory itself.
    """
    root = Path(root)
    sequence = f"{int(sequence):02d}" if str(sequence).isdigit() else str(sequence)
    seq_dir = root / "sequences" / sequence
    if not seq_dir.is_dir():
        seq_dir = root if (root / "image_0").is_dir() else root / sequence
    for required in ("image_0", "image_1", "times.txt", "calib.txt"):
        if not (seq_dir / required).exists():
            raise MissingFile(f"{seq_dir / required} not found")

    projections = _parse_kitti_calib(seq_dir / "calib.txt")
    p0, p1 = projections["P0"], projections["P1"]
    if p0[0, 0] <= 0:
        raise MalformedCalibration("non-positive focal length in P0")
    baseline = -p1[0, 3] / p1[0, 0]
    if baseline <= 0:
        raise MalformedCalibration(f"non-positive baseline {baseline}")

    times = np.array(
        [float(t) for t in (seq_dir / "times.txt").read_text().split()]
    )
    lefts = sorted((seq_dir / "image_0").glob("*.png"))
    rights = sorted((seq_dir / "image_1").glob("*.png"))
    if len(lefts) != len(rights):
        raise UnpairableFrames(
            f"{len(lefts)} left vs {len(rights)} right images"
        )
    if len(lefts) != len(times):
        raise UnpairableFrames(f"{len(lefts)} images vs {len(times)} timestamps")

    from PIL import Image as PilImage

    with PilImage.open(lefts[0]) as probe:
        width, height = probe.size
    intr = CameraIntrinsics(
        fx=float(p0[0, 0]),
        fy=float(p0[1, 1]),
        cx=float(p0[0, 2]),
        cy=float(p0[1, 2]),
        width=width,
        height=height,
    )
    rig = StereoRig(intr, baseline)

    gt = None
    for candidate in (root / "poses" / f"{sequence}.txt", seq_dir / "poses.txt"):
        if candidate.exists():
            gt = _parse_kitti_poses(candidate, times)
            break

    frames = [(float(t), str(l), str(r)) for t, l, r in zip(times, lefts, rights)]
    return SequenceSource(frames, rig, gt)


def _parse_kitti_poses(path, times):
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        vals = [float(v) for v in line.split()]
        if len(vals) != 12:
            raise MalformedLine(f"{path}:{lineno}: expected 12 values", lineno)
        m = np.array(vals).reshape(3, 4)
        poses.append(RigidTransform(m[:, :3], m[:, 3]))
    return Trajectory(times[: len(poses)], poses)


# --- EuRoC ASL layout ---


def _load_euroc_yaml(path):
    import yaml

    text = Path(path).read_text()
    # EuRoC yaml files start with a %YAML directive and use opencv-style
    # matrix nodes; strip the directive for safe_load.
    lines = [l for l in text.splitlines() if not l.startswith("%")]
    return yaml.safe_load("\n".join(lines))


def _euroc_cam(cam_dir):
    sensor = cam_dir / "sensor.yaml"
    data_csv = cam_dir / "data.csv"
    if not sensor.exists() or not data_csv.exists():
        raise MissingFile(f"{cam_dir}: sensor.yaml/data.csv missing")
    conf = _load_euroc_yaml(sensor)
    entries = []
    with open(data_csv) as f:
        for row in csv.reader(f):
            if not row or row[0].startswith("#"):
                continue
            entries.append((int(row[0]), row[1].strip()))
    return conf, entries


def _euroc_rectification(conf0, conf1):
    import cv2

    w, h = conf0["resolution"]
    k0 = np.array(conf0["intrinsics"], dtype=float)
    k1 = np.array(conf1["intrinsics"], dtype=float)
    K0 = np.array([[k0[0], 0, k0[2]], [0, k0[1], k0[3]], [0, 0, 1]])
    K1 = np.array([[k1[0], 0, k1[2]], [0, k1[1], k1[3]], [0, 0, 1]])
    d0 = np.array(conf0["distortion_coefficients"], dtype=float)
    d1 = np.array(conf1["distortion_coefficients"], dtype=float)
    t_b_c0 = np.array(conf0["T_BS"]["data"], dtype=float).reshape(4, 4)
    t_b_c1 = np.array(conf1["T_BS"]["data"], dtype=float).reshape(4, 4)
    t_c1_c0 = np.linalg.inv(t_b_c1) @ t_b_c0
    r1, r2, p1, p2, _, _, _ = cv2.stereoRectify(
        K0, d0, K1, d1, (w, h), t_c1_c0[:3, :3], t_c1_c0[:3, 3].reshape(3, 1),
        flags=cv2.CALIB_ZERO_DISPARITY, alpha=0,
    )
    m0x, m0y = cv2.initUndistortRectifyMap(K0, d0, r1, p1, (w, h), cv2.CV_32FC1)
    m1x, m1y = cv2.initUndistortRectifyMap(K1, d1, r2, p2, (w, h), cv2.CV_32FC1)
    intr = CameraIntrinsics(
        fx=float(p1[0, 0]), fy=float(p1[1, 1]),
        cx=float(p1[0, 2]), cy=float(p1[1, 2]),
        width=int(w), height=int(h),
    )
    baseline = float(-p2[0, 3] / p2[0, 0])
    rect_l = RectificationMap(m0x.astype(float), m0y.astype(float))
    rect_r = RectificationMap(m1x.astype(float), m1y.astype(float))
    # Rectified camera frame of cam0; ground truth gets mapped into it.
    t_b_rect = t_b_c0.copy()
    t_b_rect[:3, :3] = t_b_c0[:3, :3] @ r1.T
    return StereoRig(intr, baseline), rect_l, rect_r, t_b_rect


def _slerp(q0, q1, alpha):
    dot = float(np.dot(q0, q1))
    if dot < 0:
        q1, dot = -q1, -dot
    if dot > 1 - 1e-10:
        q = q0 + alpha * (q1 - q0)
        return q / np.linalg.norm(q)
    theta = np.arccos(np.clip(dot, -1, 1))
    return (
        np.sin((1 - alpha) * theta) * q0 + np.sin(alpha * theta) * q1
    ) / np.sin(theta)


def _interp_pose(t, gt_times, gt_pos, gt_quat):
    j = int(np.searchsorted(gt_times, t))
    if j == 0:
        j = 1
    if j >= len(gt_times):
        j = len(gt_times) - 1
    t0, t1 = gt_times[j - 1], gt_times[j]
    alpha = 0.0 if t1 == t0 else (t - t0) / (t1 - t0)
    pos = (1 - alpha) * gt_pos[j - 1] + alpha * gt_pos[j]
    quat = _slerp(gt_quat[j - 1], gt_quat[j], alpha)
    return RigidTransform(geo.quaternion_to_rotation(quat), pos)


def load_euroc(root, max_pair_dt=1e-3) -> SequenceSource:
    """Load a EuRoC MAV sequence (mav0/ layout or its parent).

    Stereo frames are paired by nearest timestamp within `max_pair_dt`
    seconds; ground truth is interpolated to frame timestamps (linear on
    translation, spherical-linear on rotation) and expressed in the
    rectified left-camera frame.
    """
    root = Path(root)
    if (root / "mav0").is_dir():
        root = root / "mav0"
    cam0_dir, cam1_dir = root / "cam0", root / "cam1"
    if not cam0_dir.is_dir() or not cam1_dir.is_dir():
        raise MissingFile(f"{root}: cam0/cam1 not found")

    conf0, entries0 = _euroc_cam(cam0_dir)
    conf1, entries1 = _euroc_cam(cam1_dir)
    rig, rect_l, rect_r, t_b_rect = _euroc_rectification(conf0, conf1)

    times1 = np.array([t for t, _ in entries1], dtype=np.int64)
    frames = []
    unpaired = []
    for t0, name0 in entries0:
        j = int(np.searchsorted(times1, t0))
        best, best_dt = None, None
        for k in (j - 1, j):
            if 0 <= k < len(times1):
                dt = abs(int(times1[k]) - t0)
                if best_dt is None or dt < best_dt:
                    best, best_dt = k, dt
        if best is None or best_dt > max_pair_dt * 1e9:
            unpaired.append(t0)
            continue
        frames.append(
            (
                t0 * 1e-9,
                str(cam0_dir / "data" / name0),
                str(cam1_dir / "data" / entries1[best][1]),
            )
        )
    if unpaired:
        raise UnpairableFrames(
            f"{len(unpaired)} cam0 frames without a cam1 partner within "
            f"{max_pair_dt * 1e3:.1f} ms (first: {unpaired[:5]})"
        )

    gt = None
    gt_csv = root / "state_groundtruth_estimate0" / "data.csv"
    if not gt_csv.exists():
        gt_csv = root / "vicon0" / "data.csv"
    if gt_csv.exists():
        rows = []
        with open(gt_csv) as f:
            for row in csv.reader(f):
                if not row or row[0].startswith("#"):
                    continue
                rows.append([float(v) for v in row[:8]])
        arr = np.array(rows)
        gt_times = arr[:, 0] * 1e-9
        gt_pos = arr[:, 1:4]
        # EuRoC stores q as (w, x, y, z); internal convention is (x, y, z, w).
        gt_quat = arr[:, [5, 6, 7, 4]]
        poses = []
        frame_times = []
        for t, _, _ in frames:
            if t < gt_times[0] or t > gt_times[-1]:
                continue
            body = _interp_pose(t, gt_times, gt_pos, gt_quat)  # T_world_body
            cam = geo.compose(body, RigidTransform.from_matrix(t_b_rect))
            poses.append(cam)
            frame_times.append(t)
        if poses:
            gt = Trajectory(np.array(frame_times), poses)

    return SequenceSource(frames, rig, gt, rect_l, rect_r)


# --- TUM trajectory text ---


def write_trajectory_tum(traj: Trajectory, path):
    """One line per pose: timestamp tx ty tz qx qy qz qw."""
    try:
        with open(path, "w") as f:
            for t, pose in traj:
                q = geo.rotation_to_quaternion(pose.rotation)
                tx, ty, tz = pose.translation
                f.write(
                    f"{t:.9f} {tx:.9g} {ty:.9g} {tz:.9g} "
                    f"{q[0]:.9g} {q[1]:.9g} {q[2]:.9g} {q[3]:.9g}\n"
                )
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_trajectory_tum(path) -> Trajectory:
    times, poses = [], []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise MalformedLine(
                f"{path}:{lineno}: expected 8 fields, got {len(parts)}", lineno
            )
        try:
            vals = [float(v) for v in parts]
        except ValueError as exc:
            raise MalformedLine(f"{path}:{lineno}: {exc}", lineno) from exc
        times.append(vals[0])
        poses.append(
            RigidTransform(geo.quaternion_to_rotation(vals[4:8]), vals[1:4])
        )
    return Trajectory(np.array(times), poses)


# --- PLY export ---


def write_ply(keyframes, path):
    """Export keyframe hypotheses as a binary little-endian PLY.

    One vertex per depth hypothesis, positioned in the world frame
    (keyframe poses are world-to-camera), with the left-image intensity.
    """
    verts = []
    for kf in keyframes:
        mask = kf.depth.mask
        if not mask.any():
            continue
        vs, us = np.nonzero(mask)
        uv = np.stack([us, vs], axis=1).astype(float)
        pts_cam = geo.unproject_points(uv, kf.depth.d[vs, us], kf.rig.intrinsics)
        pts_world = geo.inverse(kf.pose).apply(pts_cam)
        intensity = np.clip(kf.left.data[vs, us] * 255.0, 0, 255).astype(np.uint8)
        verts.append((pts_world.astype("<f4"), intensity))

    total = sum(len(p) for p, _ in verts)
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {total}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar intensity\n"
        "end_header\n"
    )
    try:
        with open(path, "wb") as f:
            f.write(header.encode("ascii"))
            for pts, intensity in verts:
                for p, i in zip(pts, intensity):
                    f.write(struct.pack("<fffB", p[0], p[1], p[2], i))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_ply_vertices(path):
    """Read back x/y/z + intensity from a PLY written by write_ply."""
    raw = Path(path).read_bytes()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    header = raw[:end].decode("ascii")
    count = 0
    for line in header.splitlines():
        if line.startswith("element vertex"):
            count = int(line.split()[-1])
    pts = np.empty((count, 3))
    intensity = np.empty(count, dtype=np.uint8)
    off = end
    for i in range(count):
        x, y, z, c = struct.unpack_from("<fffB", raw, off)
        pts[i] = (x, y, z)
        intensity[i] = c
        off += 13
    return pts, intensity
