"""Hybrid stereo odometry core.

Per frame, sparse features are tracked against the previous frame and the
relative motions are concatenated. Once the accumulated mean feature
displacement exceeds the motion threshold (or a maximum spacing is hit),
the frame is registered directly against the current keyframe, seeded
with the concatenated feature motion, and becomes the next keyframe with
a depth map fused from propagated hypotheses and its own instant stereo.
"""

import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import alignment, depth as dp, features as ft, geometry as geo
from .alignment import ResidualWeights
from .config import EngineConfig
from .datasets import StereoFrame, Trajectory
from .depth import KeyFrame
from .errors import (
    DegenerateGeometry,
    DivergedAlignment,
    EmptyOverlap,
    InsufficientDepth,
    InsufficientMatches,
    NoMatches,
    NotInitialized,
)
from .geometry import RigidTransform
from .graph import PoseGraph


def motion_magnitude(matches):
    """Mean Euclidean displacement of current-left vs previous-left match
    positions, in pixels."""
    if not matches:
        raise NoMatches("no quad matches")
    disp = [np.linalg.norm(q.cur_left.u - q.prev_left.u) for q in matches]
    return float(np.mean(disp))


@dataclass
class FrameOutcome:
    kind: str  # tracked | keyframe | lost
    timestamp: float
    pose: RigidTransform  # camera -> world
    alignment: object = None
    n_matches: int = 0
    timings: dict = field(default_factory=dict)


@dataclass
class OdometryState:
    keyframe: KeyFrame
    xi_feat: RigidTransform  # keyframe camera -> current camera
    trajectory: Trajectory
    frame_count: int
    config: EngineConfig


class OdometryEngine:
    def __init__(self, config: EngineConfig = None, slam=False):
        self.config = config if config is not None else EngineConfig()
        self.slam = slam
        self.graph = PoseGraph()
        self.keyframes = {}
        self.rng = np.random.default_rng(self.config.ransac_seed)
        self.state = None
        self._timestamps = []
        self._poses = []  # camera -> world
        self._prev = None  # (frame, left kps, right kps)
        self._last_motion = RigidTransform.identity()
        self._disp_accum = 0.0
        self._frames_since_kf = 0
        self._next_kf_id = 1
        self._lock = threading.Lock()
        self._queue = None
        self._worker = None
        if self.slam and not self.config.single_thread:
            self._queue = queue.Queue()
            self._worker = threading.Thread(target=self._graph_worker, daemon=True)
            self._worker.start()

    # --- lifecycle ---

    def initialize(self, first: StereoFrame) -> OdometryState:
        cfg = self.config
        depth = self._instant_stereo(first)
        if depth.count < cfg.n_min:
            raise InsufficientDepth(f"{depth.count} hypotheses < {cfg.n_min}")
        kf = KeyFrame(
            0, first.timestamp, first.left, first.right, depth,
            RigidTransform.identity(), first.rig,
        )
        with self._lock:
            self.graph.add_keyframe(0, kf.pose)
        self.keyframes[0] = kf
        self._log_pose(first.timestamp, RigidTransform.identity())
        self._prev = (first, ft.detect(first.left, cfg.detect_threshold, cfg.nms_radius),
                      ft.detect(first.right, cfg.detect_threshold, cfg.nms_radius))
        self.state = OdometryState(
            keyframe=kf,
            xi_feat=RigidTransform.identity(),
            trajectory=self.trajectory(),
            frame_count=1,
            config=cfg,
        )
        return self.state

    def process(self, frame: StereoFrame) -> FrameOutcome:
        if self.state is None:
            raise NotInitialized("call initialize() with the first frame")
        cfg = self.config
        timings = {"tracking": 0.0, "mapping": 0.0,
                   "constraint_search": 0.0, "optimization": 0.0}
        t0 = time.perf_counter()

        matches, feature_motion = self._track_features(frame)
        if feature_motion is not None:
            self.state.xi_feat = geo.compose(feature_motion.motion, self.state.xi_feat)
            self._last_motion = feature_motion.motion
            self._disp_accum += motion_magnitude(matches)
            tracked = True
        else:
            tracked = self._track_fallback(frame, timings)
        timings["tracking"] = time.perf_counter() - t0

        if not tracked:
            # tracking lost: retain the last good pose at this timestamp
            self._log_pose(frame.timestamp, self._poses[-1])
            self.state.frame_count += 1
            self.state.trajectory = self.trajectory()
            return FrameOutcome("lost", frame.timestamp, self._poses[-1],
                                n_matches=len(matches or []), timings=timings)

        self._frames_since_kf += 1
        outcome_kind = "tracked"
        align_result = None
        if (self._disp_accum > cfg.eps_motion
                or self._frames_since_kf >= cfg.kf_max_interval):
            align_result = self._make_keyframe(frame, timings)
            outcome_kind = "keyframe"

        pose_w2c = geo.compose(self.state.xi_feat, self.state.keyframe.pose)
        pose_c2w = geo.inverse(pose_w2c)
        self._log_pose(frame.timestamp, pose_c2w)
        self.state.frame_count += 1
        self.state.trajectory = self.trajectory()
        return FrameOutcome(outcome_kind, frame.timestamp, pose_c2w,
                            alignment=align_result,
                            n_matches=len(matches or []), timings=timings)

    def finish(self):
        """Drain the background graph worker, then run a final
        optimization pass in slam mode."""
        if self._queue is not None:
            self._queue.put(None)
            self._worker.join()
        if self.slam and len(self.graph) > 1:
            with self._lock:
                self.graph.optimize()
            self._refresh_keyframe_poses()

    def trajectory(self) -> Trajectory:
        return Trajectory(np.array(self._timestamps), list(self._poses))

    # --- internals ---

    def _log_pose(self, timestamp, pose_c2w):
        self._timestamps.append(float(timestamp))
        self._poses.append(pose_c2w)

    def _instant_stereo(self, frame):
        cfg = self.config
        return dp.block_match(
            frame.left, frame.right, frame.rig,
            g_min=cfg.g_min,
            disp_range=(cfg.disp_min, cfg.disp_max),
            window=cfg.sad_window,
            lr_tolerance=cfg.lr_tolerance,
        )

    def _track_features(self, frame):
        cfg = self.config
        cur_l = ft.detect(frame.left, cfg.detect_threshold, cfg.nms_radius)
        cur_r = ft.detect(frame.right, cfg.detect_threshold, cfg.nms_radius)
        prev_frame, prev_l, prev_r = self._prev
        quads = ft.match_circular(
            prev_l, prev_r, cur_l, cur_r,
            window=(cfg.window_du, cfg.window_dv),
            eps_epi=cfg.eps_epi,
            max_disp=cfg.disp_max,
        )
        quads = ft.refine_matches(
            quads, prev_frame.left, prev_frame.right, frame.left, frame.right
        )
        try:
            motion = ft.estimate_motion(
                quads, frame.rig, rng=self.rng,
                ransac_iters=cfg.ransac_iters,
                inlier_px=cfg.inlier_px,
                min_inliers=cfg.min_inliers,
            )
        except (InsufficientMatches, DegenerateGeometry):
            return quads, None
        if not motion.reliable:
            return quads, None
        self._prev = (frame, cur_l, cur_r)
        return quads, motion

    def _track_fallback(self, frame, timings):
        """Direct alignment against the keyframe seeded with a constant-
        velocity prediction; replaces xi_feat on success."""
        t0 = time.perf_counter()
        predicted = geo.compose(self._last_motion, self.state.xi_feat)
        try:
            frame_depth = self._instant_stereo(frame)
            result = alignment.align(
                self.state.keyframe, frame, frame_depth,
                geo.log_map(predicted), weights=self._weights(),
                rho_min=self.config.rho_min, tau_track=self.config.tau_track,
            )
        except (DivergedAlignment, EmptyOverlap, InsufficientDepth):
            timings["mapping"] += time.perf_counter() - t0
            return False
        timings["mapping"] += time.perf_counter() - t0
        if not result.converged:
            return False
        self.state.xi_feat = result.motion
        self._disp_accum = self.config.eps_motion  # force a keyframe next check
        cfg = self.config
        self._prev = (frame, ft.detect(frame.left, cfg.detect_threshold, cfg.nms_radius),
                      ft.detect(frame.right, cfg.detect_threshold, cfg.nms_radius))
        return True

    def _weights(self):
        cfg = self.config
        return ResidualWeights(
            huber_photo=cfg.huber_photo,
            huber_depth=cfg.huber_depth,
            sigma_i2=cfg.sigma_i**2,
        )

    def _make_keyframe(self, frame, timings):
        cfg = self.config
        kf = self.state.keyframe
        t0 = time.perf_counter()
        frame_depth = self._instant_stereo(frame)
        align_result = None
        try:
            result = alignment.align(
                kf, frame, frame_depth, geo.log_map(self.state.xi_feat),
                weights=self._weights(), rho_min=cfg.rho_min,
                tau_track=cfg.tau_track,
            )
            if result.converged:
                align_result = result
        except (DivergedAlignment, EmptyOverlap):
            pass
        # on alignment failure the concatenated feature motion is kept
        motion = align_result.motion if align_result else self.state.xi_feat

        new_pose = geo.compose(motion, kf.pose)
        propagated = dp.propagate(kf, motion, frame_depth.shape)
        propagated = dp.inflate_radial_variance(
            propagated, frame.rig.intrinsics, cfg.radial_alpha
        )
        fused = dp.fuse(frame_depth, propagated, compat_lambda=cfg.fuse_lambda)
        kf_id = self._next_kf_id
        self._next_kf_id += 1
        new_kf = KeyFrame(
            kf_id, frame.timestamp, frame.left, frame.right, fused, new_pose,
            frame.rig,
        )
        quality = align_result.mean_residual if align_result else 1.0
        info = np.eye(6) / (1.0 + quality)
        with self._lock:
            self.graph.add_keyframe(kf_id, new_pose, relative=motion,
                                    information=info)
        self.keyframes[kf_id] = new_kf
        self.state.keyframe = new_kf
        self.state.xi_feat = RigidTransform.identity()
        self._disp_accum = 0.0
        self._frames_since_kf = 0
        timings["mapping"] += time.perf_counter() - t0

        if self.slam:
            if self._queue is not None:
                self._queue.put(kf_id)
            else:
                self._close_loops(kf_id, timings)
        return align_result

    def _close_loops(self, kf_id, timings=None):
        t0 = time.perf_counter()
        with self._lock:
            edges = self.graph.find_constraints(
                kf_id, self.keyframes,
                n=self.config.n_candidates, rho_c=self.config.rho_c,
                theta_c=self.config.theta_c, delta_t=self.config.delta_t,
                delta_r=self.config.delta_r,
                info_scale=self.config.loop_info_scale,
            )
        t1 = time.perf_counter()
        if timings is not None:
            timings["constraint_search"] += t1 - t0
        if edges:
            with self._lock:
                self.graph.optimize()
            self._refresh_keyframe_poses()
            if timings is not None:
                timings["optimization"] += time.perf_counter() - t1

    def _refresh_keyframe_poses(self):
        with self._lock:
            for vid, vertex in self.graph.vertices.items():
                if vid in self.keyframes:
                    self.keyframes[vid].pose = vertex.pose
            self.state.keyframe = self.keyframes[max(self.keyframes)]

    def _graph_worker(self):
        while True:
            item = self._queue.get()
            if item is None:
                return
            self._close_loops(item)
