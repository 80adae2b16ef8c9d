import numpy as np
import pytest

from sdslam import features as ft
from sdslam import geometry as geo
from sdslam import synth
from sdslam.errors import ImageTooSmall, InsufficientMatches
from sdslam.geometry import CameraIntrinsics, RigidTransform, StereoRig
from sdslam.imaging import Image

RIG = StereoRig(CameraIntrinsics(100, 100, 80, 60, 160, 120), baseline=0.5)


def render_pair(step=geo.Twist.zero(), depth_m=5.0, seed=7, scale=1.5):
    """Two consecutive stereo frames in front of a frontal plane."""
    traj = synth.make_motion_trajectory(2, step)
    scene = synth.SyntheticScene(
        RIG,
        traj,
        [synth.Plane([0, 0, depth_m], [0, 0, -1])],
        synth.Texture(seed=seed, scale=scale),
    )
    frame0, _ = synth.render(scene, 0)
    frame1, _ = synth.render(scene, 1)
    return frame0, frame1


def detect_all(frame):
    return ft.detect(frame.left), ft.detect(frame.right)


def quads_between(frame_prev, frame_cur, refine=False, **kw):
    pl, pr = detect_all(frame_prev)
    cl, cr = detect_all(frame_cur)
    quads = ft.match_circular(pl, pr, cl, cr, **kw)
    if refine:
        quads = ft.refine_matches(
            quads, frame_prev.left, frame_prev.right, frame_cur.left, frame_cur.right
        )
    return quads


class TestDetect:
    def test_textured_image_has_all_classes(self):
        frame, _ = render_pair()
        kps = ft.detect(frame.left)
        assert len(kps) > 50
        assert {kp.klass for kp in kps} == set(ft.CLASSES)

    def test_fields_well_formed(self):
        frame, _ = render_pair()
        for kp in ft.detect(frame.left):
            assert kp.u.shape == (2,)
            assert kp.descriptor.shape == (16,)
            assert 4.5 <= kp.u[0] <= 154.5 and 4.5 <= kp.u[1] <= 114.5
            if kp.klass.endswith("max"):
                assert kp.response > 0
            else:
                assert kp.response < 0

    def test_nms_spacing(self):
        frame, _ = render_pair()
        kps = ft.detect(frame.left)
        for klass in ft.CLASSES:
            pos = np.array([kp.u for kp in kps if kp.klass == klass])
            if len(pos) < 2:
                continue
            cheb = np.abs(pos[:, None, :] - pos[None, :, :]).max(axis=2)
            cheb += np.eye(len(pos)) * 1e9
            assert cheb.min() > ft.NMS_RADIUS

    def test_constant_image_empty(self):
        assert ft.detect(Image(np.full((60, 80), 0.5))) == []

    def test_too_small(self):
        with pytest.raises(ImageTooSmall):
            ft.detect(Image(np.zeros((20, 20))))


class TestMatchCircular:
    def test_static_scene_matches_in_place(self):
        frame, _ = render_pair(depth_m=5.0)
        quads = quads_between(frame, frame)
        assert len(quads) > 30
        for q in quads:
            assert np.allclose(q.prev_left.u, q.cur_left.u)
            assert np.allclose(q.prev_right.u, q.cur_right.u)

    def test_stereo_disparity_of_frontal_plane(self):
        # plane at 5 m: disparity fx*b/z = 10 px on every quad
        frame, _ = render_pair(depth_m=5.0)
        quads = quads_between(frame, frame)
        disp = np.array([q.prev_left.u[0] - q.prev_right.u[0] for q in quads])
        assert np.mean(np.abs(disp - 10.0) <= 1.0) >= 0.9

    def test_epipolar_band(self):
        frame, _ = render_pair()
        for q in quads_between(frame, frame):
            assert abs(q.prev_left.u[1] - q.prev_right.u[1]) <= ft.EPS_EPI
            assert abs(q.cur_left.u[1] - q.cur_right.u[1]) <= ft.EPS_EPI

    def test_lateral_motion_flow(self):
        # 0.25 m sideways at 5 m depth: 5 px of horizontal flow
        frame0, frame1 = render_pair(geo.Twist([0.25, 0, 0], [0, 0, 0]))
        quads = quads_between(frame0, frame1)
        assert len(quads) > 20
        flow = np.array([q.cur_left.u[0] - q.prev_left.u[0] for q in quads])
        assert np.mean(np.abs(flow + 5.0) <= 1.0) >= 0.8

    def test_classes_consistent(self):
        frame0, frame1 = render_pair(geo.Twist([0.1, 0, 0], [0, 0, 0]))
        for q in quads_between(frame0, frame1):
            assert (
                q.prev_left.klass
                == q.prev_right.klass
                == q.cur_left.klass
                == q.cur_right.klass
            )


def true_motion(step):
    traj = synth.make_motion_trajectory(2, step)
    return geo.compose(geo.inverse(traj.poses[1]), traj.poses[0])


class TestEstimateMotion:
    def estimate(self, step, seed=7, rng_seed=0):
        frame0, frame1 = render_pair(step, seed=seed)
        quads = quads_between(frame0, frame1, refine=True)
        return ft.estimate_motion(quads, RIG, rng=rng_seed), quads

    def test_zero_motion_identity(self):
        result, _ = self.estimate(geo.Twist.zero())
        assert result.reliable
        assert np.linalg.norm(result.motion.translation) < 1e-3
        angle = np.linalg.norm(geo.log_map(result.motion).w)
        assert angle < 1e-4

    def test_forward_translation(self):
        step = geo.Twist([0, 0, 0.1], [0, 0, 0])
        result, _ = self.estimate(step)
        expected = true_motion(step)  # translation approx (0, 0, -0.1)
        err = np.linalg.norm(result.motion.translation - expected.translation)
        assert err < 0.02 * 0.1 + 5e-4

    def test_rotation_recovery(self):
        step = geo.Twist([0, 0, 0], [0, 0.02, 0])
        result, _ = self.estimate(step)
        expected = true_motion(step)
        dr = geo.compose(geo.inverse(expected), result.motion)
        assert np.linalg.norm(geo.log_map(dr).w) < 2e-3

    def test_outlier_contamination(self):
        frame0, frame1 = render_pair(geo.Twist([0, 0, 0.1], [0, 0, 0]))
        quads = quads_between(frame0, frame1, refine=True)
        rng = np.random.default_rng(11)
        n_bad = int(0.3 * len(quads))
        bad_idx = rng.choice(len(quads), n_bad, replace=False)
        for i in bad_idx:
            q = quads[i]
            jitter = rng.uniform(8, 25, 2) * rng.choice([-1, 1], 2)
            quads[i] = ft.QuadMatch(
                q.prev_left,
                q.prev_right,
                q.cur_right,
                ft.Keypoint(q.cur_left.u + jitter, q.cur_left.klass,
                            q.cur_left.descriptor, q.cur_left.response),
            )
        result = ft.estimate_motion(quads, RIG, rng=3)
        expected = true_motion(geo.Twist([0, 0, 0.1], [0, 0, 0]))
        assert np.linalg.norm(result.motion.translation - expected.translation) < 5e-3
        excluded = np.mean(~np.isin(bad_idx, result.inliers))
        assert excluded >= 0.9

    def test_deterministic_given_seed(self):
        a, _ = self.estimate(geo.Twist([0, 0, 0.05], [0, 0, 0]), rng_seed=5)
        b, _ = self.estimate(geo.Twist([0, 0, 0.05], [0, 0, 0]), rng_seed=5)
        assert np.array_equal(a.motion.matrix(), b.motion.matrix())
        assert np.array_equal(a.inliers, b.inliers)

    def test_insufficient_matches(self):
        with pytest.raises(InsufficientMatches):
            ft.estimate_motion([], RIG, rng=0)
