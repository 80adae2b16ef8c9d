"""Fast feature-based stereo odometry front-end.

Corners and blobs come from 5x5 filter masks with non-maximum/minimum
suppression; candidates are matched in a circle over the stereo quad
(current-left -> previous-left -> previous-right -> current-right -> back)
and egomotion is estimated by RANSAC-robust Gauss-Newton on the
reprojection error into both current images.
"""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve, maximum_filter, minimum_filter, sobel

from . import geometry as geo
from .errors import DegenerateGeometry, ImageTooSmall, InsufficientMatches
from .geometry import RigidTransform, StereoRig
from .imaging import Image, sample_bilinear_many, sample_bilinear_with_grad

BLOB_KERNEL = np.array(
    [
        [-1, -1, -1, -1, -1],
        [-1, 1, 1, 1, -1],
        [-1, 1, 8, 1, -1],
        [-1, 1, 1, 1, -1],
        [-1, -1, -1, -1, -1],
    ],
    dtype=float,
)

CORNER_KERNEL = np.array(
    [
        [-1, -1, 0, 1, 1],
        [-1, -1, 0, 1, 1],
        [0, 0, 0, 0, 0],
        [1, 1, 0, -1, -1],
        [1, 1, 0, -1, -1],
    ],
    dtype=float,
)

CLASSES = ("corner-min", "corner-max", "blob-min", "blob-max")

# Sparse sampling grid (dx, dy) inside an 11x11 neighborhood; each point
# contributes the horizontal and vertical Sobel response: 16 values total.
DESCRIPTOR_OFFSETS = (
    (-5, -5), (5, -5), (-5, 5), (5, 5),
    (-3, 0), (3, 0), (0, -3), (0, 3),
)

NMS_RADIUS = 5
DETECT_THRESHOLD = 0.02
SEARCH_WINDOW = (200.0, 100.0)
EPS_EPI = 2.0
RANSAC_ITERS = 200
RANSAC_INLIER_PX = 1.5
MIN_MATCHES = 6
MIN_DISPARITY = 0.1


@dataclass(frozen=True)
class Keypoint:
    u: np.ndarray  # (x, y) position, pixels
    klass: str
    descriptor: np.ndarray
    response: float


@dataclass(frozen=True)
class QuadMatch:
    """One feature tracked around the stereo circle; all four detections
    share a class and the stereo legs satisfy the epipolar band."""

    prev_left: Keypoint
    prev_right: Keypoint
    cur_right: Keypoint
    cur_left: Keypoint

    @property
    def klass(self):
        return self.prev_left.klass


@dataclass
class FeatureMotion:
    motion: RigidTransform  # previous -> current camera frame
    inliers: np.ndarray
    mean_error: float
    reliable: bool


def detect(img: Image, threshold=DETECT_THRESHOLD, nms_radius=NMS_RADIUS):
    """Detect corner/blob extrema with non-max/min suppression."""
    if img.width < 32 or img.height < 32:
        raise ImageTooSmall(f"{img.width}x{img.height} below 32x32")
    gx = sobel(img.data, axis=1, mode="nearest")
    gy = sobel(img.data, axis=0, mode="nearest")

    keypoints = []
    size = 2 * nms_radius + 1
    margin = 5  # keep descriptor support inside the image
    for kernel, name in ((CORNER_KERNEL, "corner"), (BLOB_KERNEL, "blob")):
        resp = convolve(img.data, kernel, mode="nearest")
        for extremum, suffix in ((maximum_filter, "max"), (minimum_filter, "min")):
            ext = extremum(resp, size=size, mode="nearest")
            hit = resp == ext
            if suffix == "max":
                hit &= resp >= threshold
            else:
                hit &= resp <= -threshold
            hit[:margin, :] = hit[-margin:, :] = False
            hit[:, :margin] = hit[:, -margin:] = False
            ys, xs = np.nonzero(hit)
            for x, y in zip(xs, ys):
                keypoints.append(
                    Keypoint(
                        _refine(resp, x, y),
                        f"{name}-{suffix}",
                        _descriptor(gx, gy, x, y),
                        float(resp[y, x]),
                    )
                )
    return keypoints


def _refine(resp, x, y):
    """Sub-pixel extremum position from 1-D parabola fits; offsets are
    clamped to half a pixel so a degenerate fit cannot move the point."""
    pos = np.array([float(x), float(y)])
    for axis, (a, b, c) in enumerate(
        ((resp[y, x - 1], resp[y, x], resp[y, x + 1]),
         (resp[y - 1, x], resp[y, x], resp[y + 1, x]))
    ):
        denom = a - 2 * b + c
        if abs(denom) > 1e-12:
            pos[axis] += min(max(0.5 * (a - c) / denom, -0.5), 0.5)
    return pos


def _descriptor(gx, gy, x, y):
    h, w = gx.shape
    vals = np.empty(2 * len(DESCRIPTOR_OFFSETS))
    for i, (dx, dy) in enumerate(DESCRIPTOR_OFFSETS):
        xi = min(max(x + dx, 0), w - 1)
        yi = min(max(y + dy, 0), h - 1)
        vals[2 * i] = gx[yi, xi]
        vals[2 * i + 1] = gy[yi, xi]
    return vals


class _ClassIndex:
    """Per-class arrays of positions and descriptors for fast SAD lookup."""

    def __init__(self, keypoints):
        self.by_class = {}
        for klass in CLASSES:
            idx = [i for i, kp in enumerate(keypoints) if kp.klass == klass]
            if idx:
                self.by_class[klass] = (
                    np.array(idx),
                    np.stack([keypoints[i].u for i in idx]),
                    np.stack([keypoints[i].descriptor for i in idx]),
                )
        self.keypoints = keypoints

    def best(self, kp, du_max, dv_max, epipolar=False, max_disp=None, direction=0):
        """Index of the minimal-SAD candidate within the window, or None.

        With epipolar=True the vertical window is the epipolar band and
        direction constrains the horizontal shift sign (+1: candidate is
        right of kp, -1: left of kp)."""
        entry = self.by_class.get(kp.klass)
        if entry is None:
            return None
        idx, pos, desc = entry
        du = pos[:, 0] - kp.u[0]
        dv = pos[:, 1] - kp.u[1]
        ok = (np.abs(du) <= du_max) & (np.abs(dv) <= dv_max)
        if epipolar:
            if direction > 0:
                ok &= du >= 0
            elif direction < 0:
                ok &= du <= 0
            if max_disp is not None:
                ok &= np.abs(du) <= max_disp
        if not ok.any():
            return None
        cand = np.nonzero(ok)[0]
        sad = np.abs(desc[cand] - kp.descriptor).sum(axis=1)
        return int(idx[cand[np.argmin(sad)]])


def match_circular(
    prev_left_kps,
    prev_right_kps,
    cur_left_kps,
    cur_right_kps,
    window=SEARCH_WINDOW,
    eps_epi=EPS_EPI,
    max_disp=None,
):
    """Match features around the stereo circle; quads that do not close
    back on the starting current-left feature are rejected."""
    pl = _ClassIndex(prev_left_kps)
    pr = _ClassIndex(prev_right_kps)
    cl = _ClassIndex(cur_left_kps)
    cr = _ClassIndex(cur_right_kps)
    du_max, dv_max = window

    quads = []
    for start, kp_cl in enumerate(cur_left_kps):
        i_pl = pl.best(kp_cl, du_max, dv_max)
        if i_pl is None:
            continue
        kp_pl = prev_left_kps[i_pl]
        i_pr = pr.best(
            kp_pl, du_max, eps_epi, epipolar=True, max_disp=max_disp, direction=-1
        )
        if i_pr is None:
            continue
        kp_pr = prev_right_kps[i_pr]
        i_cr = cr.best(kp_pr, du_max, dv_max)
        if i_cr is None:
            continue
        kp_cr = cur_right_kps[i_cr]
        i_back = cl.best(
            kp_cr, du_max, eps_epi, epipolar=True, max_disp=max_disp, direction=+1
        )
        if i_back != start:
            continue
        quads.append(QuadMatch(kp_pl, kp_pr, kp_cr, kp_cl))
    return quads


def refine_matches(quads, prev_left, prev_right, cur_left, cur_right,
                   patch_radius=4, iters=8, max_shift=2.0):
    """Photometric sub-pixel refinement of matched positions.

    Each quad's previous-right, current-left, and current-right positions
    are re-aligned to the previous-left patch by translation-only
    Gauss-Newton on the intensity difference. Legs that leave the image,
    hit a flat patch, or drift more than max_shift keep their detector
    position."""
    if not quads:
        return quads
    r = patch_radius
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
    offsets = np.stack([dx.ravel(), dy.ravel()], axis=1).astype(float)

    anchors = np.stack([q.prev_left.u for q in quads])
    ref, ref_ok = sample_bilinear_many(
        prev_left.data, (anchors[:, None, :] + offsets).reshape(-1, 2)
    )
    ref = ref.reshape(len(quads), -1)
    ref_ok = ref_ok.reshape(len(quads), -1).all(axis=1)

    def refine_leg(img, start):
        pos = start.copy()
        for _ in range(iters):
            vals, gx, gy, ok = sample_bilinear_with_grad(
                img.data, (pos[:, None, :] + offsets).reshape(-1, 2)
            )
            n = len(pos)
            vals = vals.reshape(n, -1)
            gx = gx.reshape(n, -1)
            gy = gy.reshape(n, -1)
            ok = ok.reshape(n, -1).all(axis=1) & ref_ok
            res = vals - ref
            a11 = (gx * gx).sum(axis=1)
            a12 = (gx * gy).sum(axis=1)
            a22 = (gy * gy).sum(axis=1)
            b1 = (gx * res).sum(axis=1)
            b2 = (gy * res).sum(axis=1)
            det = a11 * a22 - a12 * a12
            ok &= np.abs(det) > 1e-12
            safe = np.where(ok, det, 1.0)
            step_x = -(a22 * b1 - a12 * b2) / safe
            step_y = -(-a12 * b1 + a11 * b2) / safe
            pos = pos + np.where(ok, 1.0, 0.0)[:, None] * np.stack(
                [step_x, step_y], axis=1
            )
        drift = np.linalg.norm(pos - start, axis=1)
        good = ref_ok & (drift <= max_shift)
        return np.where(good[:, None], pos, start)

    legs = {
        "prev_right": refine_leg(prev_right, np.stack([q.prev_right.u for q in quads])),
        "cur_left": refine_leg(cur_left, np.stack([q.cur_left.u for q in quads])),
        "cur_right": refine_leg(cur_right, np.stack([q.cur_right.u for q in quads])),
    }
    out = []
    for i, q in enumerate(quads):
        def moved(kp, pos):
            return Keypoint(pos.copy(), kp.klass, kp.descriptor, kp.response)

        out.append(
            QuadMatch(
                q.prev_left,
                moved(q.prev_right, legs["prev_right"][i]),
                moved(q.cur_right, legs["cur_right"][i]),
                moved(q.cur_left, legs["cur_left"][i]),
            )
        )
    return out


def triangulate_quads(matches, rig: StereoRig):
    """3D points in the previous camera frame from the previous stereo
    pair, plus the current-frame pixel observations (left, right)."""
    intr = rig.intrinsics
    pts = []
    obs = []
    keep = []
    for i, q in enumerate(matches):
        disp = q.prev_left.u[0] - q.prev_right.u[0]
        if disp < MIN_DISPARITY:
            continue
        z = intr.fx * rig.baseline / disp
        x = (q.prev_left.u[0] - intr.cx) / intr.fx * z
        y = (q.prev_left.u[1] - intr.cy) / intr.fy * z
        pts.append((x, y, z))
        obs.append(np.concatenate([q.cur_left.u, q.cur_right.u]))
        keep.append(i)
    return np.array(pts), np.array(obs), np.array(keep, dtype=int)


def _reproject(points, motion, rig):
    """Pixel predictions (N, 4) into current left/right, with validity."""
    intr = rig.intrinsics
    p = motion.apply(points)
    valid = p[:, 2] > geo.EPS_Z
    z = np.where(valid, p[:, 2], 1.0)
    ul = np.stack(
        [intr.fx * p[:, 0] / z + intr.cx, intr.fy * p[:, 1] / z + intr.cy], axis=1
    )
    ur = np.stack(
        [
            intr.fx * (p[:, 0] - rig.baseline) / z + intr.cx,
            intr.fy * p[:, 1] / z + intr.cy,
        ],
        axis=1,
    )
    return np.hstack([ul, ur]), valid


def _gauss_newton(points, obs, rig, init, iters=15):
    """Minimize stereo reprojection error over SE(3), left-multiplicative
    updates."""
    intr = rig.intrinsics
    motion = init
    for _ in range(iters):
        p = motion.apply(points)
        valid = p[:, 2] > geo.EPS_Z
        if valid.sum() < 3:
            return None
        p = p[valid]
        o = obs[valid]
        z = p[:, 2]
        pred_l = np.stack(
            [intr.fx * p[:, 0] / z + intr.cx, intr.fy * p[:, 1] / z + intr.cy], axis=1
        )
        pred_r = np.stack(
            [intr.fx * (p[:, 0] - rig.baseline) / z + intr.cx,
             intr.fy * p[:, 1] / z + intr.cy],
            axis=1,
        )
        r = np.hstack([pred_l, pred_r]) - o  # (n, 4)

        n = len(p)
        # d(pixel)/d(point in current frame)
        jp = np.zeros((n, 4, 3))
        jp[:, 0, 0] = intr.fx / z
        jp[:, 0, 2] = -intr.fx * p[:, 0] / z**2
        jp[:, 1, 1] = intr.fy / z
        jp[:, 1, 2] = -intr.fy * p[:, 1] / z**2
        jp[:, 2, 0] = intr.fx / z
        jp[:, 2, 2] = -intr.fx * (p[:, 0] - rig.baseline) / z**2
        jp[:, 3, 1] = intr.fy / z
        jp[:, 3, 2] = -intr.fy * p[:, 1] / z**2
        # d(point)/d(twist) for p' = exp(dx) p: [I | -[p]x]
        jt = np.zeros((n, 3, 6))
        jt[:, :, :3] = np.eye(3)
        jt[:, 0, 4] = p[:, 2]
        jt[:, 0, 5] = -p[:, 1]
        jt[:, 1, 3] = -p[:, 2]
        jt[:, 1, 5] = p[:, 0]
        jt[:, 2, 3] = p[:, 1]
        jt[:, 2, 4] = -p[:, 0]
        jac = np.einsum("nij,njk->nik", jp, jt).reshape(-1, 6)
        rhs = -jac.T @ r.reshape(-1)
        hess = jac.T @ jac
        try:
            dx = np.linalg.solve(hess + 1e-9 * np.eye(6), rhs)
        except np.linalg.LinAlgError:
            return None
        motion = geo.compose(geo.exp_map(geo.Twist.from_vector(dx)), motion)
        if np.linalg.norm(dx) < 1e-10:
            break
    return motion


def estimate_motion(
    matches,
    rig: StereoRig,
    rng=None,
    ransac_iters=RANSAC_ITERS,
    inlier_px=RANSAC_INLIER_PX,
    min_inliers=MIN_MATCHES,
) -> FeatureMotion:
    """RANSAC (3-point minimal samples) + Gauss-Newton refit on inliers."""
    if len(matches) < MIN_MATCHES:
        raise InsufficientMatches(f"{len(matches)} < {MIN_MATCHES} quad matches")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng

    points, obs, kept = triangulate_quads(matches, rig)
    if len(points) < MIN_MATCHES:
        raise InsufficientMatches(f"only {len(points)} matches with usable disparity")

    def errors(motion):
        pred, valid = _reproject(points, motion, rig)
        diff = pred - obs
        err_l = np.hypot(diff[:, 0], diff[:, 1])
        err_r = np.hypot(diff[:, 2], diff[:, 3])
        e = np.maximum(err_l, err_r)
        return np.where(valid, e, np.inf)

    best_inliers = None
    for _ in range(ransac_iters):
        sample = rng.choice(len(points), size=3, replace=False)
        model = _gauss_newton(points[sample], obs[sample], rig, RigidTransform.identity())
        if model is None:
            continue
        inliers = errors(model) < inlier_px
        if best_inliers is None or inliers.sum() > best_inliers.sum():
            best_inliers = inliers

    if best_inliers is None or best_inliers.sum() < min_inliers:
        raise DegenerateGeometry(
            f"best RANSAC consensus {0 if best_inliers is None else int(best_inliers.sum())}"
            f" < {min_inliers}"
        )

    motion = _gauss_newton(
        points[best_inliers], obs[best_inliers], rig, RigidTransform.identity(), iters=20
    )
    if motion is None:
        raise DegenerateGeometry("inlier refit failed")
    final_err = errors(motion)
    inliers = final_err < inlier_px
    mean_err = float(final_err[inliers].mean()) if inliers.any() else np.inf
    return FeatureMotion(
        motion=motion,
        inliers=kept[inliers],
        mean_error=mean_err,
        reliable=int(inliers.sum()) >= min_inliers,
    )
