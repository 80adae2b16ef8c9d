"""Keyframe inverse-depth maps: stereo block matching, propagation between
keyframes, variance-weighted fusion, and radial variance inflation.

Depth is parameterized as inverse depth d = 1/z with per-pixel variance.
A hypothesis exists only where the mask is set; masked pixels always have
d > 0 and var > 0.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from . import geometry as geo
from .errors import DimensionMismatch, IoFailure
from .geometry import CameraIntrinsics, RigidTransform, StereoRig
from .imaging import Image, gradient_magnitude

# Defaults; overridable through EngineConfig.
G_MIN = 0.02
DISP_MIN = 0
DISP_MAX = 128
SAD_WINDOW = 15
FUSE_LAMBDA = 2.0
LR_TOLERANCE = 1.0


@dataclass
class DepthMap:
    """Per-pixel optional inverse-depth hypotheses."""

    d: np.ndarray
    var: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if not (self.d.shape == self.var.shape == self.mask.shape):
            raise DimensionMismatch("depth map plane shapes differ")

    @classmethod
    def empty(cls, height, width):
        return cls(
            np.zeros((height, width)),
            np.zeros((height, width)),
            np.zeros((height, width), dtype=bool),
        )

    @property
    def shape(self):
        return self.d.shape

    @property
    def count(self):
        return int(self.mask.sum())

    def copy(self):
        return DepthMap(self.d.copy(), self.var.copy(), self.mask.copy())

    def median_inverse_depth(self):
        return float(np.median(self.d[self.mask])) if self.mask.any() else 0.0


@dataclass
class KeyFrame:
    """Reference stereo frame with its semi-dense inverse-depth map.

    `pose` maps world coordinates into this keyframe's camera frame.
    """

    kf_id: int
    timestamp: float
    left: Image
    right: Image
    depth: DepthMap
    pose: RigidTransform
    rig: StereoRig


def _sad_volume_scan(left, right, selectable, half, dmin, dmax, window):
    """Scan disparities, tracking per-pixel best SAD and its neighbors.

    Returns (best_d, best_sad, sad_before, sad_after); pixels never
    assigned keep best_d = -1.
    """
    h, w = left.shape
    inf = np.inf
    best_sad = np.full((h, w), inf)
    best_d = np.full((h, w), -1, dtype=int)
    sad_before = np.full((h, w), inf)
    sad_after = np.full((h, w), inf)
    prev_sad = np.full((h, w), inf)
    xs = np.arange(w)[None, :]
    for d in range(dmin, dmax + 1):
        shifted = np.empty_like(right)
        if d == 0:
            shifted[:] = right
        else:
            shifted[:, d:] = right[:, :-d]
            shifted[:, :d] = 0.0
        sad = uniform_filter(np.abs(left - shifted), size=window, mode="constant")
        # Window in the right image must not cross its left edge.
        invalid = (xs - d - half) < 0
        sad = np.where(invalid | ~selectable, inf, sad)
        improved = sad < best_sad
        sad_before[improved] = prev_sad[improved]
        sad_after[improved] = inf
        best_sad[improved] = sad[improved]
        best_d[improved] = d
        just_passed = best_d == d - 1
        sad_after[just_passed] = sad[just_passed]
        prev_sad = sad
    return best_d, best_sad, sad_before, sad_after


def _subpixel(best_d, sad_before, best_sad, sad_after):
    """3-point parabola refinement; falls back to the integer minimum."""
    disp = best_d.astype(float)
    ok = np.isfinite(sad_before) & np.isfinite(sad_after) & (best_d >= 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = np.where(ok, sad_before - 2.0 * best_sad + sad_after, 1.0)
        offset = 0.5 * (sad_before - sad_after) / denom
    refine = ok & (denom > 1e-12)
    disp[refine] += np.clip(offset[refine], -0.5, 0.5)
    return disp


def block_match(
    left: Image,
    right: Image,
    rig: StereoRig,
    g_min=G_MIN,
    disp_range=(DISP_MIN, DISP_MAX),
    window=SAD_WINDOW,
    sigma_disp=geo.SIGMA_DISP,
    lr_check=True,
    lr_tolerance=LR_TOLERANCE,
) -> DepthMap:
    """SAD block-matching stereo over the semi-dense pixel set.

    Picks the minimal 15x15 SAD along the same row of the right image,
    refines to sub-pixel with a parabola fit, and discards hypotheses that
    fail the left-right consistency check.
    """
    if left.data.shape != right.data.shape:
        raise DimensionMismatch("stereo pair dimensions differ")
    h, w = left.data.shape
    half = window // 2
    dmin, dmax = int(disp_range[0]), int(min(disp_range[1], w - 1 - 2 * half))

    support = np.zeros((h, w), dtype=bool)
    if h > 2 * half and w > 2 * half:
        support[half : h - half, half : w - half] = True
    selectable = support & (gradient_magnitude(left) >= g_min)

    out = DepthMap.empty(h, w)
    if not selectable.any():
        return out

    best_d, best_sad, before, after = _sad_volume_scan(
        left.data, right.data, selectable, half, dmin, dmax, window
    )
    disp = _subpixel(best_d, before, best_sad, after)
    valid = (best_d >= 0) & np.isfinite(best_sad) & (disp > 0)

    if lr_check and valid.any():
        disp_r = _right_disparity(left.data, right.data, half, dmin, dmax, window)
        ys, xs = np.nonzero(valid)
        xr = xs - np.rint(disp[ys, xs]).astype(int)
        in_bounds = xr >= 0
        consistent = np.zeros(len(xs), dtype=bool)
        rr = disp_r[ys[in_bounds], xr[in_bounds]]
        consistent[in_bounds] = np.abs(rr - disp[ys, xs][in_bounds]) <= lr_tolerance
        valid[ys[~consistent], xs[~consistent]] = False

    fxb = rig.intrinsics.fx * rig.baseline
    out.mask = valid
    out.d[valid] = disp[valid] / fxb
    out.var[valid] = (sigma_disp / fxb) ** 2
    return out


def _right_disparity(left, right, half, dmin, dmax, window):
    """Integer disparity map of the right image against the left row."""
    h, w = left.shape
    inf = np.inf
    best_sad = np.full((h, w), inf)
    best_d = np.full((h, w), -1, dtype=int)
    xs = np.arange(w)[None, :]
    everywhere = np.zeros((h, w), dtype=bool)
    everywhere[half : h - half, half : w - half] = True
    for d in range(dmin, dmax + 1):
        shifted = np.empty_like(left)
        if d == 0:
            shifted[:] = left
        else:
            shifted[:, :-d] = left[:, d:]
            shifted[:, -d:] = 0.0
        sad = uniform_filter(np.abs(right - shifted), size=window, mode="constant")
        invalid = (xs + d + half) > (w - 1)
        sad = np.where(invalid | ~everywhere, inf, sad)
        improved = sad < best_sad
        best_sad[improved] = sad[improved]
        best_d[improved] = d
    return best_d.astype(float)


def propagate(
    src: KeyFrame, relative: RigidTransform, target_shape, intrinsics=None
) -> DepthMap:
    """Reproject the source keyframe's hypotheses through `relative`
    (source camera to target camera) onto a target-frame depth map.

    Variance is scaled by (d_new/d_old)^2; collisions at the same target
    pixel keep the smaller-variance hypothesis. Points leaving the
    frustum or ending behind the camera are dropped.
    """
    intr = intrinsics if intrinsics is not None else src.rig.intrinsics
    h, w = target_shape
    out = DepthMap.empty(h, w)
    mask = src.depth.mask
    if not mask.any():
        return out

    vs, us = np.nonzero(mask)
    uv = np.stack([us, vs], axis=1).astype(float)
    d_old = src.depth.d[vs, us]
    var_old = src.depth.var[vs, us]
    pts = geo.unproject_points(uv, d_old, intr)
    pts_new = relative.apply(pts)
    uv_new, in_front = geo.project_points(pts_new, intr)

    px = np.rint(uv_new[:, 0]).astype(int)
    py = np.rint(uv_new[:, 1]).astype(int)
    keep = in_front & (px >= 0) & (px < w) & (py >= 0) & (py < h)
    if not keep.any():
        return out

    d_new = 1.0 / pts_new[keep, 2]
    var_new = var_old[keep] * (d_new / d_old[keep]) ** 2
    px, py = px[keep], py[keep]

    # Write larger variances first so smaller ones win pixel collisions.
    order = np.argsort(-var_new, kind="stable")
    out.d[py[order], px[order]] = d_new[order]
    out.var[py[order], px[order]] = var_new[order]
    out.mask[py, px] = True
    return out


def fuse(stereo: DepthMap, prop: DepthMap, compat_lambda=FUSE_LAMBDA) -> DepthMap:
    """Combine instant-stereo and propagated hypotheses per pixel.

    Compatible hypotheses (within compat_lambda sigma of each other) are
    fused inverse-variance weighted; incompatible ones keep the
    smaller-variance estimate; single hypotheses pass through.
    """
    if stereo.shape != prop.shape:
        raise DimensionMismatch("depth map dimensions differ")
    out = DepthMap.empty(*stereo.shape)

    only_s = stereo.mask & ~prop.mask
    only_p = prop.mask & ~stereo.mask
    both = stereo.mask & prop.mask

    for src, sel in ((stereo, only_s), (prop, only_p)):
        out.d[sel] = src.d[sel]
        out.var[sel] = src.var[sel]
    out.mask = stereo.mask | prop.mask

    if both.any():
        ds, dp = stereo.d[both], prop.d[both]
        vs, vp = stereo.var[both], prop.var[both]
        gate = np.abs(ds - dp) > compat_lambda * np.sqrt(vs + vp)
        # Incompatible: trust the smaller variance.
        pick_s = gate & (vs <= vp)
        pick_p = gate & (vs > vp)
        # Compatible: inverse-variance weighted fusion.
        omega = vs / (vs + vp)
        fused_d = (1.0 - omega) * ds + omega * dp
        fused_v = vs * vp / (vs + vp)
        d_out = np.where(pick_s, ds, np.where(pick_p, dp, fused_d))
        v_out = np.where(pick_s, vs, np.where(pick_p, vp, fused_v))
        out.d[both] = d_out
        out.var[both] = v_out
    return out


def inflate_radial_variance(
    depth_map: DepthMap, intrinsics: CameraIntrinsics, alpha
) -> DepthMap:
    """Inflate variance with distance from the principal point.

    var *= 1 + alpha (r/r_max)^2, r_max being the distance to the
    farthest image corner. Compensates border distortion of fish-eye
    rectification.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    out = depth_map.copy()
    h, w = depth_map.shape
    cx, cy = intrinsics.cx, intrinsics.cy
    corners = np.array([[0, 0], [w - 1, 0], [0, h - 1], [w - 1, h - 1]], dtype=float)
    r_max = np.max(np.hypot(corners[:, 0] - cx, corners[:, 1] - cy))
    ys, xs = np.mgrid[0:h, 0:w]
    r2 = ((xs - cx) ** 2 + (ys - cy) ** 2) / r_max**2
    out.var = depth_map.var * (1.0 + alpha * r2)
    return out


# --- depth map file exchange ---


def write_depth_pgm(depth_map: DepthMap, path):
    """16-bit PGM of scaled inverse depth plus a sidecar scale file.

    Pixel 0 means no hypothesis; d = pixel * scale, with scale chosen so
    the largest inverse depth maps to 65535.
    """
    h, w = depth_map.shape
    d_max = float(depth_map.d[depth_map.mask].max()) if depth_map.mask.any() else 1.0
    scale = d_max / 65535.0 if d_max > 0 else 1.0
    pix = np.zeros((h, w), dtype=">u2")
    if depth_map.mask.any():
        vals = np.clip(np.rint(depth_map.d / scale), 1, 65535)
        pix[depth_map.mask] = vals[depth_map.mask].astype(">u2")
    try:
        with open(path, "wb") as f:
            f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
            f.write(pix.tobytes())
        Path(str(path) + ".scale.txt").write_text(f"{scale:.12g}\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_depth_pgm(path) -> DepthMap:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise IoFailure(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    pix = np.frombuffer(parts[3], dtype=">u2", count=w * h).reshape(h, w)
    scale = float(Path(str(path) + ".scale.txt").read_text())
    mask = pix > 0
    out = DepthMap.empty(h, w)
    out.mask = mask
    out.d[mask] = pix[mask] * scale
    out.var[mask] = 1.0
    return out
