"""Trajectory accuracy metrics.

ATE: RMSE and median of per-pose position error after closed-form rigid
(optionally similarity) alignment. RPE: segment-based translation drift in
percent and rotation drift in degrees per meter. Both operate on
timestamp-associated trajectory pairs.
"""

import csv
from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .datasets import Trajectory
from .errors import NoAssociations, TooFewPairs, TrajectoryTooShort, ZeroBaseline

DEFAULT_MAX_DT = 0.02
DEFAULT_SEGMENTS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)


@dataclass
class AteReport:
    rmse: float
    median: float
    errors: np.ndarray
    alignment: geo.RigidTransform
    scale: float = 1.0


@dataclass
class RpeReport:
    translation_percent: float
    rotation_deg_per_m: float
    per_segment: dict  # length -> (mean trans %, mean rot deg/m, count)


def associate(est: Trajectory, gt: Trajectory, max_dt=DEFAULT_MAX_DT):
    """Greedy nearest-timestamp pairing; each pose used at most once.

    Returns index pairs (i_est, i_gt) sorted by estimated timestamp."""
    if len(est) == 0 or len(gt) == 0:
        raise NoAssociations("empty trajectory")
    te = est.timestamps
    tg = gt.timestamps
    cand = []
    for i, t in enumerate(te):
        j0 = np.searchsorted(tg, t)
        for j in (j0 - 1, j0):
            if 0 <= j < len(tg) and abs(tg[j] - t) <= max_dt:
                cand.append((abs(tg[j] - t), i, j))
    cand.sort()
    used_e, used_g = set(), set()
    pairs = []
    for _, i, j in cand:
        if i in used_e or j in used_g:
            continue
        used_e.add(i)
        used_g.add(j)
        pairs.append((i, j))
    if not pairs:
        raise NoAssociations(f"no timestamp pairs within {max_dt} s")
    pairs.sort()
    return pairs


def _umeyama(src, dst, with_scale):
    """Least-squares src -> dst alignment: returns (scale, R, t)."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / len(src)
    u, sv, vt = np.linalg.svd(cov)
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1.0
    rot = u @ s @ vt
    if with_scale:
        var_s = (xs**2).sum() / len(src)
        scale = np.trace(np.diag(sv) @ s) / var_s
    else:
        scale = 1.0
    t = mu_d - scale * rot @ mu_s
    return scale, rot, t


def ate(est: Trajectory, gt: Trajectory, max_dt=DEFAULT_MAX_DT, similarity=False):
    """Absolute trajectory error after rigid (or similarity) alignment of
    the estimated positions onto ground truth."""
    pairs = associate(est, gt, max_dt)
    if len(pairs) < 3:
        raise TooFewPairs(f"{len(pairs)} associated pairs, need 3")
    p_est = np.stack([est.poses[i].translation for i, _ in pairs])
    p_gt = np.stack([gt.poses[j].translation for _, j in pairs])
    scale, rot, t = _umeyama(p_est, p_gt, similarity)
    aligned = scale * p_est @ rot.T + t
    errors = np.linalg.norm(aligned - p_gt, axis=1)
    return AteReport(
        rmse=float(np.sqrt((errors**2).mean())),
        median=float(np.median(errors)),
        errors=errors,
        alignment=geo.RigidTransform(rot, t),
        scale=float(scale),
    )


def rpe(est: Trajectory, gt: Trajectory, segment_lengths=DEFAULT_SEGMENTS,
        max_dt=DEFAULT_MAX_DT):
    """Segment-based relative pose error over ground-truth arc length."""
    pairs = associate(est, gt, max_dt)
    est_poses = [est.poses[i] for i, _ in pairs]
    gt_poses = [gt.poses[j] for _, j in pairs]
    pos = np.stack([p.translation for p in gt_poses])
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pos, axis=0), axis=1))])

    per_segment = {}
    all_t, all_r = [], []
    for length in segment_lengths:
        terrs, rerrs = [], []
        for i in range(len(pairs)):
            j = np.searchsorted(arc, arc[i] + length)
            if j >= len(pairs):
                break
            rel_gt = geo.compose(geo.inverse(gt_poses[i]), gt_poses[j])
            rel_est = geo.compose(geo.inverse(est_poses[i]), est_poses[j])
            delta = geo.compose(geo.inverse(rel_gt), rel_est)
            span = arc[j] - arc[i]
            terrs.append(np.linalg.norm(delta.translation) / span * 100.0)
            angle = np.linalg.norm(geo.log_map(delta).w)
            rerrs.append(np.degrees(angle) / span)
        if terrs:
            per_segment[length] = (float(np.mean(terrs)), float(np.mean(rerrs)), len(terrs))
            all_t.extend(terrs)
            all_r.extend(rerrs)
    if not per_segment:
        raise TrajectoryTooShort(
            f"path length {arc[-1]:.3f} m fits no segment of {min(segment_lengths)} m"
        )
    return RpeReport(
        translation_percent=float(np.mean(all_t)),
        rotation_deg_per_m=float(np.mean(all_r)),
        per_segment=per_segment,
    )


def improvement(vo_ate, slam_ate):
    """Relative ATE reduction of SLAM over plain odometry, in percent."""
    if vo_ate <= 0:
        raise ZeroBaseline("odometry ATE must be positive")
    return (vo_ate - slam_ate) / vo_ate * 100.0


def write_metrics_csv(rows, path):
    """One row per metric: dataset id, method id, metric name, value."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset", "method", "metric", "value"])
        for row in rows:
            writer.writerow(row)
