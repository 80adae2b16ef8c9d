"""Keyframe pose graph: vertices are keyframe poses, edges are relative
SE(3) measurements from direct alignment, optimized with Levenberg-
Marquardt on the information-weighted log-map discrepancy of each edge.

Loop-closure candidates are gated by distance and viewing angle, then
verified by aligning both directions and checking that the two estimates
invert each other.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import alignment, geometry as geo
from .errors import DisconnectedGraph, DivergedAlignment, EmptyOverlap
from .geometry import RigidTransform

N_CANDIDATES = 5
RHO_C = 10.0  # m
THETA_C = math.radians(45.0)
DELTA_T = 0.1  # m
DELTA_R = 0.05  # rad
LOOP_INFO_SCALE = 0.5
LM_MAX_ITERS = 100
LM_COST_TOL = 1e-9


@dataclass
class Vertex:
    kf_id: int
    pose: RigidTransform  # world -> camera
    fixed: bool = False


@dataclass
class Edge:
    from_id: int
    to_id: int
    measured: RigidTransform  # camera from_id -> camera to_id
    information: np.ndarray
    source: str = "odometry"

    def __post_init__(self):
        if self.from_id == self.to_id:
            raise ValueError("self edges are not allowed")
        info = np.asarray(self.information, dtype=float)
        if info.shape != (6, 6) or np.abs(info - info.T).max() > 1e-9:
            raise ValueError("information must be symmetric 6x6")
        if np.linalg.eigvalsh(info).min() <= 0:
            raise ValueError("information must be positive definite")
        self.information = info


@dataclass
class OptimizationReport:
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool
    cost_history: list = field(default_factory=list)  # accepted-step costs


class PoseGraph:
    def __init__(self):
        self.vertices = {}
        self.edges = []
        self._last_id = None

    def __len__(self):
        return len(self.vertices)

    def add_keyframe(self, kf_id, pose, relative=None, information=None):
        """Append a keyframe vertex; all but the first get an odometry
        edge from the previously added keyframe. `relative` is the
        measured previous-camera -> new-camera motion (defaults to the
        relative pose implied by the two vertex poses)."""
        first = not self.vertices
        self.vertices[kf_id] = Vertex(kf_id, pose, fixed=first)
        if not first:
            prev = self._last_id
            if relative is None:
                relative = geo.compose(pose, geo.inverse(self.vertices[prev].pose))
            if information is None:
                information = np.eye(6)
            self.edges.append(Edge(prev, kf_id, relative, information))
        self._last_id = kf_id
        return kf_id

    def neighbors(self, kf_id):
        out = set()
        for e in self.edges:
            if e.from_id == kf_id:
                out.add(e.to_id)
            elif e.to_id == kf_id:
                out.add(e.from_id)
        return out

    def relative(self, i, j):
        """Camera i -> camera j as implied by current vertex poses."""
        return geo.compose(self.vertices[j].pose, geo.inverse(self.vertices[i].pose))

    # --- loop closure ---

    def find_constraints(self, new_id, keyframes, n=N_CANDIDATES, rho_c=RHO_C,
                         theta_c=THETA_C, delta_t=DELTA_T, delta_r=DELTA_R,
                         info_scale=LOOP_INFO_SCALE):
        """Verified loop-closure edges between new_id and nearby vertices.

        keyframes maps vertex id to its KeyFrame (images + depth).
        Candidates within rho_c meters and theta_c viewing-angle
        difference, excluding direct graph neighbors, are aligned in both
        directions; an edge is accepted only when both alignments converge
        and their composition stays near identity. Accepted edges are
        appended to the graph and returned."""
        new_v = self.vertices[new_id]
        center_new = _camera_center(new_v.pose)
        forward_new = _viewing_direction(new_v.pose)
        skip = self.neighbors(new_id) | {new_id}

        scored = []
        for vid, v in self.vertices.items():
            if vid in skip or vid not in keyframes:
                continue
            dist = np.linalg.norm(_camera_center(v.pose) - center_new)
            if dist > rho_c:
                continue
            cosang = np.clip(forward_new @ _viewing_direction(v.pose), -1.0, 1.0)
            if math.acos(cosang) > theta_c:
                continue
            scored.append((dist, vid))
        scored.sort()

        accepted = []
        new_kf = keyframes[new_id]
        for _, vid in scored[: n]:
            cand_kf = keyframes[vid]
            init_fwd = geo.log_map(self.relative(vid, new_id))
            init_bwd = geo.log_map(self.relative(new_id, vid))
            try:
                fwd = alignment.align(cand_kf, new_kf, new_kf.depth, init_fwd)
                bwd = alignment.align(new_kf, cand_kf, cand_kf.depth, init_bwd)
            except (DivergedAlignment, EmptyOverlap):
                continue
            if not (fwd.converged and bwd.converged):
                continue
            gap = geo.compose(fwd.motion, bwd.motion)
            if np.linalg.norm(gap.translation) >= delta_t:
                continue
            if np.linalg.norm(geo.log_map(gap).w) >= delta_r:
                continue
            edge = Edge(
                vid, new_id, fwd.motion, np.eye(6) * info_scale, source="loop-closure"
            )
            self.edges.append(edge)
            accepted.append(edge)
        return accepted

    # --- optimization ---

    def _check_connected(self):
        if not self.vertices:
            return
        fixed = [v.kf_id for v in self.vertices.values() if v.fixed]
        seen = set(fixed[:1])
        queue = list(seen)
        while queue:
            vid = queue.pop()
            for nb in self.neighbors(vid):
                if nb not in seen:
                    seen.add(nb)
                    queue.append(nb)
        missing = set(self.vertices) - seen
        if missing:
            raise DisconnectedGraph(f"vertices unreachable from anchor: {sorted(missing)}")

    def _edge_residual(self, edge, poses):
        rel = geo.compose(poses[edge.to_id], geo.inverse(poses[edge.from_id]))
        return geo.log_map(geo.compose(geo.inverse(edge.measured), rel)).as_vector()

    def _cost(self, poses):
        total = 0.0
        for e in self.edges:
            r = self._edge_residual(e, poses)
            total += float(r @ e.information @ r)
        return total

    def optimize(self, max_iters=LM_MAX_ITERS, cost_tol=LM_COST_TOL):
        """Levenberg-Marquardt over non-fixed vertex poses with
        multiplicative se(3) increments and central-difference edge
        Jacobians."""
        self._check_connected()
        free = sorted(v for v, vx in self.vertices.items() if not vx.fixed)
        index = {v: i for i, v in enumerate(free)}
        poses = {v: vx.pose for v, vx in self.vertices.items()}
        if not self.edges or not free:
            cost = self._cost(poses)
            return OptimizationReport(cost, cost, 0, True, [cost])

        dim = 6 * len(free)
        initial_cost = cost = self._cost(poses)
        history = [cost]
        lam = 1e-4
        iters = 0
        fd_eps = 1e-6
        for _ in range(max_iters):
            hess = np.zeros((dim, dim))
            rhs = np.zeros(dim)
            for e in self.edges:
                cols = []
                for vid in (e.from_id, e.to_id):
                    if vid in index:
                        cols.append((vid, index[vid]))
                if not cols:
                    continue
                r = self._edge_residual(e, poses)
                jac = np.zeros((6, dim))
                for vid, slot in cols:
                    base = poses[vid]
                    for k in range(6):
                        delta = np.zeros(6)
                        delta[k] = fd_eps
                        poses[vid] = geo.compose(
                            geo.exp_map(geo.Twist.from_vector(delta)), base
                        )
                        rp = self._edge_residual(e, poses)
                        poses[vid] = geo.compose(
                            geo.exp_map(geo.Twist.from_vector(-delta)), base
                        )
                        rm = self._edge_residual(e, poses)
                        poses[vid] = base
                        jac[:, 6 * slot + k] = (rp - rm) / (2 * fd_eps)
                w = e.information
                hess += jac.T @ w @ jac
                rhs += -jac.T @ w @ r
            accepted = False
            for _ in range(10):
                try:
                    step = np.linalg.solve(hess + lam * np.eye(dim), rhs)
                except np.linalg.LinAlgError:
                    lam *= 10
                    continue
                trial = dict(poses)
                for vid, slot in index.items():
                    delta = step[6 * slot : 6 * slot + 6]
                    trial[vid] = geo.compose(
                        geo.exp_map(geo.Twist.from_vector(delta)), poses[vid]
                    )
                trial_cost = self._cost(trial)
                if trial_cost <= cost:
                    poses = trial
                    lam = max(lam / 10, 1e-12)
                    accepted = True
                    break
                lam *= 10
            iters += 1
            if not accepted:
                break
            rel_decrease = (cost - trial_cost) / max(cost, 1e-300)
            cost = trial_cost
            history.append(cost)
            if rel_decrease < cost_tol:
                break
        for vid, pose in poses.items():
            self.vertices[vid].pose = pose
        converged = cost <= initial_cost + 1e-12
        return OptimizationReport(initial_cost, cost, iters, converged, history)


def _camera_center(pose):
    """World position of the camera for a world->camera pose."""
    return -pose.rotation.T @ pose.translation


def _viewing_direction(pose):
    """World-frame optical axis for a world->camera pose."""
    return pose.rotation.T @ np.array([0.0, 0.0, 1.0])


# --- g2o text serialization ---


def write_g2o(graph: PoseGraph, path):
    """VERTEX_SE3:QUAT / EDGE_SE3:QUAT lines; vertex poses and edge
    measurements follow the g2o convention (camera-to-world vertices)."""
    lines = []
    for vid in sorted(graph.vertices):
        x = geo.inverse(graph.vertices[vid].pose)
        q = geo.rotation_to_quaternion(x.rotation)
        vals = " ".join(f"{v:.9g}" for v in (*x.translation, *q))
        lines.append(f"VERTEX_SE3:QUAT {vid} {vals}")
        if graph.vertices[vid].fixed:
            lines.append(f"FIX {vid}")
    for e in graph.edges:
        m = geo.inverse(e.measured)
        q = geo.rotation_to_quaternion(m.rotation)
        upper = e.information[np.triu_indices(6)]
        vals = " ".join(f"{v:.9g}" for v in (*m.translation, *q, *upper))
        lines.append(f"EDGE_SE3:QUAT {e.from_id} {e.to_id} {vals}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def read_g2o(path) -> PoseGraph:
    graph = PoseGraph()
    fixed_ids = set()
    edges = []
    with open(path) as fh:
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "VERTEX_SE3:QUAT":
                vid = int(tok[1])
                t = [float(v) for v in tok[2:5]]
                q = [float(v) for v in tok[5:9]]
                pose = geo.inverse(
                    RigidTransform(geo.quaternion_to_rotation(np.array(q)), t)
                )
                graph.vertices[vid] = Vertex(vid, pose)
                graph._last_id = vid
            elif tok[0] == "FIX":
                fixed_ids.add(int(tok[1]))
            elif tok[0] == "EDGE_SE3:QUAT":
                i, j = int(tok[1]), int(tok[2])
                t = [float(v) for v in tok[3:6]]
                q = [float(v) for v in tok[6:10]]
                upper = np.array([float(v) for v in tok[10:31]])
                info = np.zeros((6, 6))
                info[np.triu_indices(6)] = upper
                info = info + np.triu(info, 1).T
                measured = geo.inverse(
                    RigidTransform(geo.quaternion_to_rotation(np.array(q)), t)
                )
                edges.append(Edge(i, j, measured, info))
    graph.edges = edges
    for vid in fixed_ids:
        graph.vertices[vid].fixed = True
    return graph
