"""SE(3)/se(3) machinery and the pinhole stereo camera model.

Rigid motions act on points as p' = R p + t. Twists are 6-vectors
(v, w) with translational part v and rotational part w; exp/log use the
closed-form Rodrigues coefficients with Taylor fallbacks near zero angle.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NonPositiveDepth, NonPositiveInverseDepth, ZeroDisparity

# Angle below which exp/log coefficients switch to their Taylor expansions.
SMALL_ANGLE = 1e-8

# Minimum projectable depth in meters.
EPS_Z = 1e-6

# Default disparity standard deviation (half-pixel quantization), pixels.
SIGMA_DISP = 0.5


@dataclass(frozen=True)
class Twist:
    """se(3) coordinates: translational part v (m), rotational part w (rad)."""

    v: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float).reshape(3))
        object.__setattr__(self, "w", np.asarray(self.w, dtype=float).reshape(3))

    @classmethod
    def zero(cls):
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, xi):
        xi = np.asarray(xi, dtype=float).reshape(6)
        return cls(xi[:3], xi[3:])

    def as_vector(self):
        return np.concatenate([self.v, self.w])


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) motion: p' = rotation @ p + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3)
        )
        object.__setattr__(
            self, "translation", np.asarray(self.translation, dtype=float).reshape(3)
        )

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points):
        """Transform a 3-vector or an (N, 3) array of points."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def is_valid(self, tol=1e-9):
        r = self.rotation
        return (
            np.allclose(r.T @ r, np.eye(3), atol=tol)
            and abs(np.linalg.det(r) - 1.0) <= tol
        )


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics of a rectified camera, all in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def matrix(self):
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def scaled(self, factor):
        """Intrinsics of the image downscaled by an integer factor."""
        return CameraIntrinsics(
            fx=self.fx / factor,
            fy=self.fy / factor,
            cx=self.cx / factor,
            cy=self.cy / factor,
            width=self.width // factor,
            height=self.height // factor,
        )


@dataclass(frozen=True)
class StereoRig:
    """Rectified stereo pair sharing one set of intrinsics."""

    intrinsics: CameraIntrinsics
    baseline: float

    def __post_init__(self):
        if self.baseline <= 0:
            raise ValueError("baseline must be positive")


def skew(w):
    w = np.asarray(w, dtype=float)
    return np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
    )


def exp_map(xi: Twist) -> RigidTransform:
    """Exponential map se(3) -> SE(3)."""
    w = xi.w
    theta = np.linalg.norm(w)
    wx = skew(w)
    wx2 = wx @ wx
    if theta < SMALL_ANGLE:
        # Taylor expansions about theta = 0.
        a = 1.0 - theta**2 / 6.0          # sin(t)/t
        b = 0.5 - theta**2 / 24.0         # (1-cos(t))/t^2
        c = 1.0 / 6.0 - theta**2 / 120.0  # (t-sin(t))/t^3
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta**2
        c = (theta - np.sin(theta)) / theta**3
    rot = np.eye(3) + a * wx + b * wx2
    v_mat = np.eye(3) + b * wx + c * wx2
    return RigidTransform(rot, v_mat @ xi.v)


def log_map(transform: RigidTransform) -> Twist:
    """Logarithm map SE(3) -> se(3), rotation angle in [0, pi].

    At angle exactly pi the rotation axis sign is ambiguous; the branch
    with the largest axis component made positive is returned.
    """
    r = transform.rotation
    cos_theta = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)

    if theta < SMALL_ANGLE:
        w = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    elif np.pi - theta < 1e-6:
        # Near pi the antisymmetric part vanishes; at pi, (R+I)/2 equals
        # axis axis^T, so take the strongest column and normalize.
        m = (r + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(m)))
        axis = m[:, k] / np.linalg.norm(m[:, k])
        # Branch choice: largest-magnitude component positive.
        j = int(np.argmax(np.abs(axis)))
        if axis[j] < 0:
            axis = -axis
        w = theta * axis
    else:
        w = theta / (2.0 * np.sin(theta)) * np.array(
            [r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]]
        )

    wx = skew(w)
    wx2 = wx @ wx
    if theta < SMALL_ANGLE:
        coeff = 1.0 / 12.0 + theta**2 / 720.0
    else:
        coeff = (1.0 - theta * np.cos(theta / 2.0) / (2.0 * np.sin(theta / 2.0))) / theta**2
    v_inv = np.eye(3) - 0.5 * wx + coeff * wx2
    return Twist(v_inv @ transform.translation, w)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Composition a after b: (a . b)(p) = a(b(p))."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(transform: RigidTransform) -> RigidTransform:
    rt = transform.rotation.T
    return RigidTransform(rt, -rt @ transform.translation)


def project(p, intrinsics: CameraIntrinsics):
    """Project a camera-frame 3D point to pixel coordinates (u, v)."""
    p = np.asarray(p, dtype=float).reshape(3)
    if p[2] <= EPS_Z:
        raise NonPositiveDepth(f"point depth {p[2]} <= {EPS_Z}")
    return np.array(
        [
            intrinsics.fx * p[0] / p[2] + intrinsics.cx,
            intrinsics.fy * p[1] / p[2] + intrinsics.cy,
        ]
    )


def unproject(u, d, intrinsics: CameraIntrinsics):
    """Back-project pixel u with inverse depth d into the camera frame."""
    if d <= 0:
        raise NonPositiveInverseDepth(f"inverse depth {d} <= 0")
    u = np.asarray(u, dtype=float).reshape(2)
    z = 1.0 / d
    return np.array(
        [
            (u[0] - intrinsics.cx) / intrinsics.fx * z,
            (u[1] - intrinsics.cy) / intrinsics.fy * z,
        ]
        + [z]
    )


def project_points(points, intrinsics: CameraIntrinsics):
    """Vectorized projection of (N, 3) points.

    Returns (uv, valid): pixel coordinates (N, 2) and a mask of points in
    front of the camera. Coordinates of invalid points are set to 0.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    valid = points[:, 2] > EPS_Z
    z = np.where(valid, points[:, 2], 1.0)
    uv = np.stack(
        [
            intrinsics.fx * points[:, 0] / z + intrinsics.cx,
            intrinsics.fy * points[:, 1] / z + intrinsics.cy,
        ],
        axis=1,
    )
    uv[~valid] = 0.0
    return uv, valid


def unproject_points(uv, d, intrinsics: CameraIntrinsics):
    """Vectorized back-projection of (N, 2) pixels with inverse depths (N,)."""
    uv = np.asarray(uv, dtype=float).reshape(-1, 2)
    d = np.asarray(d, dtype=float).reshape(-1)
    z = 1.0 / d
    return np.stack(
        [
            (uv[:, 0] - intrinsics.cx) / intrinsics.fx * z,
            (uv[:, 1] - intrinsics.cy) / intrinsics.fy * z,
            z,
        ],
        axis=1,
    )


def disparity_to_inverse_depth(disp, rig: StereoRig, sigma_disp=SIGMA_DISP):
    """Convert a rectified-stereo disparity to (inverse depth, variance).

    d = disp / (fx b); the variance follows from first-order propagation
    of a fixed disparity standard deviation.
    """
    if disp <= 0:
        raise ZeroDisparity("zero or negative disparity: point at infinity")
    fxb = rig.intrinsics.fx * rig.baseline
    return disp / fxb, (sigma_disp / fxb) ** 2


def rotation_to_quaternion(r):
    """Rotation matrix to unit quaternion (qx, qy, qz, qw), qw >= 0."""
    r = np.asarray(r, dtype=float)
    t = np.trace(r)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array(
            [(r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s, 0.25 * s]
        )
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(r[i, i] - r[j, j] - r[k, k] + 1.0) * 2.0
        q = np.empty(4)
        q[i] = 0.25 * s
        q[j] = (r[j, i] + r[i, j]) / s
        q[k] = (r[k, i] + r[i, k]) / s
        q[3] = (r[k, j] - r[j, k]) / s
    if q[3] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quaternion_to_rotation(q):
    """Unit quaternion (qx, qy, qz, qw) to rotation matrix."""
    x, y, z, w = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )
