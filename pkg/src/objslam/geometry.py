"""Projective and dual-quadric geometry.

Conventions
-----------
* A :class:`Pose` maps world points into the camera frame,
  ``X_cam = R @ X_world + t``.
* Planes and image lines are homogeneous coefficient vectors.
* A dual quadric is stored as the nine upper-triangular entries of the
  symmetric 4x4 matrix ``Q*`` in row-major order, with ``Q*[3, 3] = -1``::

      q1 q2 q3 q4
         q5 q6 q7
            q8 q9
               -1
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DegenerateBaseline, NotAnEllipse, NotAnEllipsoid, OffImage

# (row, col) of q1..q9 inside Q*
_QHAT_INDEX = ((0, 0), (0, 1), (0, 2), (0, 3), (1, 1), (1, 2), (1, 3), (2, 2), (2, 3))


def skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def so3_exp(w):
    return Rotation.from_rotvec(np.asarray(w, dtype=float)).as_matrix()


def so3_log(R):
    return Rotation.from_matrix(R).as_rotvec()


def homog(x):
    x = np.asarray(x, dtype=float)
    return np.append(x, 1.0)


@dataclass(frozen=True)
class Pose:
    """Rigid transform from world to camera coordinates."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation):
        return cls(so3_exp(rotvec), translation)

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self):
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def __matmul__(self, other: Pose) -> Pose:
        # self after other
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def apply(self, X):
        return np.asarray(X, dtype=float) @ self.rotation.T + self.translation

    @property
    def center(self):
        return -self.rotation.T @ self.translation

    def retract(self, delta):
        """Left-multiplicative update by a (rotvec, translation) 6-vector."""
        delta = np.asarray(delta, dtype=float)
        return Pose(so3_exp(delta[:3]) @ self.rotation, self.translation + delta[3:])


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-to-camera pose for a camera at ``eye`` looking at ``target``.

    Camera axes follow the usual vision convention: x right, y down, z forward.
    """
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=float))
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, [1.0, 0.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.vstack([x, y, z])
    return Pose(R, -R @ eye)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def image_size(self):
        return (self.width, self.height)


@dataclass(frozen=True)
class BBox:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        for name in ("xmin", "ymin", "xmax", "ymax"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.xmin < self.xmax and self.ymin < self.ymax):
            raise ValueError(f"degenerate bounding box {self.as_array()}")

    @classmethod
    def from_array(cls, a):
        return cls(*(float(v) for v in a))

    def as_array(self):
        return np.array([self.xmin, self.ymin, self.xmax, self.ymax])

    @property
    def center(self):
        return np.array([0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax)])

    @property
    def area(self):
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)

    def contains(self, p):
        return self.xmin <= p[0] <= self.xmax and self.ymin <= p[1] <= self.ymax


@dataclass(frozen=True)
class DualQuadric:
    qhat: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "qhat", np.asarray(self.qhat, dtype=float).reshape(9))

    @classmethod
    def from_matrix(cls, Q):
        """Build from any symmetric 4x4 matrix, rescaling so that Q[3,3] = -1."""
        Q = np.asarray(Q, dtype=float)
        if abs(Q[3, 3]) < 1e-300:
            raise NotAnEllipsoid("Q*[3,3] is zero; cannot normalise scale")
        Q = 0.5 * (Q + Q.T) / -Q[3, 3]
        return cls(np.array([Q[i, j] for i, j in _QHAT_INDEX]))

    @property
    def matrix(self):
        return qhat_to_matrix(self.qhat)


def qhat_to_matrix(qhat):
    Q = np.empty((4, 4))
    for v, (i, j) in zip(qhat, _QHAT_INDEX):
        Q[i, j] = Q[j, i] = v
    Q[3, 3] = -1.0
    return Q


@dataclass(frozen=True)
class Ellipsoid:
    rotation: np.ndarray
    center: np.ndarray
    semi_axes: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        object.__setattr__(self, "semi_axes", np.asarray(self.semi_axes, dtype=float).reshape(3))
        if np.any(self.semi_axes <= 0):
            raise ValueError("semi-axes must be positive")


def tangency_residual(plane, q: DualQuadric) -> float:
    plane = np.asarray(plane, dtype=float)
    return float(plane @ q.matrix @ plane)


def coefficient_row(plane):
    """Row r with ``r @ [qhat, -1] == plane^T Q* plane``."""
    p1, p2, p3, p4 = np.asarray(plane, dtype=float)
    return np.array([p1 * p1, 2 * p1 * p2, 2 * p1 * p3, 2 * p1 * p4, p2 * p2,
                     2 * p2 * p3, 2 * p2 * p4, p3 * p3, 2 * p3 * p4, p4 * p4])


def projection_matrix(pose: Pose, k: CameraIntrinsics):
    return k.K @ np.hstack([pose.rotation, pose.translation[:, None]])


def project_point(P, X):
    """Pixel coordinates and depth of a world point; depth <= 0 means behind."""
    x = P @ homog(X)
    return x[:2] / x[2], x[2]


def tangent_planes_from_bbox(b: BBox, P):
    """The four back-projected planes of the box edges, as a (4, 4) array."""
    lines = np.array([[1.0, 0.0, -b.xmin],
                      [1.0, 0.0, -b.xmax],
                      [0.0, 1.0, -b.ymin],
                      [0.0, 1.0, -b.ymax]])
    return lines @ P


def project_quadric(P, q: DualQuadric):
    C = P @ q.matrix @ P.T
    return 0.5 * (C + C.T)


def _tangent_extent(c_aa, c_a3, c33):
    # Roots of c33 x^2 - 2 c_a3 x + c_aa = 0.
    disc = c_a3 * c_a3 - c_aa * c33
    if disc < 0:
        raise NotAnEllipse("tangent-line discriminant is negative")
    s = np.sqrt(disc)
    r1, r2 = (c_a3 - s) / c33, (c_a3 + s) / c33
    return min(r1, r2), max(r1, r2)


def conic_to_bbox(C, image_size=None) -> BBox:
    """Axis-aligned box of the ellipse described by dual conic ``C``.

    ``image_size`` is ``(width, height)``; when given, the box is clipped to
    ``[0, width] x [0, height]``.
    """
    C = np.asarray(C, dtype=float)
    scale = np.abs(C).max()
    if scale == 0 or abs(C[2, 2]) <= 1e-15 * scale:
        raise NotAnEllipse("C*[2,2] vanishes (conic touches the line at infinity)")
    Cn = C / scale
    # the point conic adj(C*) is an ellipse iff C*33 * det(C*) > 0
    if Cn[2, 2] * np.linalg.det(Cn) <= 0:
        raise NotAnEllipse("dual conic is a hyperbola or degenerate")
    xmin, xmax = _tangent_extent(Cn[0, 0], Cn[0, 2], Cn[2, 2])
    ymin, ymax = _tangent_extent(Cn[1, 1], Cn[1, 2], Cn[2, 2])
    if not (xmin < xmax and ymin < ymax):
        raise NotAnEllipse("zero-extent conic")
    if image_size is not None:
        w, h = image_size
        xmin, xmax = max(xmin, 0.0), min(xmax, float(w))
        ymin, ymax = max(ymin, 0.0), min(ymax, float(h))
        if not (xmin < xmax and ymin < ymax):
            raise OffImage("projected conic lies outside the image")
    return BBox(xmin, ymin, xmax, ymax)


def quadric_center(q: DualQuadric):
    return -q.qhat[[3, 6, 8]]


def camera_frame_geometry(pose: Pose):
    """Camera centre, optical axis and principal plane in world coordinates."""
    o = pose.center
    z = pose.rotation[2].copy()
    return o, z, np.append(z, -z @ o)


def relative_pose(pose_a: Pose, pose_b: Pose) -> Pose:
    """Transform taking camera-a coordinates to camera-b coordinates."""
    return pose_b @ pose_a.inverse()


def fundamental_matrix(pose_a: Pose, pose_b: Pose, k: CameraIntrinsics):
    rel = relative_pose(pose_a, pose_b)
    if np.linalg.norm(rel.translation) < 1e-9:
        raise DegenerateBaseline("camera centres coincide")
    Kinv = np.linalg.inv(k.K)
    return Kinv.T @ skew(rel.translation) @ rel.rotation @ Kinv


def epipolar_line(pose_a: Pose, pose_b: Pose, k: CameraIntrinsics, pixel_in_a):
    """Epipolar line in image b of a pixel observed in image a."""
    return fundamental_matrix(pose_a, pose_b, k) @ homog(pixel_in_a)


def line_intersects_bbox(line, b: BBox) -> bool:
    line = np.asarray(line, dtype=float)
    corners = np.array([[b.xmin, b.ymin, 1.0], [b.xmax, b.ymin, 1.0],
                        [b.xmin, b.ymax, 1.0], [b.xmax, b.ymax, 1.0]])
    s = corners @ line
    return bool(s.min() <= 0.0 <= s.max())


def _canonical_rotation(V):
    V = V.copy()
    for c in range(2):
        col = V[:, c]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0:
            V[:, c] = -col
    V[:, 2] = np.cross(V[:, 0], V[:, 1])
    return V


def ellipsoid_from_quadric(q: DualQuadric, eps: float = 1e-10) -> Ellipsoid:
    Q = q.matrix
    t = quadric_center(q)
    M = Q[:3, :3] + np.outer(t, t)
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    if np.any(w <= eps):
        raise NotAnEllipsoid(f"shape matrix eigenvalues {w} are not all positive")
    order = np.argsort(w)[::-1]
    return Ellipsoid(_canonical_rotation(V[:, order]), t, np.sqrt(w[order]))


def constrain_to_ellipsoid(q: DualQuadric, eps: float = 1e-10) -> Ellipsoid:
    """Nearest ellipsoid obtained by taking absolute shape eigenvalues.

    Keeps the centre of ``q``; only a (near-)singular shape matrix fails.
    """
    t = quadric_center(q)
    M = q.matrix[:3, :3] + np.outer(t, t)
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    w = np.abs(w)
    if np.any(w <= eps):
        raise NotAnEllipsoid(f"shape matrix is singular (eigenvalues {w})")
    order = np.argsort(w)[::-1]
    return Ellipsoid(_canonical_rotation(V[:, order]), t, np.sqrt(w[order]))


def ellipsoid_matrix(e: Ellipsoid):
    """Dual quadric matrix ``Z diag(a^2, b^2, c^2, -1) Z^T``."""
    Z = np.eye(4)
    Z[:3, :3] = e.rotation
    Z[:3, 3] = e.center
    return Z @ np.diag(np.append(e.semi_axes ** 2, -1.0)) @ Z.T


def quadric_from_ellipsoid(e: Ellipsoid) -> DualQuadric:
    return DualQuadric.from_matrix(ellipsoid_matrix(e))


def ellipsoid_surface_points(e: Ellipsoid, n: int = 400, rng=None):
    """Points on the ellipsoid surface (Fibonacci lattice, or random if ``rng``)."""
    if rng is None:
        i = np.arange(n) + 0.5
        phi = np.arccos(1 - 2 * i / n)
        theta = np.pi * (1 + 5 ** 0.5) * i
    else:
        phi = np.arccos(rng.uniform(-1, 1, n))
        theta = rng.uniform(0, 2 * np.pi, n)
    u = np.column_stack([np.sin(phi) * np.cos(theta), np.sin(phi) * np.sin(theta), np.cos(phi)])
    return (u * e.semi_axes) @ e.rotation.T + e.center
