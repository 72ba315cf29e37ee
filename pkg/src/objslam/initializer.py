"""Dual-quadric initialisation from bounding-box observations.

Two estimators are provided: the constrained quadratic program (``"qp"``)
and the unconstrained SVD null-space fit (``"svd"``) used as a baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (DegenerateScale, Infeasible, MaxIterations, NotAnEllipse, NotAnEllipsoid,
                     OffImage, TooFewObservations)
from .geometry import (BBox, CameraIntrinsics, DualQuadric, Ellipsoid, Pose, camera_frame_geometry,
                       coefficient_row, conic_to_bbox, constrain_to_ellipsoid, ellipsoid_from_quadric, project_quadric,
                       projection_matrix, quadric_from_ellipsoid, tangent_planes_from_bbox)
from .qp import QpProblem, QpSolution, solve_qp

MIN_OBSERVATIONS = 10
MAX_REPROJECTION_ERROR = 100.0
CONSTRAINT_TOL = 1e-6
DEPTH_MARGIN = 1e-6
RANK_TOL = 1e-9  # relative singular-value floor for a unique fit

# indices of q4, q7, q9: the negated quadric centre
_CENTER_IDX = np.array([3, 6, 8])


@dataclass(frozen=True)
class Observation:
    pose: Pose
    intrinsics: CameraIntrinsics
    bbox: BBox


@dataclass
class Constraints:
    """Rows ``G q <= h`` with a label per row (``cs1``, ``cs2``, ``cs3``, ``depth``)."""

    G: np.ndarray
    h: np.ndarray
    kinds: list

    def violation(self, qhat):
        if len(self.h) == 0:
            return 0.0
        return float(max(0.0, (self.G @ qhat - self.h).max()))


def _unit(planes):
    return planes / np.linalg.norm(planes, axis=1, keepdims=True)


def design_matrix(obs, normalize=True):
    """Stack one coefficient row per tangent plane (4 per observation)."""
    rows = []
    for o in obs:
        planes = tangent_planes_from_bbox(o.bbox, projection_matrix(o.pose, o.intrinsics))
        if normalize:
            planes = _unit(planes)
        rows.extend(coefficient_row(pl) for pl in planes)
    return np.array(rows).reshape(-1, 10)


def assemble_system(obs, min_obs=MIN_OBSERVATIONS, normalize=True):
    """Design matrix A and the quadratic objective ``1/2 q'Hq + f'q``.

    With ``B = A'A``, ``H`` is the upper-left 9x9 block and ``f = -B[:9, 9]``,
    so that ``2 (1/2 q'Hq + f'q) + B[9, 9] == |A [q; -1]|^2``.  The returned
    problem carries the Tikhonov term ``1e-9 trace(H) / 9`` separately.
    """
    obs = list(obs)
    if len(obs) < min_obs:
        raise TooFewObservations(f"{len(obs)} observations, need {min_obs}")
    A = design_matrix(obs, normalize)
    B = A.T @ A
    H = B[:9, :9].copy()
    f = -B[:9, 9].copy()
    return A, QpProblem(H, f, regularization=1e-9 * np.trace(H) / 9.0)


def _row(g, h, kind, G, hs, kinds):
    s = np.linalg.norm(g)
    if s == 0:
        return
    G.append(g / s)
    hs.append(h / s)
    kinds.append(kind)


def build_constraints(obs, depth_margin=DEPTH_MARGIN) -> Constraints:
    """Linear inequality rows keeping the quadric in front of every camera,
    off its principal plane, and with its centre projecting inside each box.
    Rows are scaled to unit norm."""
    G, hs, kinds = [], [], []
    for o in obs:
        o_k, z_k, plane = camera_frame_geometry(o.pose)
        # cs1: (c - o_k) . z_k >= 0 with c = -q[3,6,8]
        g = np.zeros(9)
        g[_CENTER_IDX] = z_k
        _row(g, -z_k @ o_k, "cs1", G, hs, kinds)
        # cs2: plane' Q* plane <= 0, with Q*[3,3] = -1 moved to the right side
        r = coefficient_row(plane)
        _row(r[:9], r[9], "cs2", G, hs, kinds)
        # cs3: [u, v, w] = P [c; 1] is affine in q
        P = projection_matrix(o.pose, o.intrinsics)
        a = np.zeros((3, 9))
        a[:, _CENTER_IDX] = -P[:, :3]
        b = P[:, 3]
        au, av, aw = a
        bu, bv, bw = b
        bb = o.bbox
        _row(au - bb.xmax * aw, -(bu - bb.xmax * bw), "cs3", G, hs, kinds)
        _row(bb.xmin * aw - au, -(bb.xmin * bw - bu), "cs3", G, hs, kinds)
        _row(av - bb.ymax * aw, -(bv - bb.ymax * bw), "cs3", G, hs, kinds)
        _row(bb.ymin * aw - av, -(bb.ymin * bw - bv), "cs3", G, hs, kinds)
        _row(-aw, bw - depth_margin, "depth", G, hs, kinds)
    return Constraints(np.array(G).reshape(-1, 9), np.array(hs), kinds)


def svd_init(A):
    """Null-space fit: right singular vector of the smallest singular value."""
    A = np.asarray(A, dtype=float)
    if A.shape[0] < 9:
        raise TooFewObservations("need at least 9 plane rows")
    v = np.linalg.svd(A)[2][-1]
    if abs(v[9]) < 1e-12:
        raise DegenerateScale("null vector has vanishing last coordinate")
    return v[:9] / -v[9]


def bbox_error(predicted: BBox, measured: BBox) -> float:
    """Mean absolute difference of the four box coordinates (pixels)."""
    return float(np.mean(np.abs(predicted.as_array() - measured.as_array())))


def reprojection_error(q: DualQuadric, obs):
    errs = []
    for o in obs:
        C = project_quadric(projection_matrix(o.pose, o.intrinsics), q)
        errs.append(bbox_error(conic_to_bbox(C, o.intrinsics.image_size), o.bbox))
    return float(np.mean(errs))


@dataclass
class ValidationResult:
    ok: bool
    reason: Optional[str] = None
    reprojection_error: float = float("nan")
    ellipsoid: Optional[Ellipsoid] = None


def validate_quadric(qhat, obs, max_error=MAX_REPROJECTION_ERROR, tol=CONSTRAINT_TOL,
                     constraints=None) -> ValidationResult:
    q = DualQuadric(qhat)
    try:
        ell = ellipsoid_from_quadric(q)
    except NotAnEllipsoid:
        return ValidationResult(False, "NotAnEllipsoid")
    # a fit is only meaningful when the planes pin down all nine parameters
    s = np.linalg.svd(design_matrix(obs), compute_uv=False)
    if len(s) < 9 or s[8] <= RANK_TOL * s[0]:
        return ValidationResult(False, "Degenerate", ellipsoid=ell)
    cons = constraints if constraints is not None else build_constraints(obs)
    if cons.violation(q.qhat) > tol:
        worst = int(np.argmax(cons.G @ q.qhat - cons.h))
        return ValidationResult(False, f"ConstraintViolated:{cons.kinds[worst]}", ellipsoid=ell)
    try:
        err = reprojection_error(q, obs)
    except (NotAnEllipse, OffImage):
        return ValidationResult(False, "ProjectionFailed", ellipsoid=ell)
    if not err <= max_error:
        return ValidationResult(False, "ReprojectionError", err, ell)
    return ValidationResult(True, None, err, ell)


@dataclass
class InitResult:
    ok: bool
    ellipsoid: Optional[Ellipsoid] = None
    qhat: Optional[np.ndarray] = None
    reason: Optional[str] = None
    validation: Optional[ValidationResult] = None
    qp: Optional[QpSolution] = None
    diagnostics: dict = field(default_factory=dict)


def initialize_object(obs, method="qp", min_obs=MIN_OBSERVATIONS, max_error=MAX_REPROJECTION_ERROR,
                      diagnostics=False) -> InitResult:
    """Estimate an ellipsoid from box observations; failures are returned, not raised."""
    obs = list(obs)
    try:
        A, problem = assemble_system(obs, min_obs)
    except TooFewObservations as exc:
        return InitResult(False, reason=f"TooFewObservations: {exc}")
    cons = build_constraints(obs)
    sol = None
    try:
        if method == "qp":
            problem.G, problem.h = cons.G, cons.h
            sol = solve_qp(problem)
            qhat = sol.x
        elif method == "svd":
            qhat = svd_init(A)
        else:
            raise ValueError(f"unknown method {method!r}")
    except (Infeasible, MaxIterations, DegenerateScale, np.linalg.LinAlgError) as exc:
        return InitResult(False, reason=type(exc).__name__, qp=sol)
    raw = qhat
    try:
        qhat = quadric_from_ellipsoid(constrain_to_ellipsoid(DualQuadric(qhat))).qhat
    except NotAnEllipsoid:
        return InitResult(False, qhat=raw, reason="NotAnEllipsoid", qp=sol)
    val = validate_quadric(qhat, obs, max_error, constraints=cons)
    diag = {}
    if diagnostics:
        diag = {"A": A.tolist(), "G": cons.G.tolist(), "h": cons.h.tolist(), "kinds": cons.kinds,
                "qhat_raw": raw.tolist(), "qhat": qhat.tolist()}
        if sol is not None:
            diag.update(stationarity=sol.stationarity, feasibility=sol.feasibility,
                        complementarity=sol.complementarity, iterations=sol.iterations)
    if not val.ok:
        return InitResult(False, None, qhat, val.reason, val, sol, diag)
    return InitResult(True, val.ellipsoid, qhat, None, val, sol, diag)
