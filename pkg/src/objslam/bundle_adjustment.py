"""Joint refinement of keyframe poses and ellipsoid landmarks.

The state holds one :class:`~objslam.geometry.Pose` per keyframe and one
:class:`~objslam.geometry.Ellipsoid` per object.  Local coordinates are

* pose: ``(dw, dt)`` with ``R <- exp(dw) R`` and ``t <- t + dt``;
* ellipsoid: ``(dc, dw, ds)`` with ``c <- c + dc``, ``R <- exp(dw) R`` and
  ``axes <- axes * exp(ds)``, so semi-axes stay positive.

The first pose is held fixed.  Jacobians are central differences evaluated in
batches over all factors of a kind.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.spatial.transform import Rotation

from .errors import NoFactors, NotAnEllipse, OffImage
from .geometry import (BBox, CameraIntrinsics, Ellipsoid, Pose, conic_to_bbox, project_quadric,
                       projection_matrix, quadric_from_ellipsoid, so3_exp, so3_log)

FD_STEP = 1e-6
POSE_DOF = 6
OBJECT_DOF = 9


@dataclass
class OdometryFactor:
    """Relative-motion measurement ``u`` between poses ``i`` and ``j``."""

    i: int
    j: int
    measured: Pose
    covariance: np.ndarray

    def __post_init__(self):
        self.covariance = np.asarray(self.covariance, dtype=float).reshape(6, 6)


@dataclass
class SemanticFactor:
    """Bounding box of object ``obj`` seen from pose ``i``."""

    i: int
    obj: int
    bbox: BBox
    intrinsics: CameraIntrinsics
    covariance: np.ndarray

    def __post_init__(self):
        self.covariance = np.asarray(self.covariance, dtype=float).reshape(4, 4)


@dataclass
class BaState:
    poses: list
    objects: dict

    def copy(self):
        return BaState(list(self.poses), dict(self.objects))


@dataclass
class LmSettings:
    max_iters: int = 30
    initial_damping: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 0.5
    max_damping: float = 1e10
    rel_tol: float = 1e-9
    abs_tol: float = 1e-15


@dataclass
class BaReport:
    initial_cost: float
    final_cost: float = float("nan")
    iterations: list = field(default_factory=list)
    cancelled: bool = False
    reason: str = ""
    n_odometry: int = 0
    n_semantic: int = 0
    skipped: int = 0
    elapsed: float = 0.0

    @property
    def n_iterations(self):
        return len(self.iterations)


def odometry_covariance(sigma_rot, sigma_trans, scale=1.0):
    return scale * np.diag([sigma_rot ** 2] * 3 + [sigma_trans ** 2] * 3)


def pose_residual(pose: Pose):
    return np.concatenate([so3_log(pose.rotation), pose.translation])


def odometry_residual(x_i: Pose, x_j: Pose, u: Pose):
    """``log(u^-1 (x_j x_i^-1))`` as (rotation vector, translation)."""
    return pose_residual(u.inverse() @ (x_j @ x_i.inverse()))


def semantic_residual(x_i: Pose, k: CameraIntrinsics, e: Ellipsoid, z: BBox, image_size=None):
    """Predicted minus measured box; raises ``OffImage``/``NotAnEllipse``."""
    if image_size is None:
        image_size = k.image_size
    if x_i.apply(e.center)[2] <= 0:
        raise OffImage("ellipsoid centre is behind the camera")
    C = project_quadric(projection_matrix(x_i, k), quadric_from_ellipsoid(e))
    return conic_to_bbox(C, image_size).as_array() - z.as_array()


def retract_ellipsoid(e: Ellipsoid, delta):
    delta = np.asarray(delta, dtype=float)
    return Ellipsoid(so3_exp(delta[3:6]) @ e.rotation, e.center + delta[:3],
                     e.semi_axes * np.exp(delta[6:9]))


def _whitener(cov):
    # W with W' W = cov^-1
    L = np.linalg.cholesky(cov)
    return np.linalg.inv(L)


# batched evaluation ---------------------------------------------------------

def _exp_batch(w):
    return Rotation.from_rotvec(w).as_matrix()


def _log_batch(R):
    return Rotation.from_matrix(R).as_rotvec()


def _det3(C):
    return (C[:, 0, 0] * (C[:, 1, 1] * C[:, 2, 2] - C[:, 1, 2] * C[:, 2, 1])
            - C[:, 0, 1] * (C[:, 1, 0] * C[:, 2, 2] - C[:, 1, 2] * C[:, 2, 0])
            + C[:, 0, 2] * (C[:, 1, 0] * C[:, 2, 1] - C[:, 1, 1] * C[:, 2, 0]))


def _predict_boxes(R, t, K, size, eR, ec, ea):
    """Clipped conic boxes for n (pose, ellipsoid) pairs; returns (boxes, valid)."""
    n = len(R)
    # P Z = K [R eR | R c + t];  C = (P Z) diag(a^2, b^2, c^2, -1) (P Z)'
    A = np.empty((n, 3, 4))
    A[:, :, :3] = R @ eR
    A[:, :, 3] = (R @ ec[:, :, None])[:, :, 0] + t
    M = K @ A
    d = np.empty((n, 1, 4))
    d[:, 0, :3] = ea ** 2
    d[:, 0, 3] = -1.0
    C = (M * d) @ M.transpose(0, 2, 1)
    C = C / np.abs(C).reshape(n, -1).max(axis=1)[:, None, None]
    c33 = C[:, 2, 2]
    # a centre behind the camera would give a mirrored ghost ellipse
    valid = (A[:, 2, 3] > 0) & (np.abs(c33) > 1e-15) & (c33 * _det3(C) > 0)
    safe = np.where(valid, c33, 1.0)
    boxes = np.empty((n, 4))
    for a, (lo, hi) in enumerate(((0, 2), (1, 3))):
        disc = C[:, a, 2] ** 2 - C[:, a, a] * c33
        valid &= disc >= 0
        s = np.sqrt(np.maximum(disc, 0.0))
        r1 = (C[:, a, 2] - s) / safe
        r2 = (C[:, a, 2] + s) / safe
        boxes[:, lo] = np.minimum(r1, r2)
        boxes[:, hi] = np.maximum(r1, r2)
    boxes[:, :2] = np.maximum(boxes[:, :2], 0.0)
    boxes[:, 2] = np.minimum(boxes[:, 2], size[:, 0])
    boxes[:, 3] = np.minimum(boxes[:, 3], size[:, 1])
    valid &= (boxes[:, 0] < boxes[:, 2]) & (boxes[:, 1] < boxes[:, 3])
    return boxes, valid


class _Problem:
    """Factor arrays and parameter layout for one optimisation run."""

    def __init__(self, factors, state: BaState):
        self.odo = [f for f in factors if isinstance(f, OdometryFactor)]
        self.sem = [f for f in factors if isinstance(f, SemanticFactor)]
        self.n_poses = len(state.poses)
        self.obj_keys = sorted(state.objects)
        self.obj_index = {k: n for n, k in enumerate(self.obj_keys)}
        self.n_params = POSE_DOF * (self.n_poses - 1) + OBJECT_DOF * len(self.obj_keys)

        if self.odo:
            self.odo_i = np.array([f.i for f in self.odo])
            self.odo_j = np.array([f.j for f in self.odo])
            u = [f.measured for f in self.odo]
            self.u_inv_R = np.array([p.rotation.T for p in u])
            self.u_inv_t = np.array([-p.rotation.T @ p.translation for p in u])
            self.odo_W = np.array([_whitener(f.covariance) for f in self.odo])
        if self.sem:
            self.sem_i = np.array([f.i for f in self.sem])
            self.sem_o = np.array([self.obj_index[f.obj] for f in self.sem])
            self.sem_K = np.array([f.intrinsics.K for f in self.sem])
            self.sem_size = np.array([f.intrinsics.image_size for f in self.sem], dtype=float)
            self.sem_z = np.array([f.bbox.as_array() for f in self.sem])
            self.sem_W = np.array([_whitener(f.covariance) for f in self.sem])

    def pose_cols(self, i):
        return None if i == 0 else POSE_DOF * (i - 1)

    def obj_cols(self, o):
        return POSE_DOF * (self.n_poses - 1) + OBJECT_DOF * o

    # residual blocks ---------------------------------------------------------

    def arrays(self, state):
        R = np.array([p.rotation for p in state.poses])
        t = np.array([p.translation for p in state.poses])
        ells = [state.objects[k] for k in self.obj_keys]
        eR = np.array([e.rotation for e in ells]).reshape(-1, 3, 3)
        ec = np.array([e.center for e in ells]).reshape(-1, 3)
        ea = np.array([e.semi_axes for e in ells]).reshape(-1, 3)
        return R, t, eR, ec, ea

    def odo_res(self, Ri, ti, Rj, tj, idx=slice(None)):
        # x_j x_i^-1
        Rrel = Rj @ Ri.transpose(0, 2, 1)
        trel = tj - np.einsum("nab,nb->na", Rrel, ti)
        uR, ut = self.u_inv_R[idx], self.u_inv_t[idx]
        Re = uR @ Rrel
        te = np.einsum("nab,nb->na", uR, trel) + ut
        return np.concatenate([_log_batch(Re), te], axis=1)

    def sem_res(self, R, t, eR, ec, ea):
        boxes, valid = _predict_boxes(R, t, self.sem_K, self.sem_size, eR, ec, ea)
        return boxes - self.sem_z, valid

    def evaluate(self, state):
        """Whitened residual vector and the number of skipped semantic factors."""
        R, t, eR, ec, ea = self.arrays(state)
        parts = []
        skipped = 0
        if self.odo:
            r = self.odo_res(R[self.odo_i], t[self.odo_i], R[self.odo_j], t[self.odo_j])
            parts.append(np.einsum("nab,nb->na", self.odo_W, r).ravel())
        if self.sem:
            r, valid = self.sem_res(R[self.sem_i], t[self.sem_i], eR[self.sem_o], ec[self.sem_o],
                                    ea[self.sem_o])
            r[~valid] = 0.0
            skipped = int((~valid).sum())
            parts.append(np.einsum("nab,nb->na", self.sem_W, r).ravel())
        res = np.concatenate(parts) if parts else np.zeros(0)
        return res, skipped

    def jacobian(self, state, h=FD_STEP):
        """Sparse whitened Jacobian of :meth:`evaluate` by central differences."""
        R, t, eR, ec, ea = self.arrays(state)
        n_odo = len(self.odo)
        shape = (6 * n_odo + 4 * len(self.sem), self.n_params)
        ri, ci, vals = [], [], []

        def put(rows, cols, block):
            ri.append(rows.ravel())
            ci.append(np.broadcast_to(cols[:, None], rows.shape).ravel())
            vals.append(block.ravel())
        eye = np.eye(3)
        rot_p = [so3_exp(h * eye[a]) for a in range(3)]
        rot_m = [so3_exp(-h * eye[a]) for a in range(3)]

        def pose_perturb(Rs, ts, d, sign):
            if d < 3:
                return (rot_p[d] if sign > 0 else rot_m[d]) @ Rs, ts
            ts = ts.copy()
            ts[:, d - 3] += sign * h
            return Rs, ts

        if self.odo:
            Ri, ti = R[self.odo_i], t[self.odo_i]
            Rj, tj = R[self.odo_j], t[self.odo_j]
            rows = np.arange(n_odo)[:, None] * 6 + np.arange(6)
            for which in ("i", "j"):
                idx = self.odo_i if which == "i" else self.odo_j
                live = idx != 0
                if not live.any():
                    continue
                for d in range(POSE_DOF):
                    out = []
                    for sign in (1, -1):
                        if which == "i":
                            Rp, tp = pose_perturb(Ri, ti, d, sign)
                            out.append(self.odo_res(Rp, tp, Rj, tj))
                        else:
                            Rp, tp = pose_perturb(Rj, tj, d, sign)
                            out.append(self.odo_res(Ri, ti, Rp, tp))
                    col = (out[0] - out[1]) / (2 * h)
                    col = np.einsum("nab,nb->na", self.odo_W, col)
                    put(rows[live], POSE_DOF * (idx[live] - 1) + d, col[live])

        if self.sem:
            base = 6 * n_odo
            Rs, ts = R[self.sem_i], t[self.sem_i]
            oR, oc, oa = eR[self.sem_o], ec[self.sem_o], ea[self.sem_o]
            _, valid0 = self.sem_res(Rs, ts, oR, oc, oa)
            rows = base + np.arange(len(self.sem))[:, None] * 4 + np.arange(4)
            live_pose = valid0 & (self.sem_i != 0)

            # all 2 x 15 perturbed copies in one batched evaluation
            cases = []
            for d in range(POSE_DOF):
                for sign in (1, -1):
                    Rp, tp = pose_perturb(Rs, ts, d, sign)
                    cases.append((Rp, tp, oR, oc, oa))
            for d in range(OBJECT_DOF):
                for sign in (1, -1):
                    if d < 3:
                        cp = oc.copy()
                        cp[:, d] += sign * h
                        cases.append((Rs, ts, oR, cp, oa))
                    elif d < 6:
                        rot = rot_p[d - 3] if sign > 0 else rot_m[d - 3]
                        cases.append((Rs, ts, rot @ oR, oc, oa))
                    else:
                        ap = oa.copy()
                        ap[:, d - 6] *= np.exp(sign * h)
                        cases.append((Rs, ts, oR, oc, ap))
            m = len(self.sem)
            stacked = [np.concatenate(parts) for parts in zip(*cases)]
            reps = len(cases)
            boxes, ok = _predict_boxes(stacked[0], stacked[1], np.tile(self.sem_K, (reps, 1, 1)),
                                       np.tile(self.sem_size, (reps, 1)), *stacked[2:])
            boxes = boxes.reshape(reps, m, 4)
            ok = ok.reshape(reps, m)
            for d in range(POSE_DOF + OBJECT_DOF):
                p, q = 2 * d, 2 * d + 1
                col = np.where((ok[p] & ok[q])[:, None], (boxes[p] - boxes[q]) / (2 * h), 0.0)
                col = np.einsum("nab,nb->na", self.sem_W, col)
                if d < POSE_DOF:
                    put(rows[live_pose], POSE_DOF * (self.sem_i[live_pose] - 1) + d, col[live_pose])
                else:
                    put(rows[valid0], self.obj_cols(self.sem_o[valid0]) + d - POSE_DOF, col[valid0])
        if not vals:
            return sparse.csr_matrix(shape)
        return sparse.coo_matrix((np.concatenate(vals), (np.concatenate(ri), np.concatenate(ci))),
                                 shape=shape).tocsr()

    def retract(self, state, delta):
        poses = list(state.poses)
        for i in range(1, self.n_poses):
            c = self.pose_cols(i)
            poses[i] = poses[i].retract(delta[c:c + POSE_DOF])
        objects = dict(state.objects)
        for o, key in enumerate(self.obj_keys):
            c = self.obj_cols(o)
            objects[key] = retract_ellipsoid(objects[key], delta[c:c + OBJECT_DOF])
        return BaState(poses, objects)


def total_cost(factors, state: BaState, return_skipped=False):
    """Sum of squared Mahalanobis residuals; unprojectable factors add 0."""
    res, skipped = _Problem(list(factors), state).evaluate(state)
    cost = float(res @ res)
    return (cost, skipped) if return_skipped else cost


def assembled_jacobian(factors, state: BaState, h=FD_STEP):
    """Whitened Jacobian in the local coordinates (first pose excluded)."""
    return _Problem(list(factors), state).jacobian(state, h).toarray()


def optimize(factors, state: BaState, settings: Optional[LmSettings] = None,
             cancel_token: Optional[threading.Event] = None, max_iters=None):
    """Levenberg-Marquardt over all poses but the first and all objects.

    Returns ``(state, report)``.  ``cancel_token`` is polled between
    iterations; on cancellation the best state so far is returned.
    """
    factors = list(factors)
    if not factors:
        raise NoFactors("bundle adjustment needs at least one factor")
    s = settings or LmSettings()
    max_iters = s.max_iters if max_iters is None else max_iters
    with np.errstate(over="ignore", invalid="ignore"):
        return _optimize(factors, state, s, cancel_token, max_iters)


def _optimize(factors, state, s: LmSettings, cancel_token, max_iters):
    t0 = time.perf_counter()
    prob = _Problem(factors, state)
    res, skipped = prob.evaluate(state)
    cost = float(res @ res)
    report = BaReport(cost, n_odometry=len(prob.odo), n_semantic=len(prob.sem), skipped=skipped)
    lam = s.initial_damping

    if prob.n_params == 0 or cost <= s.abs_tol:
        report.final_cost, report.reason = cost, "converged"
        report.elapsed = time.perf_counter() - t0
        return state, report

    J = prob.jacobian(state)
    for it in range(max_iters):
        if cancel_token is not None and cancel_token.is_set():
            report.cancelled, report.reason = True, "cancelled"
            break
        JtJ = (J.T @ J).toarray()
        g = J.T @ res
        diag = np.diag(JtJ).copy()
        floor = 1e-12 * max(diag.max(), 1.0)
        accepted = False
        while lam <= s.max_damping:
            A = JtJ + lam * np.diag(np.maximum(diag, floor))
            try:
                step = -np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                lam *= s.damping_up
                continue
            try:
                cand = prob.retract(state, step)
            except ValueError:
                # step collapsed a semi-axis to zero
                lam *= s.damping_up
                continue
            res_c, skipped_c = prob.evaluate(cand)
            cost_c = float(res_c @ res_c)
            # a step may not buy its decrease by pushing factors off the image
            if np.isfinite(cost_c) and cost_c <= cost and skipped_c <= skipped:
                accepted = True
                break
            lam *= s.damping_up
        report.iterations.append({"iteration": it + 1, "cost": cost_c if accepted else cost,
                                  "damping": lam, "accepted": accepted,
                                  "skipped": skipped_c if accepted else skipped})
        if not accepted:
            report.reason = "damping limit"
            break
        decrease = cost - cost_c
        state, res, cost, skipped = cand, res_c, cost_c, skipped_c
        lam = max(lam * s.damping_down, 1e-12)
        if cost <= s.abs_tol or decrease <= s.rel_tol * max(cost + decrease, 1e-300):
            report.reason = "converged"
            break
        J = prob.jacobian(state)
    else:
        report.reason = "max iterations"
    report.final_cost = cost
    report.skipped = skipped
    report.elapsed = time.perf_counter() - t0
    return state, report
