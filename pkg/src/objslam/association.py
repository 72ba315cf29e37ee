"""Frame-to-map object association: gating, appearance scores, assignment."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DegenerateBaseline, ZeroVector
from .geometry import (CameraIntrinsics, Pose, epipolar_line, homog, line_intersects_bbox,
                       project_point, projection_matrix, relative_pose)
from .vocabulary import l1_score

SCORE_SCALE = 10 ** 6
CASE1 = "case1"
CASE2 = "case2"


@dataclass
class CandidateGate:
    index: int
    candidates: list = field(default_factory=list)  # object ids
    reasons: dict = field(default_factory=dict)  # object id -> CASE1 | CASE2


@dataclass
class ScoreMatrix:
    """Scores for one class; NaN marks an absent (gated-out) edge."""

    rows: list  # measurement indices in the frame
    object_ids: list
    scores: np.ndarray

    @classmethod
    def from_array(cls, scores):
        scores = np.asarray(scores, dtype=float)
        return cls(list(range(scores.shape[0])), list(range(scores.shape[1])), scores)


@dataclass
class Assignment:
    matches: dict  # row position -> column position (only assigned rows)
    objective: float
    integer_objective: int

    def column_of(self, row) -> Optional[int]:
        return self.matches.get(row)


def _transfer_pixel(pose_a: Pose, pose_b: Pose, k: CameraIntrinsics, pixel):
    # zero baseline: pixels map through the infinite homography K R K^-1
    R = relative_pose(pose_a, pose_b).rotation
    x = k.K @ R @ np.linalg.solve(k.K, homog(pixel))
    return x[:2] / x[2]


def gate_candidates(z, frame_pose: Pose, k: CameraIntrinsics, map_db, index=0) -> CandidateGate:
    """Map objects of the same class that are geometrically compatible with ``z``."""
    gate = CandidateGate(index)
    P = projection_matrix(frame_pose, k)
    for oid in sorted(map_db.objects):
        obj = map_db.objects[oid]
        if obj.class_label != z.class_label:
            continue
        if obj.ellipsoid is not None:
            uv, depth = project_point(P, obj.ellipsoid.center)
            if depth > 0 and z.bbox.contains(uv):
                gate.candidates.append(oid)
                gate.reasons[oid] = CASE1
        elif obj.keyframe_ids:
            kf, meas = map_db.latest_observation(obj)
            pixel = meas.bbox.center
            try:
                line = epipolar_line(kf.pose, frame_pose, k, pixel)
                ok = line_intersects_bbox(line, z.bbox)
            except DegenerateBaseline:
                ok = z.bbox.contains(_transfer_pixel(kf.pose, frame_pose, k, pixel))
            if ok:
                gate.candidates.append(oid)
                gate.reasons[oid] = CASE2
    return gate


def association_score(z_bow, obj, map_db) -> float:
    """Best L1 score between ``z_bow`` and the object's stored BoW vectors."""
    best = 0.0
    for _, meas in map_db.observations(obj):
        if meas is None or not meas.bow or not z_bow:
            continue
        try:
            best = max(best, l1_score(meas.bow, z_bow))
        except ZeroVector:
            continue
    return best


def score_matrix(measurements, gates, map_db, min_score=0.0) -> ScoreMatrix:
    rows = [g.index for g in gates]
    cols = sorted({oid for g in gates for oid in g.candidates})
    col_pos = {oid: j for j, oid in enumerate(cols)}
    S = np.full((len(rows), len(cols)), np.nan)
    for r, g in enumerate(gates):
        z = measurements[g.index]
        for oid in g.candidates:
            s = association_score(z.bow, map_db.objects[oid], map_db)
            if s >= min_score:
                S[r, col_pos[oid]] = s
    return ScoreMatrix(rows, cols, S)


def max_weight_matching(weights, present):
    """Maximum-weight matching on non-negative integer weights.

    Among optimal matchings, one with the most edges is returned; edges not in
    ``present`` are never used.
    """
    weights = np.asarray(weights, dtype=np.int64)
    present = np.asarray(present, dtype=bool)
    n, m = weights.shape
    if n == 0 or m == 0 or not present.any():
        return {}
    if weights.min(initial=0) < 0:
        raise ValueError("weights must be non-negative")
    # lexicographic objective: total weight first, then cardinality
    bonus = min(n, m) + 1
    W = np.where(present, weights * bonus + 1, 0)
    r, c = linear_sum_assignment(W, maximize=True)
    return {int(i): int(j) for i, j in zip(r, c) if present[i, j]}


def solve_assignment(m) -> Assignment:
    """Optimal assignment for a :class:`ScoreMatrix` (or raw array with NaN gaps)."""
    if not isinstance(m, ScoreMatrix):
        m = ScoreMatrix.from_array(m)
    S = m.scores
    if S.size == 0:
        return Assignment({}, 0.0, 0)
    present = ~np.isnan(S)
    ints = np.where(present, np.rint(np.nan_to_num(S) * SCORE_SCALE), 0).astype(np.int64)
    matches = max_weight_matching(ints, present)
    obj = float(sum(S[i, j] for i, j in matches.items()))
    iobj = int(sum(ints[i, j] for i, j in matches.items()))
    return Assignment(matches, obj, iobj)


@dataclass
class MatchResult:
    object_id: Optional[int]
    score: float
    n_candidates: int  # objects passing the geometric gate
    n_plausible: int = 0  # gated objects whose score reaches the threshold


def associate_frame(measurements, frame_pose, k, map_db, min_score=0.0):
    """Associate every measurement of a frame; returns one :class:`MatchResult` each."""
    results = [MatchResult(None, 0.0, 0) for _ in measurements]
    by_class = {}
    for i, z in enumerate(measurements):
        by_class.setdefault(z.class_label, []).append(i)
    for c in sorted(by_class):
        gates = [gate_candidates(measurements[i], frame_pose, k, map_db, index=i) for i in by_class[c]]
        for g in gates:
            results[g.index].n_candidates = len(g.candidates)
        gates = [g for g in gates if g.candidates]
        if not gates:
            continue
        sm = score_matrix(measurements, gates, map_db, min_score)
        for r, row in enumerate(sm.rows):
            results[row].n_plausible = int((~np.isnan(sm.scores[r])).sum())
        sol = solve_assignment(sm)
        for r, j in sol.matches.items():
            res = results[sm.rows[r]]
            res.object_id = sm.object_ids[j]
            res.score = float(sm.scores[r, j])
    return results

