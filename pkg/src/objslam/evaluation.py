"""Metrics against ground truth: association accuracy, box reprojection error,
and initialisation success rates."""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .association import solve_assignment
from .errors import EmptyOverlap, NoInitializedObjects, NotAnEllipse, OffImage
from .geometry import conic_to_bbox, project_quadric, projection_matrix, quadric_from_ellipsoid
from .initializer import bbox_error, initialize_object

DA_HEADER = ["run", "r_da", "r_max", "accuracy", "n_measurements", "n_assigned", "coverage"]
REPROJ_HEADER = ["stage", "pairs", "skipped", "mean_error_px"]
INIT_HEADER = ["method", "count", "trials", "successes", "rate"]
METHOD_NAMES = {"qp": "Quadratic", "svd": "SVD"}


@dataclass
class IdCorrespondence:
    gt_ids: list
    assigned_ids: list
    reward: np.ndarray
    matching: dict  # gt id -> assigned id
    r_da: int
    r_max: int
    n_measurements: int = 0

    @property
    def accuracy(self):
        return self.r_da / self.r_max

    @property
    def coverage(self):
        """Fraction of ground-truth-labelled measurements that received an id."""
        return self.r_max / self.n_measurements if self.n_measurements else 0.0

    def r(self, gt, assigned):
        try:
            return int(self.reward[self.gt_ids.index(gt), self.assigned_ids.index(assigned)])
        except ValueError:
            return 0


def da_accuracy(gt, assigned) -> IdCorrespondence:
    """Bipartite-matching accuracy of assigned ids against ground-truth ids.

    Pairs where either side is ``None`` do not count towards ``r_max``.
    """
    gt, assigned = list(gt), list(assigned)
    if len(gt) != len(assigned):
        raise ValueError("id sequences differ in length")
    pairs = Counter((g, a) for g, a in zip(gt, assigned) if g is not None and a is not None)
    r_max = sum(pairs.values())
    if r_max == 0:
        raise EmptyOverlap("no measurement carries both a ground-truth and an assigned id")
    gi = sorted({g for g, _ in pairs}, key=repr)
    ai = sorted({a for _, a in pairs}, key=repr)
    R = np.zeros((len(gi), len(ai)), dtype=np.int64)
    gpos = {g: n for n, g in enumerate(gi)}
    apos = {a: n for n, a in enumerate(ai)}
    for (g, a), c in pairs.items():
        R[gpos[g], apos[a]] = c
    # counts are integers already; scale back down so integerisation is exact
    sol = solve_assignment(np.where(R > 0, R / 1e6, np.nan))
    matching = {gi[r]: ai[c] for r, c in sol.matches.items()}
    r_da = int(sum(R[r, c] for r, c in sol.matches.items()))
    n_labeled = sum(g is not None for g in gt)
    return IdCorrespondence(gi, ai, R, matching, r_da, r_max, n_labeled)


def reprojection_pairs(map_db):
    """(object, keyframe, measurement) triples for every initialised object."""
    for oid in sorted(map_db.objects):
        obj = map_db.objects[oid]
        if obj.ellipsoid is None:
            continue
        for kf, meas in map_db.observations(obj):
            yield obj, kf, meas


def reprojection_error(map_db, return_details=False):
    """Mean box error over (object, observing keyframe) pairs, in pixels."""
    errs = []
    skipped = 0
    for obj, kf, meas in reprojection_pairs(map_db):
        P = projection_matrix(kf.pose, kf.intrinsics)
        if kf.pose.apply(obj.ellipsoid.center)[2] <= 0:
            skipped += 1
            continue
        try:
            pred = conic_to_bbox(project_quadric(P, quadric_from_ellipsoid(obj.ellipsoid)),
                                 kf.intrinsics.image_size)
        except (NotAnEllipse, OffImage):
            skipped += 1
            continue
        errs.append(bbox_error(pred, meas.bbox))
    if not errs:
        raise NoInitializedObjects("no initialised object has a projectable observation")
    err = float(np.mean(errs))
    return (err, len(errs), skipped) if return_details else err


@dataclass
class SuccessTable:
    counts: list
    methods: list
    successes: dict = field(default_factory=dict)  # (method, count) -> successes
    trials: dict = field(default_factory=dict)
    reasons: dict = field(default_factory=dict)  # (method, count) -> Counter of failure reasons

    def rate(self, method, count):
        return self.successes[(method, count)] / self.trials[(method, count)]

    def curve(self, method):
        return [self.rate(method, n) for n in self.counts]

    def rows(self):
        for m in self.methods:
            for n in self.counts:
                yield [METHOD_NAMES.get(m, m), n, self.trials[(m, n)], self.successes[(m, n)],
                       f"{self.rate(m, n):.4f}"]


def init_success_curve(trials, methods=("qp", "svd")) -> SuccessTable:
    """Validated-initialisation rate per method and observation count."""
    counts = sorted({t.count for t in trials})
    table = SuccessTable(counts, list(methods))
    for m in methods:
        for n in counts:
            table.successes[(m, n)] = 0
            table.trials[(m, n)] = 0
            table.reasons[(m, n)] = Counter()
    for t in trials:
        for m in methods:
            res = initialize_object(t.observations, m, min_obs=1)
            table.trials[(m, t.count)] += 1
            table.successes[(m, t.count)] += int(res.ok)
            if not res.ok:
                table.reasons[(m, t.count)][res.reason] += 1
    return table


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(r)


def write_init_success(path, table: SuccessTable):
    write_csv(path, INIT_HEADER, table.rows())


def da_row(name, c: IdCorrespondence):
    return [name, c.r_da, c.r_max, f"{c.accuracy:.6f}", c.n_measurements, c.r_max, f"{c.coverage:.6f}"]
