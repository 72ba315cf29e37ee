import csv
from itertools import permutations

import numpy as np
import pytest

from objslam.errors import EmptyOverlap, NoInitializedObjects
from objslam.evaluation import (DA_HEADER, INIT_HEADER, da_accuracy, da_row, init_success_curve,
                                reprojection_error, write_csv, write_init_success)
from objslam.geometry import BBox
from objslam.pipeline.mapdb import MapDatabase, SemanticMeasurement
from objslam.simulator import DEFAULT_INTRINSICS, exact_bbox, init_study_trials

from graphs import truth_scene

K = DEFAULT_INTRINSICS


def brute_r_da(gt, assigned):
    pairs = [(g, a) for g, a in zip(gt, assigned) if g is not None and a is not None]
    gs = sorted({g for g, _ in pairs})
    As = sorted({a for _, a in pairs})
    best = 0
    small, large = (gs, As) if len(gs) <= len(As) else (As, gs)
    for perm in permutations(large, len(small)):
        m = dict(zip(small, perm))
        if small is gs:
            score = sum(m.get(g) == a for g, a in pairs)
        else:
            score = sum(m.get(a) == g for g, a in pairs)
        best = max(best, score)
    return best


def test_identity_assignment():
    gt = [0, 1, 2, 0, 1, 2, 2]
    c = da_accuracy(gt, gt)
    assert c.accuracy == 1.0 and c.r_da == c.r_max == 7


def test_reward_counts():
    gt = [8] * 6 + [5]
    assigned = [2] * 6 + [2]
    c = da_accuracy(gt, assigned)
    assert c.r(8, 2) == 6 and c.r(5, 2) == 1 and c.r(8, 5) == 0
    assert c.r_da == 6 and c.r_max == 7


def test_relabelling_is_free(rng):
    gt = list(rng.integers(0, 5, 60))
    relabel = {g: 100 + int(p) for g, p in zip(range(5), rng.permutation(5))}
    c = da_accuracy(gt, [relabel[g] for g in gt])
    assert c.accuracy == 1.0


def test_against_brute_force(rng):
    for _ in range(100):
        n = int(rng.integers(1, 25))
        gt = [int(x) if x >= 0 else None for x in rng.integers(-1, 4, n)]
        assigned = [int(x) if x >= 0 else None for x in rng.integers(-1, 5, n)]
        try:
            c = da_accuracy(gt, assigned)
        except EmptyOverlap:
            assert not any(g is not None and a is not None for g, a in zip(gt, assigned))
            continue
        assert c.r_da == brute_r_da(gt, assigned)


def test_dropping_a_correct_pair():
    gt = [0, 0, 1, 1, 2]
    assigned = [5, 5, 6, 6, 7]
    full = da_accuracy(gt, assigned)
    fewer = da_accuracy(gt, assigned[:-1] + [None])
    assert fewer.r_da == full.r_da - 1 and fewer.r_max == full.r_max - 1
    assert fewer.coverage == pytest.approx(4 / 5)


def test_empty_overlap():
    with pytest.raises(EmptyOverlap):
        da_accuracy([None, 1], [3, None])
    with pytest.raises(ValueError):
        da_accuracy([1, 2], [1])


# reprojection -------------------------------------------------------------------------

def truth_map(rng, shift=0.0):
    poses, objects = truth_scene(rng, 6, 3)
    db = MapDatabase()
    objs = {}
    for j, e in objects.items():
        objs[j] = db.new_object(0)
        objs[j].ellipsoid = e
    for i, p in enumerate(poses):
        kf = db.new_keyframe(i, p, K)
        for j, e in objects.items():
            b = exact_bbox(e, p, K).as_array() + shift
            z = SemanticMeasurement(BBox(*b), 0)
            kf.measurements.append(z)
            db.link(kf, z, objs[j])
    return db


def interior(db, margin=15.0):
    for kf in db.keyframes.values():
        for z in kf.measurements:
            b = z.bbox.as_array()
            if b[0] < margin or b[1] < margin or b[2] > K.width - margin or b[3] > K.height - margin:
                return False
    return True


def test_reprojection_exact_and_shifted():
    rng_seed = 0
    while True:
        db = truth_map(np.random.default_rng(rng_seed))
        if interior(db):
            break
        rng_seed += 1
    err, pairs, skipped = reprojection_error(db, return_details=True)
    assert err <= 1e-9 and pairs == 18 and skipped == 0
    shifted = truth_map(np.random.default_rng(rng_seed), shift=10.0)
    assert reprojection_error(shifted) == pytest.approx(10.0, abs=1e-9)


def test_reprojection_needs_objects():
    db = MapDatabase()
    db.new_object(0)
    with pytest.raises(NoInitializedObjects):
        reprojection_error(db)


# initialisation curves ---------------------------------------------------------------------

def test_noiseless_curve_is_full():
    trials = init_study_trials(seeds=10, counts=(10, 20), bbox_sigma=0.0)
    table = init_success_curve(trials)
    for m in ("qp", "svd"):
        assert table.curve(m) == [1.0, 1.0]


def test_csv_headers(tmp_path):
    trials = init_study_trials(seeds=2, counts=(10,), bbox_sigma=1.0)
    write_init_success(tmp_path / "init.csv", init_success_curve(trials))
    rows = list(csv.reader(open(tmp_path / "init.csv")))
    assert rows[0] == INIT_HEADER
    assert [r[0] for r in rows[1:]] == ["Quadratic", "SVD"]
    write_csv(tmp_path / "da.csv", DA_HEADER, [da_row("x", da_accuracy([0, 1], [0, 1]))])
    rows = list(csv.reader(open(tmp_path / "da.csv")))
    assert rows[0] == DA_HEADER and rows[1][3] == "1.000000"
