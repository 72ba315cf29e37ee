"""Dataset-level drivers: vocabulary training, full runs, evaluation."""

from __future__ import annotations

import csv
import glob
import json
import os
import time
from dataclasses import dataclass

import numpy as np

from .. import evaluation
from ..bundle_adjustment import optimize
from ..errors import InsufficientData, NoInitializedObjects
from ..simulator import Dataset, iter_frames, read_scene, _pose_from
from ..geometry import CameraIntrinsics
from ..vocabulary import VocabularyTree, build_vocabulary
from .config import Config
from .mapdb import load_map, save_map
from .system import SemanticMapper, build_factors, lm_settings

ASSOC_HEADER = ["frame", "detection", "class", "object_id", "score", "candidates", "filtered",
                "spawned", "keyframe", "gt_id"]
BA_HEADER = ["keyframe", "iteration", "cost", "damping", "accepted", "skipped", "cancelled"]


def class_documents(frames, class_label):
    """Descriptor sets of one class grouped by ground-truth object."""
    docs = {}
    for f in frames:
        for d in f.detections:
            if d.class_label == class_label and d.gt_id is not None and len(d.descriptors):
                docs.setdefault(d.gt_id, []).append(d.descriptors)
    return [np.concatenate(docs[k]) for k in sorted(docs)]


def train_vocabulary(frames, class_label, k=5, levels=5, seed=0) -> VocabularyTree:
    docs = class_documents(frames, class_label)
    if not docs:
        raise InsufficientData(f"no descriptors for class {class_label}")
    return build_vocabulary(np.concatenate(docs), k, levels, seed, docs, class_label)


def train_vocabularies(frames, classes, k=5, levels=5, seed=0):
    return {c: train_vocabulary(frames, c, k, levels, seed) for c in classes}


def vocab_path(vocab_dir, class_label):
    return os.path.join(vocab_dir, f"class_{class_label}.json")


def load_vocabularies(vocab_dir):
    trees = {}
    for path in sorted(glob.glob(os.path.join(vocab_dir, "*.json"))):
        tree = VocabularyTree.load(path)
        trees[tree.class_label] = tree
    return trees


@dataclass
class RunOutput:
    mapper: SemanticMapper
    results: list
    elapsed: float

    @property
    def map(self):
        return self.mapper.map

    def association_ids(self):
        """(gt ids, assigned ids) over every detection of the run."""
        gt, assigned = [], []
        for r in self.results:
            for m in r.log:
                gt.append(m.gt_id)
                assigned.append(m.object_id)
        return gt, assigned


def run_frames(frames, scene_intrinsics, initial_pose, vocabularies, config: Config,
               record_diagnostics=False) -> RunOutput:
    mapper = SemanticMapper(config, vocabularies, scene_intrinsics, initial_pose,
                            record_diagnostics=record_diagnostics)
    t0 = time.perf_counter()
    results = mapper.run(frames)
    return RunOutput(mapper, results, time.perf_counter() - t0)


def run_dataset(ds: Dataset, vocabularies, config: Config) -> RunOutput:
    return run_frames(ds.frames, ds.intrinsics, ds.initial_pose, vocabularies, config)


def run_directory(dataset_dir, vocabularies, config: Config, record_diagnostics=False) -> RunOutput:
    scene = read_scene(dataset_dir)
    k = CameraIntrinsics(**scene["intrinsics"])
    return run_frames(iter_frames(dataset_dir), k, _pose_from(scene["initial_pose"]), vocabularies, config,
                      record_diagnostics)


def write_run(out: RunOutput, out_dir, config: Config):
    """map.json, association.csv and ba_report.csv (timing-free), plus timing.json."""
    os.makedirs(out_dir, exist_ok=True)
    save_map(out.map, os.path.join(out_dir, "map.json"))
    with open(os.path.join(out_dir, "association.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ASSOC_HEADER)
        for r in out.results:
            for m in r.log:
                w.writerow([m.frame, m.detection, m.class_label, "" if m.object_id is None else m.object_id,
                            f"{m.score:.6f}", m.n_candidates, int(m.filtered), int(m.spawned),
                            "" if r.keyframe_id is None else r.keyframe_id, "" if m.gt_id is None else m.gt_id])
    with open(os.path.join(out_dir, "ba_report.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BA_HEADER)
        for rep in out.mapper.worker.reports:
            if rep.ba is None:
                continue
            for it in rep.ba.iterations:
                w.writerow([rep.keyframe_id, it["iteration"], f"{it['cost']:.9e}", f"{it['damping']:.3e}",
                            int(it["accepted"]), it["skipped"], int(rep.ba.cancelled)])
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(config.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    n_frames = len(out.results)
    timing = {"frames": n_frames, "seconds": out.elapsed,
              "frames_per_second": n_frames / out.elapsed if out.elapsed > 0 else None,
              "ba_seconds": [rep.ba.elapsed for rep in out.mapper.worker.reports if rep.ba is not None]}
    with open(os.path.join(out_dir, "timing.json"), "w") as fh:
        json.dump(timing, fh, indent=1)
        fh.write("\n")


def read_association(run_dir, dataset_dir=None):
    """Ground-truth and assigned ids per detection.

    With ``dataset_dir`` the ground truth comes from the dataset itself,
    matched by (frame, detection); otherwise from the run log.
    """
    rows = []
    with open(os.path.join(run_dir, "association.csv"), newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append(row)
    truth = None
    if dataset_dir is not None:
        truth = {(f.index, d): det.gt_id for f in iter_frames(dataset_dir) for d, det in enumerate(f.detections)}
    gt, assigned = [], []
    for row in rows:
        key = (int(row["frame"]), int(row["detection"]))
        if truth is not None:
            if key not in truth:
                raise InsufficientData(f"run log mentions detection {key} missing from the dataset")
            gt.append(truth[key])
        else:
            gt.append(int(row["gt_id"]) if row["gt_id"] else None)
        assigned.append(int(row["object_id"]) if row["object_id"] else None)
    return gt, assigned


def evaluate_run(run_dir, out_dir, name=None, dataset_dir=None):
    """Write ``da_accuracy.csv`` and ``reproj.csv`` for a finished run."""
    os.makedirs(out_dir, exist_ok=True)
    name = name or os.path.basename(os.path.normpath(run_dir))
    gt, assigned = read_association(run_dir, dataset_dir)
    corr = evaluation.da_accuracy(gt, assigned)
    evaluation.write_csv(os.path.join(out_dir, "da_accuracy.csv"), evaluation.DA_HEADER,
                         [evaluation.da_row(name, corr)])
    rows = []
    for stage, fname in (("init", "map_init.json"), ("final", "map.json")):
        path = os.path.join(run_dir, fname)
        if not os.path.exists(path):
            continue
        try:
            err, pairs, skipped = evaluation.reprojection_error(load_map(path), return_details=True)
            rows.append([stage, pairs, skipped, f"{err:.6f}"])
        except NoInitializedObjects:
            rows.append([stage, 0, 0, "nan"])
    evaluation.write_csv(os.path.join(out_dir, "reproj.csv"), evaluation.REPROJ_HEADER, rows)
    return corr, rows


@dataclass
class BaImprovement:
    initial_error: float
    final_error: float
    report: object
    map_init: object
    map_final: object

    @property
    def ratio(self):
        return self.final_error / self.initial_error


def ba_improvement(ds: Dataset, vocabularies, config: Config, max_iters=50) -> BaImprovement:
    """Map built without BA, then one global BA over it; errors before and after."""
    from copy import deepcopy

    out = run_dataset(ds, vocabularies, config.replace(ba_enabled=False, ba_sync=True))
    map_init = out.map
    before = evaluation.reprojection_error(map_init)
    map_final = deepcopy(map_init)
    factors, state, kf_ids = build_factors(map_final, config)
    settings = lm_settings(config)
    settings.max_iters = max_iters
    new_state, report = optimize(factors, state, settings)
    for n, kid in enumerate(kf_ids):
        map_final.keyframes[kid].pose = new_state.poses[n]
    for oid, e in new_state.objects.items():
        map_final.objects[oid].ellipsoid = e
    after = evaluation.reprojection_error(map_final)
    return BaImprovement(before, after, report, map_init, map_final)
