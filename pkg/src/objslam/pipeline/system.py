"""Frame processing, keyframe insertion and the mapping worker."""

from __future__ import annotations

import math
import queue
import threading
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..association import associate_frame
from ..bundle_adjustment import (BaState, LmSettings, OdometryFactor, SemanticFactor,
                                 odometry_covariance, optimize)
from ..errors import EmptyInput, OutOfOrderFrame
from ..geometry import CameraIntrinsics, Pose
from ..initializer import Observation, initialize_object
from ..vocabulary import transform
from .config import Config
from .mapdb import MapDatabase, SemanticMeasurement


def keyframe_policy(frame_index, config: Config) -> bool:
    return frame_index % config.T == 0


def keyframe_count(n_frames, T):
    return math.ceil(n_frames / T)


@dataclass
class MeasurementLog:
    frame: int
    detection: int  # index in the frame record
    class_label: int
    object_id: Optional[int]
    score: float
    n_candidates: int
    filtered: bool
    spawned: bool
    gt_id: Optional[int] = None


@dataclass
class FrameResult:
    index: int
    pose: Pose
    keyframe_id: Optional[int]
    measurements: list  # SemanticMeasurement, unfiltered detections only
    log: list  # MeasurementLog, one per detection
    spawned: list = field(default_factory=list)

    @property
    def is_keyframe(self):
        return self.keyframe_id is not None


@dataclass
class MappingReport:
    keyframe_id: int
    initialized: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)  # object id -> reason
    ba: object = None  # BaReport or None


def observations_of(map_db: MapDatabase, obj):
    return [Observation(kf.pose, kf.intrinsics, meas.bbox) for kf, meas in map_db.observations(obj)]


def try_initialize(map_db: MapDatabase, config: Config, report: MappingReport, diagnostics=None):
    """Initialise every object that has enough observations and no ellipsoid.

    When ``diagnostics`` is a list, one record per attempt is appended.
    """
    for oid in sorted(map_db.objects):
        obj = map_db.objects[oid]
        if obj.initialized or obj.observation_count < config.min_obs:
            continue
        res = initialize_object(observations_of(map_db, obj), "qp", config.min_obs,
                                config.max_reprojection_error, diagnostics=diagnostics is not None)
        if diagnostics is not None:
            diagnostics.append({"keyframe": report.keyframe_id, "object": oid, "ok": res.ok,
                                "reason": res.reason, **res.diagnostics})
        if res.ok:
            obj.ellipsoid = res.ellipsoid
            report.initialized.append(oid)
        else:
            report.failures[oid] = res.reason


def build_factors(map_db: MapDatabase, config: Config):
    """Factors over all keyframes and initialised objects.

    Returns ``(factors, state, keyframe_ids)``; pose index ``n`` of the state
    corresponds to ``keyframe_ids[n]``.
    """
    kf_ids = sorted(map_db.keyframes)
    pos = {kid: n for n, kid in enumerate(kf_ids)}
    poses = [map_db.keyframes[k].pose for k in kf_ids]
    objects = {oid: o.ellipsoid for oid, o in map_db.objects.items() if o.initialized}
    factors = []
    for n in range(1, len(kf_ids)):
        kf = map_db.keyframes[kf_ids[n]]
        if kf.odometry is None:
            continue
        cov = odometry_covariance(config.sigma_rot, config.sigma_trans, max(kf.odometry_frames, 1))
        factors.append(OdometryFactor(n - 1, n, kf.odometry, cov))
    cov_z = config.sigma_px ** 2 * np.eye(4)
    for oid in sorted(objects):
        for kf, meas in map_db.observations(map_db.objects[oid]):
            factors.append(SemanticFactor(pos[kf.id], oid, meas.bbox, kf.intrinsics, cov_z))
    return factors, BaState(poses, objects), kf_ids


def lm_settings(config: Config):
    return LmSettings(max_iters=config.lm_max_iters, initial_damping=config.lm_initial_damping,
                      rel_tol=config.lm_rel_tol)


def run_bundle_adjustment(map_db: MapDatabase, config: Config, cancel_token=None, lock=None):
    """Optimise a snapshot of the map and write the result back.

    Returns the BA report, or ``None`` when no object is initialised.
    """
    lock = lock or _NullLock()
    with lock:
        factors, state, kf_ids = build_factors(map_db, config)
    if not state.objects or len(kf_ids) < 2:
        return None
    new_state, report = optimize(factors, state, lm_settings(config), cancel_token)
    with lock:
        for n, kid in enumerate(kf_ids):
            map_db.keyframes[kid].pose = new_state.poses[n]
        for oid, e in new_state.objects.items():
            map_db.objects[oid].ellipsoid = e
    return report


class _NullLock:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


class MappingWorker:
    """Runs initialisation and bundle adjustment for each new keyframe.

    In synchronous mode jobs run inline.  Otherwise a background thread
    consumes keyframe ids from a queue; a new keyframe cancels the BA in
    progress.
    """

    def __init__(self, map_db: MapDatabase, config: Config, lock: threading.RLock, sync: bool,
                 record_diagnostics=False):
        self.map = map_db
        self.diagnostics = [] if record_diagnostics else None
        self.config = config
        self.lock = lock
        self.sync = sync
        self.reports = []
        self._cancel = threading.Event()
        self._queue = queue.Queue()
        self._thread = None
        if not sync:
            self._thread = threading.Thread(target=self._loop, daemon=True)
            self._thread.start()

    def submit(self, keyframe_id):
        if self.sync:
            self.reports.append(self._job(keyframe_id, None))
            return
        # queue first: a job that has not yet checked the queue then sees the newcomer,
        # and one already running holds the event set below
        self._queue.put(keyframe_id)
        self._cancel.set()

    def _job(self, keyframe_id, cancel_token):
        report = MappingReport(keyframe_id)
        with self.lock:
            try_initialize(self.map, self.config, report, self.diagnostics)
        if self.config.ba_enabled:
            report.ba = run_bundle_adjustment(self.map, self.config, cancel_token, self.lock)
        return report

    def _loop(self):
        while True:
            kid = self._queue.get()
            if kid is None:
                self._queue.task_done()
                return
            token = threading.Event()
            self._cancel = token
            # a newer keyframe already waiting makes this BA stale at once
            if not self._queue.empty():
                token.set()
            self.reports.append(self._job(kid, token))
            self._queue.task_done()

    def join(self):
        if self._thread is not None:
            self._queue.join()

    def close(self):
        if self._thread is not None:
            self._queue.put(None)
            self._thread.join()
            self._thread = None


class SemanticMapper:
    """Front end plus mapping back end over one frame stream."""

    def __init__(self, config: Config, vocabularies: dict, intrinsics: CameraIntrinsics,
                 initial_pose: Pose, map_db: Optional[MapDatabase] = None, record_diagnostics=False):
        self.config = config
        self.vocabularies = vocabularies
        self.intrinsics = intrinsics
        self.initial_pose = initial_pose
        self.map = map_db or MapDatabase()
        self.lock = threading.RLock()
        self.worker = MappingWorker(self.map, config, self.lock, config.ba_sync, record_diagnostics)
        self.last_index = None
        self.pose = None
        self._anchor = None  # latest keyframe id
        self._since_anchor = Pose.identity()  # odometry composed since the anchor
        self._frames_since_anchor = 0

    # front end -----------------------------------------------------------

    def _measurement(self, det):
        if det.bbox.area < self.config.min_bbox_area:
            return None
        n_desc = 0 if det.descriptors is None else len(det.descriptors)
        if n_desc < self.config.min_descriptors:
            return None
        bow = None
        tree = self.vocabularies.get(det.class_label)
        if tree is not None and n_desc:
            try:
                bow = transform(det.descriptors, tree)
            except EmptyInput:
                bow = None
        return SemanticMeasurement(det.bbox, det.class_label, det.score, det.descriptors, bow)

    def _predict_pose(self, frame):
        if self.last_index is None:
            return self.initial_pose
        self._since_anchor = frame.odometry @ self._since_anchor
        self._frames_since_anchor += 1
        with self.lock:
            base = self.map.keyframes[self._anchor].pose if self._anchor is not None else self.initial_pose
        return self._since_anchor @ base

    def process_frame(self, frame) -> FrameResult:
        if self.last_index is not None and frame.index <= self.last_index:
            raise OutOfOrderFrame(f"frame {frame.index} after frame {self.last_index}")
        pose = self._predict_pose(frame)
        self.pose = pose

        measurements, det_index, log = [], [], []
        for d, det in enumerate(frame.detections):
            z = self._measurement(det)
            log.append(MeasurementLog(frame.index, d, det.class_label, None, 0.0, 0, z is None, False,
                                      getattr(det, "gt_id", None)))
            if z is not None:
                measurements.append(z)
                det_index.append(d)

        with self.lock:
            matches = associate_frame(measurements, pose, self.intrinsics, self.map, self.config.theta_assoc)
        for z, d, m in zip(measurements, det_index, matches):
            log[d].object_id = m.object_id
            log[d].score = m.score
            log[d].n_candidates = m.n_candidates

        result = FrameResult(frame.index, pose, None, measurements, log)
        if keyframe_policy(frame.index, self.config):
            self.on_keyframe(frame, pose, measurements, det_index, matches, result)
        self.last_index = frame.index
        return result

    # back end --------------------------------------------------------------

    def on_keyframe(self, frame, pose, measurements, det_index, matches, result):
        with self.lock:
            kf = self.map.new_keyframe(frame.index, pose, self.intrinsics)
            if self._anchor is not None:
                kf.odometry = self._since_anchor
                kf.odometry_frames = self._frames_since_anchor
            for z, d, m in zip(measurements, det_index, matches):
                kf.measurements.append(z)
                if m.object_id is not None:
                    self.map.link(kf, z, self.map.objects[m.object_id])
                elif m.n_plausible == 0:
                    obj = self.map.new_object(z.class_label)
                    self.map.link(kf, z, obj)
                    result.log[d].object_id = obj.id
                    result.log[d].spawned = True
                    result.spawned.append(obj.id)
            self._anchor = kf.id
            self._since_anchor = Pose.identity()
            self._frames_since_anchor = 0
        result.keyframe_id = kf.id
        self.worker.submit(kf.id)

    def finish(self):
        """Wait for outstanding mapping work and stop the worker."""
        self.worker.join()
        self.worker.close()

    def run(self, frames):
        results = []
        for f in frames:
            results.append(self.process_frame(f))
        self.finish()
        return results
