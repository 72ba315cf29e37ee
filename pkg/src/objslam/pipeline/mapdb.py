"""Map database: objects, semantic keyframes and their cross references."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import SchemaError
from ..geometry import BBox, CameraIntrinsics, Ellipsoid, Pose

MAP_SCHEMA = "objslam.map/1"


@dataclass
class SemanticMeasurement:
    bbox: BBox
    class_label: int
    score: float = 1.0
    descriptors: Optional[np.ndarray] = None
    bow: Optional[dict] = None
    object_id: Optional[int] = None


@dataclass
class MapObject:
    id: int
    class_label: int
    ellipsoid: Optional[Ellipsoid] = None
    keyframe_ids: list = field(default_factory=list)
    observation_count: int = 0

    @property
    def initialized(self):
        return self.ellipsoid is not None


@dataclass
class SemanticKeyframe:
    id: int
    frame_index: int
    pose: Pose
    intrinsics: CameraIntrinsics
    measurements: list = field(default_factory=list)
    odometry: Optional[Pose] = None  # measured motion since the previous keyframe
    odometry_frames: int = 0  # frames composed into ``odometry``

    @property
    def object_ids(self):
        return [m.object_id for m in self.measurements if m.object_id is not None]

    def measurement_of(self, object_id):
        for m in self.measurements:
            if m.object_id == object_id:
                return m
        return None


@dataclass
class MapDatabase:
    objects: dict = field(default_factory=dict)
    keyframes: dict = field(default_factory=dict)
    next_object_id: int = 0
    next_keyframe_id: int = 0

    def new_object(self, class_label) -> MapObject:
        obj = MapObject(self.next_object_id, int(class_label))
        self.objects[obj.id] = obj
        self.next_object_id += 1
        return obj

    def new_keyframe(self, frame_index, pose, intrinsics) -> SemanticKeyframe:
        kf = SemanticKeyframe(self.next_keyframe_id, int(frame_index), pose, intrinsics)
        self.keyframes[kf.id] = kf
        self.next_keyframe_id += 1
        return kf

    def link(self, kf: SemanticKeyframe, meas: SemanticMeasurement, obj: MapObject):
        meas.object_id = obj.id
        if not obj.keyframe_ids or obj.keyframe_ids[-1] != kf.id:
            obj.keyframe_ids.append(kf.id)
        obj.observation_count += 1

    def latest_observation(self, obj: MapObject):
        """(keyframe, measurement) of the most recent keyframe observing ``obj``."""
        kf = self.keyframes[obj.keyframe_ids[-1]]
        return kf, kf.measurement_of(obj.id)

    def observations(self, obj: MapObject):
        for kid in obj.keyframe_ids:
            kf = self.keyframes[kid]
            yield kf, kf.measurement_of(obj.id)

    def audit(self):
        """List of referential-integrity violations (empty when consistent)."""
        problems = []
        for kf in self.keyframes.values():
            seen = set()
            for oid in kf.object_ids:
                if oid in seen:
                    problems.append(f"keyframe {kf.id} lists object {oid} twice")
                seen.add(oid)
                obj = self.objects.get(oid)
                if obj is None:
                    problems.append(f"keyframe {kf.id} references missing object {oid}")
                elif kf.id not in obj.keyframe_ids:
                    problems.append(f"object {oid} does not list keyframe {kf.id}")
        for obj in self.objects.values():
            if len(set(obj.keyframe_ids)) != len(obj.keyframe_ids):
                problems.append(f"object {obj.id} lists a keyframe twice")
            for kid in obj.keyframe_ids:
                kf = self.keyframes.get(kid)
                if kf is None:
                    problems.append(f"object {obj.id} references missing keyframe {kid}")
                elif obj.id not in kf.object_ids:
                    problems.append(f"keyframe {kid} does not list object {obj.id}")
            if obj.observation_count != len(obj.keyframe_ids):
                problems.append(f"object {obj.id} observation count mismatch")
            if obj.id >= self.next_object_id:
                problems.append(f"object id {obj.id} beyond counter")
        for kid in self.keyframes:
            if kid >= self.next_keyframe_id:
                problems.append(f"keyframe id {kid} beyond counter")
        return problems


# serialization -------------------------------------------------------------

def _pose_to_dict(p: Pose):
    return {"rotation": p.rotation.tolist(), "translation": p.translation.tolist()}


def _pose_from_dict(d):
    return Pose(np.array(d["rotation"]), np.array(d["translation"]))


def _intr_to_dict(k: CameraIntrinsics):
    return {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy, "width": k.width, "height": k.height}


def _intr_from_dict(d):
    return CameraIntrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                            int(d["width"]), int(d["height"]))


def _ellipsoid_to_dict(e: Ellipsoid):
    return {"rotation": e.rotation.tolist(), "center": e.center.tolist(),
            "semi_axes": e.semi_axes.tolist()}


def _ellipsoid_from_dict(d):
    return Ellipsoid(np.array(d["rotation"]), np.array(d["center"]), np.array(d["semi_axes"]))


def map_to_dict(m: MapDatabase):
    objects = []
    for oid in sorted(m.objects):
        o = m.objects[oid]
        objects.append({
            "id": o.id,
            "class": o.class_label,
            "ellipsoid": None if o.ellipsoid is None else _ellipsoid_to_dict(o.ellipsoid),
            "keyframes": list(o.keyframe_ids),
            "observations": o.observation_count,
        })
    keyframes = []
    for kid in sorted(m.keyframes):
        kf = m.keyframes[kid]
        meas = []
        for z in kf.measurements:
            meas.append({
                "bbox": z.bbox.as_array().tolist(),
                "class": z.class_label,
                "score": z.score,
                "object_id": z.object_id,
                "bow": None if z.bow is None else [[int(w), float(v)] for w, v in sorted(z.bow.items())],
            })
        keyframes.append({"id": kf.id, "frame": kf.frame_index, "pose": _pose_to_dict(kf.pose),
                          "intrinsics": _intr_to_dict(kf.intrinsics),
                          "odometry": None if kf.odometry is None else _pose_to_dict(kf.odometry),
                          "odometry_frames": kf.odometry_frames, "measurements": meas})
    return {"schema": MAP_SCHEMA, "next_object_id": m.next_object_id,
            "next_keyframe_id": m.next_keyframe_id, "objects": objects, "keyframes": keyframes}


def map_from_dict(d) -> MapDatabase:
    if d.get("schema") != MAP_SCHEMA:
        raise SchemaError(f"unsupported map schema {d.get('schema')!r}")
    m = MapDatabase(next_object_id=int(d["next_object_id"]), next_keyframe_id=int(d["next_keyframe_id"]))
    for o in d["objects"]:
        ell = None if o["ellipsoid"] is None else _ellipsoid_from_dict(o["ellipsoid"])
        m.objects[int(o["id"])] = MapObject(int(o["id"]), int(o["class"]), ell,
                                            [int(k) for k in o["keyframes"]], int(o["observations"]))
    for k in d["keyframes"]:
        odo = k.get("odometry")
        kf = SemanticKeyframe(int(k["id"]), int(k["frame"]), _pose_from_dict(k["pose"]),
                              _intr_from_dict(k["intrinsics"]),
                              odometry=None if odo is None else _pose_from_dict(odo),
                              odometry_frames=int(k.get("odometry_frames", 0)))
        for z in k["measurements"]:
            bow = None if z["bow"] is None else {int(w): float(v) for w, v in z["bow"]}
            kf.measurements.append(SemanticMeasurement(
                BBox.from_array(z["bbox"]), int(z["class"]), float(z["score"]), None, bow,
                None if z["object_id"] is None else int(z["object_id"])))
        m.keyframes[kf.id] = kf
    return m


def save_map(m: MapDatabase, path):
    with open(path, "w") as fh:
        json.dump(map_to_dict(m), fh, indent=1)
        fh.write("\n")


def load_map(path) -> MapDatabase:
    with open(path) as fh:
        return map_from_dict(json.load(fh))
