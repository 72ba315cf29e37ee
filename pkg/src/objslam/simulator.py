"""Synthetic desk scenes: trajectories, detections, descriptors, odometry.

A dataset directory holds two files:

``scene.json``
    ``schema``, ``spec`` (the generating :class:`SceneSpec`), ``intrinsics``,
    ``initial_pose`` (true pose of frame 0) and ``objects``; each object has
    ``id``, ``class``, ``ellipsoid`` (``rotation`` 3x3, ``center`` in m,
    ``semi_axes`` in m) and ``signature`` (hex strings, one per descriptor).
``frames.jsonl``
    one JSON object per frame: ``index``, ``true_pose``, ``odometry`` (the
    measured motion from the previous frame, world-to-camera convention so
    that ``pose_k = odometry_k @ pose_{k-1}``) and ``detections``, each with
    ``bbox`` ``[xmin, ymin, xmax, ymax]`` in pixels, ``class``, ``score``,
    ``descriptors`` (hex) and ``gt_id`` (``null`` for clutter).

Poses are stored as ``{"rotation": 3x3, "translation": 3}``.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import EmptyScene, NotAnEllipse, OffImage, SchemaError
from .geometry import (BBox, CameraIntrinsics, Ellipsoid, Pose, conic_to_bbox, look_at,
                       project_point, project_quadric, projection_matrix, quadric_from_ellipsoid,
                       so3_exp)
from .vocabulary import DESCRIPTOR_BYTES, hamming_matrix, from_hex, to_hex

SCENE_SCHEMA = "objslam.scene/1"
SIGNATURE_SIZE = 32
PROTOTYPES_PER_CLASS = 256
PROTOTYPE_FLIP = 0.15
MIN_SIGNATURE_DISTANCE = 64
APPEARANCE_SEED = 7001
MIN_BOX_EXTENT = 2.0

DEFAULT_INTRINSICS = CameraIntrinsics(525.0, 525.0, 319.5, 239.5, 640, 480)


@dataclass
class SceneObject:
    id: int
    class_label: int
    ellipsoid: Ellipsoid


@dataclass
class Orbit:
    """Camera circling ``target`` while looking at it.

    ``turns`` full revolutions over ``n_frames``; the height oscillates by
    ``height_wobble`` twice per revolution.
    """

    radius: float = 1.5
    height: float = 0.7
    n_frames: int = 120
    turns: float = 1.0
    height_wobble: float = 0.1
    target: tuple = (0.0, 0.0, 0.0)
    start_angle: float = 0.0

    def poses(self):
        out = []
        for i in range(self.n_frames):
            a = self.start_angle + 2 * np.pi * self.turns * i / self.n_frames
            z = self.height + self.height_wobble * np.sin(2 * a)
            eye = [self.radius * np.cos(a), self.radius * np.sin(a), z]
            out.append(look_at(eye, self.target))
        return out


@dataclass
class Noise:
    bbox_sigma: float = 0.0
    dropout: float = 0.0
    confusion: float = 0.0
    bit_flip: float = 0.0
    odo_sigma_rot: float = 0.0
    odo_sigma_trans: float = 0.0
    clutter_rate: float = 0.0


@dataclass
class SceneSpec:
    name: str
    objects: list
    n_classes: int
    trajectory: object  # Orbit or list of Pose waypoints
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS
    noise: Noise = field(default_factory=Noise)
    seed: int = 0

    def __post_init__(self):
        nz = self.noise
        for p in (nz.dropout, nz.confusion, nz.bit_flip):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")
        if min(nz.bbox_sigma, nz.odo_sigma_rot, nz.odo_sigma_trans, nz.clutter_rate) < 0:
            raise ValueError("noise levels must be non-negative")
        if len(self.poses()) < 2:
            raise ValueError("a trajectory needs at least two frames")

    def poses(self):
        if isinstance(self.trajectory, Orbit):
            return self.trajectory.poses()
        return list(self.trajectory)

    def to_dict(self):
        if isinstance(self.trajectory, Orbit):
            traj = {"orbit": asdict(self.trajectory)}
            traj["orbit"]["target"] = list(traj["orbit"]["target"])
        else:
            traj = {"waypoints": [_pose_dict(p) for p in self.trajectory]}
        return {
            "name": self.name,
            "seed": self.seed,
            "n_classes": self.n_classes,
            "objects": [{"id": o.id, "class": o.class_label, "ellipsoid": _ellipsoid_dict(o.ellipsoid)}
                        for o in self.objects],
            "trajectory": traj,
            "intrinsics": asdict(self.intrinsics),
            "noise": asdict(self.noise),
        }

    @classmethod
    def from_dict(cls, d):
        if "layout" in d:
            lay = d["layout"]
            objects = desk_objects(int(lay["n_objects"]), int(lay["n_classes"]), int(lay.get("seed", 0)))
        else:
            objects = [SceneObject(int(o["id"]), int(o["class"]), _ellipsoid_from(o["ellipsoid"]))
                       for o in d["objects"]]
        tr = d["trajectory"]
        if "orbit" in tr:
            orb = dict(tr["orbit"])
            orb["target"] = tuple(orb.get("target", (0.0, 0.0, 0.0)))
            traj = Orbit(**orb)
        else:
            traj = [_pose_from(p) for p in tr["waypoints"]]
        k = CameraIntrinsics(**d["intrinsics"]) if "intrinsics" in d else DEFAULT_INTRINSICS
        n_classes = int(d.get("n_classes", 1 + max((o.class_label for o in objects), default=0)))
        return cls(d.get("name", "custom"), objects, n_classes, traj, k,
                   Noise(**d.get("noise", {})), int(d.get("seed", 0)))


@dataclass
class Detection:
    bbox: BBox
    class_label: int
    score: float
    descriptors: np.ndarray
    gt_id: Optional[int] = None


@dataclass
class FrameRecord:
    index: int
    true_pose: Pose
    odometry: Pose
    detections: list = field(default_factory=list)


@dataclass
class Dataset:
    spec: SceneSpec
    objects: list
    signatures: dict  # object id -> (SIGNATURE_SIZE, 32) uint8
    frames: list

    @property
    def intrinsics(self):
        return self.spec.intrinsics

    @property
    def initial_pose(self):
        return self.frames[0].true_pose


# helpers -------------------------------------------------------------------

def _pose_dict(p: Pose):
    return {"rotation": p.rotation.tolist(), "translation": p.translation.tolist()}


def _pose_from(d):
    return Pose(np.array(d["rotation"], dtype=float), np.array(d["translation"], dtype=float))


def _ellipsoid_dict(e: Ellipsoid):
    return {"rotation": e.rotation.tolist(), "center": e.center.tolist(), "semi_axes": e.semi_axes.tolist()}


def _ellipsoid_from(d):
    return Ellipsoid(np.array(d["rotation"], dtype=float), np.array(d["center"], dtype=float),
                     np.array(d["semi_axes"], dtype=float))


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([[1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                     [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                     [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)]])


def desk_objects(n_objects, n_classes, seed=0, extent=(0.45, 0.3), min_gap=0.08):
    """Objects resting on a desk top centred at the origin (z up).

    Centres are spread with a minimum horizontal gap between footprints.
    """
    rng = np.random.default_rng(seed)
    objects = []
    for j in range(n_objects):
        for _ in range(1000):
            axes = rng.uniform(0.04, 0.1, 3)
            yaw = rng.uniform(0, 2 * np.pi)
            R = so3_exp([0.0, 0.0, yaw])
            c = np.array([rng.uniform(-extent[0], extent[0]), rng.uniform(-extent[1], extent[1]), axes[2]])
            r = axes[:2].max()
            if all(np.linalg.norm(c[:2] - o.ellipsoid.center[:2]) > r + o.ellipsoid.semi_axes[:2].max() + min_gap
                   for o in objects):
                break
        objects.append(SceneObject(j, j % n_classes, Ellipsoid(R, c, axes)))
    return objects


def class_prototypes(class_label, n=PROTOTYPES_PER_CLASS):
    """Fixed appearance pool of one class (shared by every scene)."""
    rng = np.random.default_rng([APPEARANCE_SEED, int(class_label)])
    return rng.integers(0, 256, size=(n, DESCRIPTOR_BYTES), dtype=np.uint8)


def flip_bits(d, p, rng):
    if p <= 0:
        return d.copy()
    mask = rng.random((len(d), DESCRIPTOR_BYTES * 8)) < p
    return np.bitwise_xor(d, np.packbits(mask.astype(np.uint8), axis=1))


def _signature(class_label, rng):
    protos = class_prototypes(class_label)
    pick = rng.choice(len(protos), SIGNATURE_SIZE, replace=False)
    return flip_bits(protos[pick], PROTOTYPE_FLIP, rng)


def signature_distance(a, b):
    """Mean nearest-neighbour Hamming distance from rows of ``a`` to ``b``."""
    return float(hamming_matrix(a, b).min(axis=1).mean())


def make_signatures(objects, rng):
    """One descriptor signature per object, rejection-sampled so that any two
    objects are at least ``MIN_SIGNATURE_DISTANCE`` bits apart on average."""
    sigs = {}
    for o in objects:
        for _ in range(100):
            s = _signature(o.class_label, rng)
            if all(signature_distance(s, t) >= MIN_SIGNATURE_DISTANCE for t in sigs.values()):
                break
        sigs[o.id] = s
    return sigs


def visible(e: Ellipsoid, pose: Pose, k: CameraIntrinsics) -> bool:
    """Centre in front of the camera and a non-empty clipped conic box."""
    P = projection_matrix(pose, k)
    if project_point(P, e.center)[1] <= 0:
        return False
    try:
        conic_to_bbox(project_quadric(P, quadric_from_ellipsoid(e)), k.image_size)
    except (NotAnEllipse, OffImage):
        return False
    return True


def exact_bbox(e: Ellipsoid, pose: Pose, k: CameraIntrinsics) -> BBox:
    P = projection_matrix(pose, k)
    return conic_to_bbox(project_quadric(P, quadric_from_ellipsoid(e)), k.image_size)


def noisy_bbox(b: BBox, sigma, k: CameraIntrinsics, rng) -> BBox:
    a = b.as_array() + (rng.normal(0.0, sigma, 4) if sigma > 0 else 0.0)
    x0, x1 = sorted(np.clip(a[[0, 2]], 0.0, k.width))
    y0, y1 = sorted(np.clip(a[[1, 3]], 0.0, k.height))
    if x1 - x0 < MIN_BOX_EXTENT:
        x0, x1 = _widen(x0, x1, k.width)
    if y1 - y0 < MIN_BOX_EXTENT:
        y0, y1 = _widen(y0, y1, k.height)
    return BBox(x0, y0, x1, y1)


def _widen(lo, hi, limit):
    mid = min(max(0.5 * (lo + hi), MIN_BOX_EXTENT / 2), limit - MIN_BOX_EXTENT / 2)
    return mid - MIN_BOX_EXTENT / 2, mid + MIN_BOX_EXTENT / 2


def perturb_pose(p: Pose, sigma_rot, sigma_trans, rng) -> Pose:
    if sigma_rot <= 0 and sigma_trans <= 0:
        return p
    d = np.concatenate([rng.normal(0, sigma_rot, 3), rng.normal(0, sigma_trans, 3)])
    return p.retract(d)


def _clutter(k: CameraIntrinsics, n_classes, rng):
    w, h = rng.uniform(30, 120, 2)
    x0 = rng.uniform(0, k.width - w)
    y0 = rng.uniform(0, k.height - h)
    desc = rng.integers(0, 256, size=(SIGNATURE_SIZE, DESCRIPTOR_BYTES), dtype=np.uint8)
    return Detection(BBox(x0, y0, x0 + w, y0 + h), int(rng.integers(n_classes)),
                     float(rng.uniform(0.5, 1.0)), desc, None)


def generate(spec: SceneSpec) -> Dataset:
    """Render a scene spec into frame records; deterministic in ``spec.seed``."""
    if not spec.objects:
        raise EmptyScene("scene has no objects")
    rng = np.random.default_rng(spec.seed)
    sigs = make_signatures(spec.objects, rng)
    k, nz = spec.intrinsics, spec.noise
    poses = spec.poses()
    frames = []
    for i, pose in enumerate(poses):
        if i == 0:
            odo = Pose.identity()
        else:
            odo = perturb_pose(pose @ poses[i - 1].inverse(), nz.odo_sigma_rot, nz.odo_sigma_trans, rng)
        dets = []
        for o in spec.objects:
            if not visible(o.ellipsoid, pose, k):
                continue
            # draw every random number so that dropout does not shift the stream
            drop = rng.random() < nz.dropout
            confuse = rng.random() < nz.confusion
            other = int(rng.integers(max(spec.n_classes - 1, 1)))
            b = noisy_bbox(exact_bbox(o.ellipsoid, pose, k), nz.bbox_sigma, k, rng)
            score = float(rng.uniform(0.5, 1.0))
            desc = flip_bits(sigs[o.id], nz.bit_flip, rng)
            if drop:
                continue
            c = o.class_label
            if confuse and spec.n_classes > 1:
                c = other if other < c else other + 1
            dets.append(Detection(b, c, score, desc, o.id))
        for _ in range(rng.poisson(nz.clutter_rate) if nz.clutter_rate > 0 else 0):
            dets.append(_clutter(k, spec.n_classes, rng))
        frames.append(FrameRecord(i, pose, odo, dets))
    return Dataset(spec, list(spec.objects), sigs, frames)


# presets ---------------------------------------------------------------------

def standard_benchmarks():
    """Named scene presets."""
    return {
        "desk-easy": SceneSpec(
            "desk-easy", desk_objects(8, 3, seed=11), 3,
            Orbit(radius=1.4, height=0.7, n_frames=120, turns=1.0),
            noise=Noise(bbox_sigma=1.0, dropout=0.05, confusion=0.0, bit_flip=0.02,
                        odo_sigma_rot=0.001, odo_sigma_trans=0.001),
            seed=1),
        "desk-hard": SceneSpec(
            "desk-hard", desk_objects(12, 4, seed=12), 4,
            Orbit(radius=1.5, height=0.8, n_frames=240, turns=1.0),
            noise=Noise(bbox_sigma=2.0, dropout=0.15, confusion=0.05, bit_flip=0.05,
                        odo_sigma_rot=0.002, odo_sigma_trans=0.002),
            seed=2),
        "vocab-train": SceneSpec(
            "vocab-train", desk_objects(40, 4, seed=13, extent=(0.9, 0.6), min_gap=0.02), 4,
            Orbit(radius=2.2, height=1.0, n_frames=40, turns=1.0),
            noise=Noise(bit_flip=0.05),
            seed=3),
    }


def preset(name) -> SceneSpec:
    presets = standard_benchmarks()
    if name not in presets:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(presets)}")
    return presets[name]


# init study ------------------------------------------------------------------

@dataclass
class InitStudySpec:
    seeds: int = 100
    counts: tuple = (5, 10, 15, 20)
    bbox_sigma: float = 2.0
    step_deg: tuple = (1.0, 3.0)  # orbit step range per view
    distance: tuple = (1.2, 2.0)
    elevation_deg: tuple = (15.0, 40.0)
    look_jitter: float = 0.05
    base_seed: int = 0
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS


@dataclass
class InitTrial:
    seed: int
    count: int
    truth: Ellipsoid
    observations: list  # initializer.Observation
    parallax_deg: float

    @property
    def depth(self):
        """Mean distance from the cameras to the object centre."""
        return float(np.mean([np.linalg.norm(o.pose.center - self.truth.center) for o in self.observations]))


def parallax_deg(centers, point):
    """Largest angle subtended at ``point`` by any two camera centres."""
    d = np.asarray(centers, dtype=float) - point
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    c = np.clip(d @ d.T, -1.0, 1.0)
    return float(np.degrees(np.arccos(c.min())))


def init_study_views(spec: InitStudySpec, seed):
    """Truth ellipsoid and the full ordered list of (pose, bbox) views of one trial."""
    from .initializer import Observation

    rng = np.random.default_rng([spec.base_seed, seed])
    k = spec.intrinsics
    truth = Ellipsoid(random_rotation(rng), rng.uniform(-0.05, 0.05, 3), rng.uniform(0.05, 0.2, 3))
    az = rng.uniform(0, 2 * np.pi)
    step = np.radians(rng.uniform(*spec.step_deg)) * rng.choice([-1.0, 1.0])
    el = np.radians(rng.uniform(*spec.elevation_deg))
    dist = rng.uniform(*spec.distance)
    n = max(spec.counts)
    views = []
    for i in range(n):
        a = az + step * i
        r = dist * (1.0 + 0.05 * np.sin(0.3 * i))
        eye = r * np.array([np.cos(a) * np.cos(el), np.sin(a) * np.cos(el), np.sin(el)])
        pose = look_at(eye, truth.center + rng.normal(0.0, spec.look_jitter, 3))
        b = noisy_bbox(exact_bbox(truth, pose, k), spec.bbox_sigma, k, rng)
        views.append(Observation(pose, k, b))
    return truth, views


def init_study_trials(spec: Optional[InitStudySpec] = None, **overrides):
    """All ``seeds x counts`` trials; a trial with count ``n`` uses the first ``n`` views."""
    spec = spec or InitStudySpec()
    if overrides:
        spec = InitStudySpec(**{**asdict_shallow(spec), **overrides})
    trials = []
    for s in range(spec.seeds):
        truth, views = init_study_views(spec, s)
        for n in spec.counts:
            obs = views[:n]
            par = parallax_deg([o.pose.center for o in obs], truth.center)
            trials.append(InitTrial(s, n, truth, obs, par))
    return trials


def asdict_shallow(obj):
    return {f: getattr(obj, f) for f in obj.__dataclass_fields__}


# dataset files ---------------------------------------------------------------

def _detection_dict(d: Detection):
    return {"bbox": d.bbox.as_array().tolist(), "class": d.class_label, "score": d.score,
            "descriptors": [to_hex(x) for x in d.descriptors], "gt_id": d.gt_id}


def write_dataset(ds: Dataset, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    scene = {
        "schema": SCENE_SCHEMA,
        "spec": ds.spec.to_dict(),
        "intrinsics": asdict(ds.intrinsics),
        "initial_pose": _pose_dict(ds.initial_pose),
        "objects": [{"id": o.id, "class": o.class_label, "ellipsoid": _ellipsoid_dict(o.ellipsoid),
                     "signature": [to_hex(x) for x in ds.signatures[o.id]]} for o in ds.objects],
    }
    with open(os.path.join(out_dir, "scene.json"), "w") as fh:
        json.dump(scene, fh, indent=1)
        fh.write("\n")
    with open(os.path.join(out_dir, "frames.jsonl"), "w") as fh:
        for f in ds.frames:
            rec = {"index": f.index, "true_pose": _pose_dict(f.true_pose), "odometry": _pose_dict(f.odometry),
                   "detections": [_detection_dict(d) for d in f.detections]}
            fh.write(json.dumps(rec) + "\n")


def _detection_from(d):
    desc = np.array([from_hex(h) for h in d["descriptors"]], dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES)
    gt = d.get("gt_id")
    return Detection(BBox.from_array(d["bbox"]), int(d["class"]), float(d["score"]), desc,
                     None if gt is None else int(gt))


def frame_from_dict(rec) -> FrameRecord:
    return FrameRecord(int(rec["index"]), _pose_from(rec["true_pose"]), _pose_from(rec["odometry"]),
                       [_detection_from(d) for d in rec["detections"]])


def read_scene(path):
    with open(os.path.join(path, "scene.json")) as fh:
        scene = json.load(fh)
    if scene.get("schema") != SCENE_SCHEMA:
        raise SchemaError(f"unsupported scene schema {scene.get('schema')!r}")
    return scene


def iter_frames(path):
    with open(os.path.join(path, "frames.jsonl")) as fh:
        for line in fh:
            if line.strip():
                yield frame_from_dict(json.loads(line))


def read_dataset(path) -> Dataset:
    scene = read_scene(path)
    spec = SceneSpec.from_dict(scene["spec"])
    objects = [SceneObject(int(o["id"]), int(o["class"]), _ellipsoid_from(o["ellipsoid"])) for o in scene["objects"]]
    sigs = {int(o["id"]): np.array([from_hex(h) for h in o["signature"]], dtype=np.uint8)
            for o in scene["objects"]}
    return Dataset(spec, objects, sigs, list(iter_frames(path)))
