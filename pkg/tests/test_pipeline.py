import json
import threading

import numpy as np
import pytest

from objslam.errors import OutOfOrderFrame, SchemaError
from objslam.evaluation import da_accuracy, reprojection_error
from objslam.geometry import BBox, Pose
from objslam.pipeline import (Config, MapDatabase, MappingWorker, SemanticMapper, keyframe_count,
                              keyframe_policy, load_map, map_from_dict, map_to_dict, save_map)
from objslam.pipeline.cli import main
from objslam.pipeline.runner import run_dataset
from objslam.simulator import Detection, FrameRecord, Noise, generate, preset, write_dataset


@pytest.fixture(scope="module")
def noiseless_easy():
    spec = preset("desk-easy")
    spec.noise = Noise()
    return generate(spec)


@pytest.fixture(scope="module")
def noiseless_run(noiseless_easy, vocabularies):
    return run_dataset(noiseless_easy, vocabularies, Config(ba_sync=True))


def test_keyframe_policy():
    c4 = Config(T=4)
    assert [i for i in range(10) if keyframe_policy(i, c4)] == [0, 4, 8]
    assert all(keyframe_policy(i, Config(T=1)) for i in range(5))
    for n in (1, 7, 8, 9, 120):
        for T in (1, 3, 4):
            assert sum(keyframe_policy(i, Config(T=T)) for i in range(n)) == keyframe_count(n, T)
    with pytest.raises(ValueError):
        Config(T=0)


def first_frames(ds, n):
    return [FrameRecord(f.index, f.true_pose, f.odometry, list(f.detections)) for f in ds.frames[:n]]


def test_small_detections_filtered(noiseless_easy, vocabularies):
    f = first_frames(noiseless_easy, 1)[0]
    desc = f.detections[0].descriptors
    f.detections.append(Detection(BBox(100, 100, 110, 110), 0, 0.9, desc, None))
    mapper = SemanticMapper(Config(ba_sync=True), vocabularies, noiseless_easy.intrinsics, f.true_pose)
    res = mapper.process_frame(f)
    mapper.finish()
    assert res.log[-1].filtered and res.log[-1].object_id is None
    assert len(res.measurements) == len(f.detections) - 1


def test_repeated_frame_creates_no_duplicates(noiseless_easy, vocabularies):
    f = first_frames(noiseless_easy, 1)[0]
    mapper = SemanticMapper(Config(T=1, ba_sync=True), vocabularies, noiseless_easy.intrinsics, f.true_pose)
    first = mapper.process_frame(f)
    n = len(mapper.map.objects)
    assert n == len(f.detections) == len(first.spawned)
    again = mapper.process_frame(FrameRecord(1, f.true_pose, Pose.identity(), f.detections))
    mapper.finish()
    assert len(mapper.map.objects) == n and not again.spawned
    assert [m.object_id for m in again.log] == [m.object_id for m in first.log]
    assert mapper.map.audit() == []


def test_out_of_order(noiseless_easy, vocabularies):
    frames = first_frames(noiseless_easy, 3)
    mapper = SemanticMapper(Config(ba_sync=True), vocabularies, noiseless_easy.intrinsics, frames[0].true_pose)
    mapper.process_frame(frames[0])
    mapper.process_frame(frames[2])
    with pytest.raises(OutOfOrderFrame):
        mapper.process_frame(frames[1])
    with pytest.raises(OutOfOrderFrame):
        mapper.process_frame(frames[2])
    mapper.finish()


def test_noiseless_run_recovers_objects(noiseless_easy, noiseless_run):
    m = noiseless_run.map
    truth = {d.gt_id for f in noiseless_easy.frames for d in f.detections}
    assert len(m.objects) == len(truth)
    assert all(o.initialized for o in m.objects.values())
    gt, assigned = noiseless_run.association_ids()
    c = da_accuracy(gt, assigned)
    assert c.accuracy == 1.0 and c.coverage == 1.0
    assert reprojection_error(m) <= 1e-6
    assert m.audit() == []


def test_first_keyframe_has_no_mapping(noiseless_run):
    first = noiseless_run.mapper.worker.reports[0]
    assert first.keyframe_id == 0 and first.initialized == [] and first.ba is None


def test_keyframe_poses_follow_odometry(noiseless_easy, noiseless_run):
    # noiseless odometry and boxes: refinement must leave the truth in place
    for kf in noiseless_run.map.keyframes.values():
        truth = noiseless_easy.frames[kf.frame_index].true_pose
        np.testing.assert_allclose(kf.pose.matrix(), truth.matrix(), atol=1e-6)


def test_desk_easy_audit(desk_easy, vocabularies, sync_config):
    out = run_dataset(desk_easy, vocabularies, sync_config)
    assert out.map.audit() == []
    assert len(out.map.keyframes) == keyframe_count(120, sync_config.T)


# map files ---------------------------------------------------------------------------

def test_map_round_trip(noiseless_run, tmp_path):
    save_map(noiseless_run.map, tmp_path / "a.json")
    back = load_map(tmp_path / "a.json")
    save_map(back, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert back.audit() == []


def test_empty_map_round_trip():
    d = map_to_dict(MapDatabase())
    assert map_to_dict(map_from_dict(d)) == d


def test_schema_tamper(noiseless_run, tmp_path):
    d = map_to_dict(noiseless_run.map)
    d["schema"] = "objslam.map/99"
    with pytest.raises(SchemaError):
        map_from_dict(d)
    with pytest.raises(SchemaError):
        map_from_dict({k: v for k, v in d.items() if k != "schema"})


# mapping worker -------------------------------------------------------------------------

def test_new_keyframe_cancels_running_ba(desk_hard, vocabularies):
    out = run_dataset(desk_hard, vocabularies, Config(ba_sync=True, ba_enabled=False))
    m = out.map
    kids = sorted(m.keyframes)
    cfg = Config(lm_max_iters=10 ** 6, lm_rel_tol=0.0)
    worker = MappingWorker(m, cfg, threading.RLock(), sync=False)
    worker.submit(kids[-2])
    worker.submit(kids[-1])
    worker.join()
    # let the last job stop too
    worker._cancel.set()
    worker.close()
    first = [r for r in worker.reports if r.keyframe_id == kids[-2]][0]
    assert first.ba is not None and first.ba.cancelled
    assert first.ba.final_cost <= first.ba.initial_cost
    assert m.audit() == []


# config ----------------------------------------------------------------------------------------

def test_config_from_dict(tmp_path):
    c = Config.from_dict({"T": 2, "sigma_px": 3, "ba_sync": True})
    assert c.T == 2 and c.sigma_px == 3.0 and c.ba_sync is True
    assert Config.from_dict(c.to_dict()) == c
    with pytest.raises(SchemaError):
        Config.from_dict({"T": 2, "bogus": 1})
    with pytest.raises(SchemaError):
        Config.from_dict({"ba_sync": "yes"})
    p = tmp_path / "c.json"
    p.write_text(json.dumps([1, 2]))
    with pytest.raises(SchemaError):
        Config.load(p)


# command line --------------------------------------------------------------------------------------

def test_cli_exit_codes(tmp_path, capsys):
    assert main([]) == 1
    assert main(["nonsense"]) == 1
    assert main(["bench-init", "--counts", "0", "--out", str(tmp_path / "x.csv")]) == 1
    assert main(["simulate", "--spec", "no-such-preset", "--out", str(tmp_path / "d")]) == 1
    assert main(["run", "--dataset", str(tmp_path / "missing"), "--vocab-dir", str(tmp_path),
                 "--out", str(tmp_path / "r")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["simulate", "--spec", str(bad), "--out", str(tmp_path / "d")]) == 2


def test_cli_end_to_end(tmp_path, vocab_train, capsys):
    small = preset("desk-easy").to_dict()
    small["trajectory"]["orbit"]["n_frames"] = 24
    spec = tmp_path / "small.json"
    spec.write_text(json.dumps(small))
    assert main(["simulate", "--spec", str(spec), "--out", str(tmp_path / "data")]) == 0
    write_dataset(vocab_train, tmp_path / "train")
    for c in range(3):
        assert main(["vocab", "--train", str(tmp_path / "train"), "--class", str(c), "--k", "4", "--levels", "3",
                     "--out", str(tmp_path / "vocab" / f"class_{c}.json")]) == 0
    assert main(["run", "--dataset", str(tmp_path / "data"), "--vocab-dir", str(tmp_path / "vocab"),
                 "--out", str(tmp_path / "run"), "--ba-sync"]) == 0
    assert main(["eval", "--run", str(tmp_path / "run"), "--dataset", str(tmp_path / "data"),
                 "--out", str(tmp_path / "eval")]) == 0
    for name in ("map.json", "association.csv", "ba_report.csv", "timing.json"):
        assert (tmp_path / "run" / name).exists()
    assert (tmp_path / "eval" / "da_accuracy.csv").exists()
    assert main(["bench-init", "--trials", "2", "--counts", "10", "--out", str(tmp_path / "b.csv")]) == 0
