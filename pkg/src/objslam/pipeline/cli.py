"""Command-line entry point: ``objslam <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .. import evaluation
from ..errors import ObjSlamError
from ..simulator import (InitStudySpec, SceneSpec, generate, init_study_trials, iter_frames, preset,
                         standard_benchmarks, write_dataset)
from .config import Config
from .runner import (evaluate_run, load_vocabularies, run_directory, train_vocabulary, write_run)

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _counts(text):
    try:
        counts = [int(c) for c in text.split(",") if c.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad count list {text!r}")
    if not counts or min(counts) < 1:
        raise argparse.ArgumentTypeError("counts must be positive integers")
    return counts


def build_parser():
    p = _Parser(prog="objslam", description="Object-level semantic SLAM laboratory.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    s.add_argument("--spec", required=True, help=f"preset name ({', '.join(standard_benchmarks())}) or JSON file")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None, help="override the scene seed")

    v = sub.add_parser("vocab", help="train one class vocabulary from a dataset")
    v.add_argument("--train", required=True, help="dataset directory")
    v.add_argument("--class", dest="class_label", type=int, required=True)
    v.add_argument("--k", type=int, default=5)
    v.add_argument("--levels", type=int, default=5)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", required=True)

    r = sub.add_parser("run", help="run the mapper over a dataset")
    r.add_argument("--dataset", required=True)
    r.add_argument("--vocab-dir", required=True)
    r.add_argument("--config", default=None, help="flat JSON key/value file")
    r.add_argument("--out", required=True)
    r.add_argument("--ba-sync", action="store_true", help="run mapping inline (deterministic)")
    r.add_argument("--no-ba", action="store_true", help="skip bundle adjustment")
    r.add_argument("--init-diagnostics", action="store_true",
                   help="dump initialisation systems and KKT residuals to init_diagnostics.json")

    e = sub.add_parser("eval", help="score a finished run against ground truth")
    e.add_argument("--run", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", required=True)

    b = sub.add_parser("bench-init", help="initialisation success rates, Quadratic vs SVD")
    b.add_argument("--trials", type=int, default=100)
    b.add_argument("--counts", type=_counts, default=[5, 10, 15, 20])
    b.add_argument("--noise", type=float, default=InitStudySpec.bbox_sigma, help="bbox noise sigma (px)")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    return p


def _load_spec(arg) -> SceneSpec:
    if arg in standard_benchmarks():
        return preset(arg)
    if not os.path.exists(arg):
        raise UsageError(f"--spec {arg!r} is neither a preset nor a file")
    with open(arg) as fh:
        return SceneSpec.from_dict(json.load(fh))


def cmd_simulate(a):
    spec = _load_spec(a.spec)
    if a.seed is not None:
        spec.seed = a.seed
    ds = generate(spec)
    write_dataset(ds, a.out)
    n_det = sum(len(f.detections) for f in ds.frames)
    print(f"{spec.name}: {len(ds.frames)} frames, {len(ds.objects)} objects, {n_det} detections -> {a.out}")


def cmd_vocab(a):
    tree = train_vocabulary(list(iter_frames(a.train)), a.class_label, a.k, a.levels, a.seed)
    os.makedirs(os.path.dirname(os.path.abspath(a.out)), exist_ok=True)
    tree.save(a.out)
    print(f"class {a.class_label}: {tree.n_words} words, {tree.n_documents} documents -> {a.out}")


def cmd_run(a):
    config = Config.load(a.config) if a.config else Config()
    if a.ba_sync:
        config = config.replace(ba_sync=True)
    if a.no_ba:
        config = config.replace(ba_enabled=False)
    vocabs = load_vocabularies(a.vocab_dir)
    if not vocabs:
        raise ObjSlamError(f"no vocabulary files in {a.vocab_dir}")
    out = run_directory(a.dataset, vocabs, config, record_diagnostics=a.init_diagnostics)
    write_run(out, a.out, config)
    if a.init_diagnostics:
        with open(os.path.join(a.out, "init_diagnostics.json"), "w") as fh:
            json.dump(out.mapper.worker.diagnostics, fh)
            fh.write("\n")
    m = out.map
    n_init = sum(o.initialized for o in m.objects.values())
    print(f"{len(out.results)} frames, {len(m.keyframes)} keyframes, {len(m.objects)} objects "
          f"({n_init} initialised) -> {a.out}")


def cmd_eval(a):
    corr, rows = evaluate_run(a.run, a.out, dataset_dir=a.dataset)
    print(f"da_accuracy {corr.accuracy:.4f} ({corr.r_da}/{corr.r_max}), coverage {corr.coverage:.4f}")
    for stage, pairs, _, err in rows:
        print(f"reprojection error [{stage}] {err} px over {pairs} object-keyframe pairs")


def cmd_bench_init(a):
    spec = InitStudySpec(seeds=a.trials, counts=tuple(a.counts), bbox_sigma=a.noise, base_seed=a.seed)
    table = evaluation.init_success_curve(init_study_trials(spec))
    os.makedirs(os.path.dirname(os.path.abspath(a.out)), exist_ok=True)
    evaluation.write_init_success(a.out, table)
    for row in table.rows():
        print("{:>10} n={:<3} {}/{} = {}".format(row[0], row[1], row[3], row[2], row[4]))


COMMANDS = {"simulate": cmd_simulate, "vocab": cmd_vocab, "run": cmd_run, "eval": cmd_eval,
            "bench-init": cmd_bench_init}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"objslam: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ObjSlamError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"objslam: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
