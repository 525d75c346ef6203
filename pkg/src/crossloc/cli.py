"""Command-line entry point: gen-world, train, embed, query, eval.

Exit codes: 0 ok, 1 usage or config error, 2 data error, 3 numeric failure.
Config files are JSON with optional sections ``encoder``, ``train``,
``augment`` and ``eval`` plus a top-level ``seed``; command-line flags win
over the file, the file wins over built-in defaults.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .augment import AugmentConfig
from .datamodel import DataError, Dataset, is_same_place, list_manifests, read_manifest, \
    read_regions
from .encoders import EncoderConfig, load_checkpoint, save_checkpoint
from .evaluation import (K_MAX, PAIRINGS, RunEmbeddings, curve_csv, embed_run,
                         evaluate_embedded, report_records, summary_table, DB_SPACING,
                         SPARSE_DB_SPACING, SPARSE_QUERY_SPACING)
from .retrieval import embed_samples, knn_query, read_evdb, write_evdb
from .training import NumericError, TrainConfig, TrainLog, train

log = logging.getLogger("crossloc")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CONFIG_SECTIONS = ("seed", "encoder", "train", "augment", "eval")
EVAL_DEFAULTS = {"k_max": K_MAX, "protocol": "standard"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- config --------------------------------------------------------------------


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"config {path}: top level must be an object")
    unknown = set(doc) - set(CONFIG_SECTIONS)
    if unknown:
        raise UsageError(f"config {path}: unknown sections {sorted(unknown)}")
    return doc


def _build(cls, values: dict, what: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise UsageError(f"unknown {what} keys {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {what} config: {exc}") from exc


def resolve_config(doc: dict, overrides: dict | None = None):
    """Return (EncoderConfig, TrainConfig, eval settings); overrides are flat train keys."""
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    enc_d = dict(doc.get("encoder", {}))
    if "cloud_hidden" in enc_d:
        enc_d["cloud_hidden"] = tuple(enc_d["cloud_hidden"])
    enc = _build(EncoderConfig, enc_d, "encoder")
    seed = overrides.pop("seed", doc.get("seed", 0))
    aug = _build(AugmentConfig, {"seed": seed, **doc.get("augment", {})}, "augment")
    train_d = {**doc.get("train", {}), **overrides, "seed": seed}
    if "augment" in train_d or "seed" in doc.get("train", {}):
        raise UsageError("put augmentation in the 'augment' section and the seed at top level")
    cfg = _build(TrainConfig, {**train_d, "augment": aug}, "train")
    ev = {**EVAL_DEFAULTS, **doc.get("eval", {})}
    if set(ev) - set(EVAL_DEFAULTS):
        raise UsageError(f"unknown eval keys {sorted(set(ev) - set(EVAL_DEFAULTS))}")
    if ev["protocol"] not in ("standard", "sparse") or int(ev["k_max"]) < 1:
        raise UsageError(f"invalid eval config {ev}")
    return enc, cfg, ev


# -- helpers -------------------------------------------------------------------


def _load_runs(runs_dir, load_media=True):
    paths = list_manifests(runs_dir)
    if not paths:
        raise DataError(f"no *.manifest.json files in {runs_dir}")
    return [read_manifest(p, load_media) for p in paths]


def _workers(n):
    return n if n and n > 0 else (os.cpu_count() or 1)


def _find_sample(run, sample_id):
    for s in run.samples:
        if s.sample_id == sample_id:
            return s
    raise DataError(f"sample {sample_id} not found in run {run.run_id}")


# -- commands ------------------------------------------------------------------


def cmd_gen_world(args):
    from .synthbench import generate_runs, generate_world, write_world

    try:
        world = generate_world(args.seed, args.places)
        runs = generate_runs(world, args.runs)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    try:
        write_world(args.out, world, runs)
    except OSError as exc:
        raise DataError(f"cannot write world to {args.out}: {exc}") from exc
    print(f"wrote {len(runs)} runs x {world.n_places} places to {args.out}")
    return EXIT_OK


def cmd_train(args):
    overrides = {"paradigm": args.paradigm, "epochs": args.epochs, "lr": args.lr,
                 "seed": args.seed, "loss_preset": args.loss_preset,
                 "distance": args.distance, "teacher_epochs": args.teacher_epochs,
                 "student_epochs": args.student_epochs}
    enc, cfg, _ = resolve_config(load_config(args.config), overrides)
    runs = _load_runs(args.runs_dir)
    dataset = Dataset.from_runs(runs)
    log_path = args.log or f"{args.out_checkpoint}.log.jsonl"
    with open(log_path, "w") as fh:
        ckpt = train(dataset, cfg, enc, TrainLog(fh))
    save_checkpoint(args.out_checkpoint, ckpt)
    print(f"{cfg.paradigm}: final loss {ckpt.history[-1] if ckpt.history else float('nan'):.6f}"
          f" -> {args.out_checkpoint}")
    return EXIT_OK


def cmd_embed(args):
    ckpt = load_checkpoint(args.checkpoint)
    run = read_manifest(args.run)
    index = embed_run(run, ckpt.params, ckpt.config, (args.modality,)).indexes[args.modality]
    write_evdb(args.out_evdb, index)
    print(f"{len(index)} {args.modality} embeddings of {run.run_id} -> {args.out_evdb}")
    return EXIT_OK


def cmd_query(args):
    if args.k < 1:
        raise UsageError("--k must be >= 1")
    index = read_evdb(args.evdb)
    ckpt = load_checkpoint(args.checkpoint)
    sample = _find_sample(read_manifest(args.run), args.query_sample)
    q = embed_samples([sample], args.modality, ckpt.params, ckpt.config)[0]
    res = knn_query(index, q.astype("float32").astype("float64"), args.k)
    print(f"# query {sample.sample_id} ({args.modality}) vs {index.modality} database "
          f"of {len(index)}")
    print("rank sample_id distance same_place")
    for r, (sid, pose, d) in enumerate(res, start=1):
        print(f"{r} {sid} {d:.6f} {int(is_same_place(sample.pose, pose))}")
    return EXIT_OK


def cmd_eval(args):
    _, _, ev = resolve_config(load_config(args.config))
    protocol = args.protocol or ev["protocol"]
    k_max = args.k_max or int(ev["k_max"])
    regions = read_regions(args.regions or Path(args.runs_dir) / "regions.json")
    runs = _load_runs(args.runs_dir, load_media=args.evdb_dir is None)
    if len(runs) < 2:
        raise DataError(f"need at least 2 runs in {args.runs_dir}, found {len(runs)}")
    pairings = tuple(args.pairings.split(",")) if args.pairings else tuple(PAIRINGS)
    if set(pairings) - set(PAIRINGS):
        raise UsageError(f"unknown pairing in {pairings}; choose from {list(PAIRINGS)}")
    mods = sorted({m for p in pairings for m in PAIRINGS[p]})
    if args.evdb_dir:
        embedded = []
        for run in runs:
            e = RunEmbeddings(run.run_id, run.condition)
            for m in mods:
                e.indexes[m] = read_evdb(Path(args.evdb_dir) / f"{run.run_id}.{m}.evdb")
            embedded.append(e)
    elif args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        embedded = [embed_run(r, ckpt.params, ckpt.config, mods) for r in runs]
    else:
        raise UsageError("eval needs --checkpoint or --evdb-dir")
    if protocol == "sparse":
        spacing = (SPARSE_DB_SPACING, SPARSE_QUERY_SPACING)
    else:
        spacing = (DB_SPACING, None)
    result = evaluate_embedded(embedded, regions, pairings, k_max, *spacing,
                               workers=_workers(args.workers))
    table = summary_table(result)
    print(table, end="")
    if args.report:
        out = Path(args.report)
        out.mkdir(parents=True, exist_ok=True)
        (out / "records.jsonl").write_text(report_records(result))
        (out / "summary.txt").write_text(table)
        (out / "curves.csv").write_text(curve_csv(result))
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="crossloc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-world", help="write a synthetic paired-observation world")
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--places", type=int, default=100)
    g.add_argument("--runs", type=int, default=4)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_world)

    t = sub.add_parser("train", help="train encoders on the runs in a directory")
    t.add_argument("--runs-dir", required=True)
    t.add_argument("--config")
    t.add_argument("--paradigm", choices=("combined", "teacher-student", "teacher_student"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--teacher-epochs", type=int)
    t.add_argument("--student-epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--loss-preset")
    t.add_argument("--distance")
    t.add_argument("--out-checkpoint", required=True)
    t.add_argument("--log", help="training log path (default: <checkpoint>.log.jsonl)")
    t.add_argument("--workers", type=int, default=0)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("embed", help="embed one run into an EVDB file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--run", required=True, help="run manifest path")
    e.add_argument("--modality", choices=("image", "cloud"), required=True)
    e.add_argument("--out-evdb", required=True)
    e.set_defaults(func=cmd_embed)

    q = sub.add_parser("query", help="rank an EVDB against one sample")
    q.add_argument("--evdb", required=True)
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--run", required=True, help="manifest holding the query sample")
    q.add_argument("--query-sample", type=int, required=True)
    q.add_argument("--modality", choices=("image", "cloud"), required=True)
    q.add_argument("--k", type=int, default=25)
    q.set_defaults(func=cmd_query)

    v = sub.add_parser("eval", help="recall over all ordered run pairs")
    v.add_argument("--runs-dir", required=True)
    v.add_argument("--checkpoint")
    v.add_argument("--evdb-dir", help="read <run_id>.<modality>.evdb instead of embedding")
    v.add_argument("--regions")
    v.add_argument("--config")
    v.add_argument("--protocol", choices=("standard", "sparse"))
    v.add_argument("--pairings", help="comma list, e.g. 2d3d,3d2d")
    v.add_argument("--k-max", type=int)
    v.add_argument("--report", help="directory for records.jsonl, summary.txt, curves.csv")
    v.add_argument("--workers", type=int, default=0, help="default: logical cores")
    v.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
