"""Command-line interface.

Subcommands:
    mine       mine pseudo-correspondences between two feature containers
    schedule   evaluate or dump the coarse-to-fine sigma schedule
    synth      render a synthetic scene to a directory
    train-toy  train descriptor fields on a synthetic scene
    eval       score prediction files against annotations (PCK)

Every subcommand accepts --threads (results are identical for any value; work
is split across independent items and merged in order) and --errors-json
(machine-parseable error report on stdout). Exit codes: 0 success, 2 usage,
3 input format, 4 numerical guard, 5 I/O.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys

import numpy as np

from .errors import (
    FormatError,
    InvalidInputError,
    NumericalGuardError,
)
from .fileio import (
    atomic_write_text,
    dump_json,
    read_correspondence_file,
    read_feature_file,
    write_correspondence_file,
    write_feature_file,
)
from .grid import FeatureGrid
from .matching import bbox_from_keypoints
from .metrics import PckRecord, pck_aggregate
from .mining import mine_pseudo_labels
from .objectives import SigmaSchedule, sigma_at
from .parallel import parallel_map
from .synthetic import SceneSpec, load_scene, save_scene, synth_scene
from .training import train_toy

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FORMAT = 3
EXIT_NUMERIC = 4
EXIT_IO = 5


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2) on its own
        raise _UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="densecorr", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--threads", type=int, default=1,
                        help="worker threads (results are thread-count invariant)")
        sp.add_argument("--errors-json", action="store_true",
                        help="report errors as JSON on stdout")

    m = sub.add_parser("mine", help="mine pseudo-correspondences for one image pair")
    m.add_argument("--src", required=True, help="source feature container")
    m.add_argument("--tgt", required=True, help="target feature container")
    m.add_argument("--ann", required=True, help="annotated correspondence JSON")
    m.add_argument("--out", required=True, help="output pseudo-label JSON")
    m.add_argument("--region", choices=["full", "bbox", "mask"], default="full")
    m.add_argument("--margin-frac", type=float, default=0.1,
                   help="bbox expansion as a fraction of the keypoint diagonal")
    m.add_argument("--k-init", "--kinit", type=int, default=15)
    m.add_argument("--r-anchor-cells", "--r-anchor", type=float, default=1.5)
    m.add_argument("--min-similarity", type=float, default=None)
    m.add_argument("--raw", action="store_true",
                   help="skip descriptor normalization at ingest")
    m.add_argument("--seed", type=int, default=0)
    common(m)

    s = sub.add_parser("schedule", help="sigma annealing schedule")
    s.add_argument("--sigma-max", type=float, default=3.0)
    s.add_argument("--sigma-min", type=float, default=1.0)
    s.add_argument("--steps", type=int, required=True, help="total steps T")
    s.add_argument("--at", type=float, default=None,
                   help="print sigma at one step index and exit")
    s.add_argument("--dump", choices=("csv",), default="csv",
                   help="table format (csv is the only one)")
    s.add_argument("--out", default=None, help="CSV destination (default stdout)")
    common(s)

    y = sub.add_parser("synth", help="render a synthetic scene")
    y.add_argument("--spec", required=True, help="scene spec JSON")
    y.add_argument("--seed", type=int, default=0)
    y.add_argument("--out", required=True, help="output scene directory")
    common(y)

    t = sub.add_parser("train-toy", help="train descriptor fields on a scene")
    t.add_argument("--scene", required=True, help="scene directory from synth")
    t.add_argument("--out", required=True, help="run output directory")
    t.add_argument("--steps", type=int, default=300)
    t.add_argument("--lr", type=float, default=0.1)
    t.add_argument("--temperature", type=float, default=0.05)
    t.add_argument("--dense", nargs="?", choices=("on", "off"), const="on",
                   default="on",
                   help="mined dense self-distillation loss (default on)")
    t.add_argument("--no-dense", dest="dense", action="store_const", const="off",
                   help="shorthand for --dense off")
    t.add_argument("--lambda-self", type=float, default=1.0)
    t.add_argument("--beta", type=float, default=0.999)
    t.add_argument("--sigma-max", type=float, default=3.0)
    t.add_argument("--sigma-min", type=float, default=1.0)
    t.add_argument("--fixed-sigma", type=float, default=None,
                   help="freeze sigma instead of annealing")
    t.add_argument("--window-cells", type=int, default=15)
    t.add_argument("--k-init", type=int, default=15)
    t.add_argument("--r-anchor-cells", type=float, default=1.5)
    t.add_argument("--pseudo-noise-px", type=float, default=0.0)
    t.add_argument("--eval-every", type=int, default=50)
    t.add_argument("--seed", type=int, default=0)
    common(t)

    e = sub.add_parser("eval", help="PCK of predictions against annotations")
    e.add_argument("--pred", required=True, help="prediction JSON file or directory")
    e.add_argument("--ann", required=True, help="annotation JSON file or directory")
    e.add_argument("--alphas", default="0.01,0.05,0.10",
                   help="comma-separated thresholds")
    e.add_argument("--out-csv", "--out", default=None)
    e.add_argument("--out-json", default=None)
    common(e)
    return p


# ----------------------------------------------------------------------------
# subcommands


def _cmd_mine(args) -> int:
    src, src_mask = read_feature_file(args.src, with_mask=True)
    tgt, tgt_mask = read_feature_file(args.tgt, with_mask=True)
    ann, _meta = read_correspondence_file(args.ann)
    region_src = region_tgt = None
    bbox_doc = {}
    if args.region == "bbox":
        sh, sw = src.image_extent_px
        th, tw = tgt.image_extent_px
        region_src, region_tgt = bbox_from_keypoints(
            ann, args.margin_frac, src_image_hw=(sh, sw), tgt_image_hw=(th, tw)
        )
        bbox_doc = {"src": list(region_src.bbox), "tgt": list(region_tgt.bbox)}
    elif args.region == "mask":
        if src_mask is None or tgt_mask is None:
            raise FormatError(
                "missing-mask", "--region mask needs mask blocks in both containers"
            )
        region_src, region_tgt = src_mask, tgt_mask

    result = mine_pseudo_labels(
        src, tgt, ann,
        region_src=region_src, region_tgt=region_tgt,
        k_init=args.k_init, r_anchor_cells=args.r_anchor_cells,
        seed=args.seed, normalize=not args.raw,
        min_similarity=args.min_similarity,
    )
    sh, sw = src.image_extent_px
    th, tw = tgt.image_extent_px
    write_correspondence_file(
        args.out,
        result.pseudo_labels,
        image_pair={
            "src": args.src, "tgt": args.tgt,
            "src_hw": [sh, sw], "tgt_hw": [th, tw],
        },
        bbox=bbox_doc,
        extra={"diagnostics": result.diagnostics},
    )
    print(f"wrote {args.out}: {len(result.pseudo_labels)} pseudo pairs")
    return EXIT_OK


def _cmd_schedule(args) -> int:
    sched = SigmaSchedule(
        sigma_max=args.sigma_max, sigma_min=args.sigma_min, total_steps=args.steps
    )
    if args.at is not None:
        print(repr(sigma_at(sched, args.at)))
        return EXIT_OK
    buf = io.StringIO()
    for t in range(args.steps + 1):
        buf.write(f"{t},{sigma_at(sched, t)!r}\n")
    if args.out:
        atomic_write_text(args.out, buf.getvalue())
        print(f"wrote {args.out}: {args.steps + 1} rows")
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def _load_scene_spec(path: str) -> SceneSpec:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise FormatError("bad-json", f"scene spec is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise FormatError("bad-schema", "scene spec must be a JSON object")
    known = set(SceneSpec.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise FormatError(
            "bad-schema", f"unknown scene spec fields: {sorted(unknown)}"
        )
    if "grid_hw" in raw:
        raw["grid_hw"] = tuple(raw["grid_hw"])
    try:
        return SceneSpec(**raw)
    except InvalidInputError:
        raise
    except (TypeError, ValueError) as e:
        raise FormatError("bad-schema", f"invalid scene spec: {e}") from e


def _cmd_synth(args) -> int:
    spec = _load_scene_spec(args.spec)
    scene = synth_scene(spec, seed=args.seed)
    save_scene(scene, args.out)
    print(
        f"wrote {args.out}: {spec.n_instances} instances, "
        f"{spec.n_seen_kp}+{spec.n_unseen_kp} keypoints"
    )
    return EXIT_OK


def _cmd_train_toy(args) -> int:
    scene = load_scene(args.scene)
    params = {
        "steps": args.steps,
        "lr": args.lr,
        "temperature": args.temperature,
        "use_dense_loss": args.dense == "on",
        "lambda_self": args.lambda_self,
        "beta": args.beta,
        "sigma_max": args.sigma_max,
        "sigma_min": args.sigma_min,
        "fixed_sigma": args.fixed_sigma,
        "window_cells": args.window_cells,
        "k_init": args.k_init,
        "r_anchor_cells": args.r_anchor_cells,
        "pseudo_noise_px": args.pseudo_noise_px,
        "eval_every": args.eval_every,
        "seed": args.seed,
    }
    trainer = train_toy(scene, **params)
    os.makedirs(args.out, exist_ok=True)
    atomic_write_text(os.path.join(args.out, "config.json"), dump_json(params))
    atomic_write_text(
        os.path.join(args.out, "metrics.json"), dump_json(trainer.history_)
    )
    for i, field in enumerate(trainer.students_):
        write_feature_file(
            os.path.join(args.out, f"state_inst_{i:02d}.mrcf"),
            FeatureGrid(field.astype(np.float32), scene.spec.stride_px),
        )
    final = trainer.final_pck()
    print(f"wrote {args.out}: final pck {json.dumps(final, sort_keys=True)}")
    return EXIT_OK


def _collect_files(path: str) -> list[str]:
    if os.path.isdir(path):
        names = sorted(
            n for n in os.listdir(path) if n.endswith(".json")
        )
        if not names:
            raise InvalidInputError(f"no .json files in directory {path}")
        return [os.path.join(path, n) for n in names]
    return [path]


def _eval_one(item):
    ann_path, pred_path = item
    ann, meta = read_correspondence_file(ann_path)
    pred, _ = read_correspondence_file(pred_path)
    if len(pred) != len(ann):
        raise FormatError(
            "pair-mismatch",
            f"{pred_path} has {len(pred)} pairs, {ann_path} has {len(ann)}",
        )
    if len(ann) and np.max(np.abs(pred.src - ann.src)) > 1e-6:
        raise FormatError(
            "pair-mismatch", f"{pred_path} source points differ from annotation"
        )
    bbox = (meta.get("bbox") or {}).get("tgt")
    if bbox:
        x0, y0, x1, y1 = map(float, bbox)
        bbox_hw = (y1 - y0, x1 - x0)
    else:
        ext = ann.tgt.max(axis=0) - ann.tgt.min(axis=0)
        bbox_hw = (float(ext[1]), float(ext[0]))
        if bbox_hw[0] <= 0 or bbox_hw[1] <= 0:
            raise FormatError(
                "bad-bbox", f"{ann_path}: keypoint extent is degenerate"
            )
    out = {}
    for split, idx in (meta.get("splits") or {}).items():
        idx = [int(i) for i in idx]
        if not idx:
            continue
        out[split] = PckRecord(
            image_id=os.path.basename(ann_path),
            preds=pred.tgt[idx],
            gts=ann.tgt[idx],
            bbox_hw=bbox_hw,
        )
    if not out:
        raise FormatError("bad-splits", f"{ann_path} has no non-empty split")
    return out


def _cmd_eval(args) -> int:
    ann_files = _collect_files(args.ann)
    pred_files = _collect_files(args.pred)
    if len(ann_files) != len(pred_files):
        raise InvalidInputError(
            f"{len(ann_files)} annotation files vs {len(pred_files)} predictions"
        )
    try:
        alphas = [float(a) for a in args.alphas.split(",") if a]
    except ValueError as e:
        raise _UsageError(f"bad --alphas: {e}") from e
    if not alphas:
        raise _UsageError("--alphas is empty")
    per_image = parallel_map(
        _eval_one, list(zip(ann_files, pred_files)), args.threads
    )
    by_split: dict[str, list[PckRecord]] = {}
    for rec in per_image:
        for split, r in rec.items():
            by_split.setdefault(split, []).append(r)
    # report on the conventional 0-100 scale; the library API keeps fractions
    table = {
        split: {a: 100.0 * v for a, v in pck_aggregate(records, alphas).items()}
        for split, records in sorted(by_split.items())
    }
    json_doc = {
        split: {repr(a): v for a, v in vals.items()}
        for split, vals in table.items()
    }
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["split", "alpha", "pck"])
    for split in sorted(table):
        for a in alphas:
            writer.writerow([split, repr(a), repr(table[split][a])])
    if args.out_csv:
        atomic_write_text(args.out_csv, buf.getvalue())
    if args.out_json:
        atomic_write_text(args.out_json, dump_json(json_doc))
    if not args.out_csv and not args.out_json:
        sys.stdout.write(buf.getvalue())
    else:
        print(f"pck {json.dumps(json_doc, sort_keys=True)}")
    return EXIT_OK


_COMMANDS = {
    "mine": _cmd_mine,
    "schedule": _cmd_schedule,
    "synth": _cmd_synth,
    "train-toy": _cmd_train_toy,
    "eval": _cmd_eval,
}


def _emit_error(code: str, message: str, exit_code: int, as_json: bool,
                step: int | None = None) -> int:
    if as_json:
        doc = {"error": {"code": code, "message": message, "exit": exit_code}}
        if step is not None:
            doc["error"]["step"] = step
        print(json.dumps(doc, sort_keys=True))
    else:
        print(f"error ({code}): {message}", file=sys.stderr)
    return exit_code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    as_json = "--errors-json" in argv
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        return _emit_error("usage", str(e), EXIT_USAGE, as_json)
    try:
        return _COMMANDS[args.command](args)
    except _UsageError as e:
        return _emit_error("usage", str(e), EXIT_USAGE, as_json)
    except FormatError as e:
        return _emit_error(e.code, str(e), EXIT_FORMAT, as_json)
    except InvalidInputError as e:
        return _emit_error("invalid-input", str(e), EXIT_FORMAT, as_json)
    except NumericalGuardError as e:
        return _emit_error(
            "numerical-guard", str(e), EXIT_NUMERIC, as_json, step=e.step
        )
    except OSError as e:
        return _emit_error("io", str(e), EXIT_IO, as_json)


if __name__ == "__main__":
    sys.exit(main())
