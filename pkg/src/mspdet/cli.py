"""Command-line entry point: ``mspdet {synth,train,detect,eval,ablate}``.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import evaluation as ev
from .checkpoint import load_model, write_checkpoint
from .config import RunConfig, load_config
from .data import (
    DataError, DatasetIndex, DetectionRecord, SynthConfig, generate_synthetic, list_images,
    load_image, read_det_csv, read_gt_csv, write_det_csv,
)
from .model import Detector, detect_many, train

log = logging.getLogger("mspdet")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
LEVELS = {"all": ev.ALL, "small": ev.SMALL, "L1": ev.L1, "L2": ev.L2}
LOSS_COLUMNS = ("iter", "lr", "total", "rpn_cls", "rpn_reg", "det_cls", "det_reg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mspdet", description="Multi-scale position-sensitive detector toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("out", type=Path, help="output directory")
    s.add_argument("--num-images", type=int, default=100)
    s.add_argument("--size", type=_size, default=(128, 128), help="image size HxW")
    s.add_argument("--heights", type=float, nargs=2, default=(6.0, 48.0), metavar=("MIN", "MAX"))
    s.add_argument("--objects", type=int, nargs=2, default=(1, 5), metavar=("MIN", "MAX"))
    s.add_argument("--num-classes", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--prefix", default="img")

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("config", type=Path)
    t.add_argument("--data", type=Path, help="dataset root (overrides [data] train_dir)")
    t.add_argument("--out", type=Path, required=True, help="checkpoint path")
    t.add_argument("--loss-log", type=Path, help="loss CSV (default: <out>.loss.csv)")

    d = sub.add_parser("detect", help="run a checkpoint on an image or a directory of images")
    d.add_argument("checkpoint", type=Path)
    d.add_argument("input", type=Path)
    d.add_argument("--out", type=Path, required=True, help="detection CSV")
    d.add_argument("--score-thresh", type=float)
    d.add_argument("--nms-iou", type=float)

    e = sub.add_parser("eval", help="score detections against ground truth")
    e.add_argument("detections", type=Path)
    e.add_argument("gt", type=Path)
    e.add_argument("--level", choices=sorted(LEVELS), default="all")
    e.add_argument("--num-images", type=int, help="default: distinct image ids in both files")
    e.add_argument("--views", type=Path, help="CSV image_id,view for view-filtered levels")
    e.add_argument("--class-agnostic", action="store_true")
    e.add_argument("--out", type=Path, help="directory for metrics.txt, metrics.csv and PR curves")

    a = sub.add_parser("ablate", help="fused vs single-scale comparison on synthetic data")
    a.add_argument("workdir", type=Path)
    a.add_argument("--config", type=Path, help="config whose [train]/[model]/[inference] sections are used")
    a.add_argument("--iterations", type=int)
    a.add_argument("--train-images", type=int, default=800)
    a.add_argument("--test-images", type=int, default=200)
    a.add_argument("--seed", type=int, default=7)
    return p


# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = SynthConfig(num_images=args.num_images, image_size=args.size, height_range=tuple(args.heights),
                      objects_per_image=tuple(args.objects), num_classes=args.num_classes,
                      seed=args.seed, prefix=args.prefix)
    idx = generate_synthetic(cfg, args.out)
    print(f"wrote {len(idx)} images, {len(idx.all_gts())} objects to {args.out}")
    return EXIT_OK


def write_loss_log(path, history) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(LOSS_COLUMNS)
        for row in history:
            wr.writerow([row["iter"]] + [repr(float(row[k])) for k in LOSS_COLUMNS[1:]])


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    root = args.data or (Path(cfg.data.train_dir) if cfg.data.train_dir else None)
    if root is None:
        raise UsageError("train: no dataset (pass --data or set [data] train_dir)")
    dataset = DatasetIndex.from_dir(root).load()
    model = Detector(cfg.model)
    history = train(model, dataset, cfg.train, log_every=100)
    write_checkpoint(args.out, model, cfg)
    write_loss_log(args.loss_log or args.out.with_name(args.out.name + ".loss.csv"), history)
    print(f"trained {cfg.train.iterations} iterations; final loss {history[-1]['total']:.6f}")
    return EXIT_OK


def cmd_detect(args) -> int:
    model, cfg = load_model(args.checkpoint)
    icfg = cfg.inference
    if args.score_thresh is not None:
        icfg = replace(icfg, score_thresh=args.score_thresh)
    if args.nms_iou is not None:
        icfg = replace(icfg, nms_iou=args.nms_iou)
    if args.input.is_dir():
        paths = list_images(args.input)
    elif args.input.is_file():
        paths = [args.input]
    else:
        raise DataError(f"no such image or directory: {args.input}")
    images = [load_image(path).data for path in paths]
    records = [DetectionRecord(path.stem, det.class_id, det.score, det.box)
               for path, dets in zip(paths, detect_many(model, images, icfg)) for det in dets]
    write_det_csv(args.out, records)
    print(f"{len(records)} detections on {len(paths)} images -> {args.out}")
    return EXIT_OK


def _read_views(path) -> dict[str, str]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return {r[0]: r[1] for r in rows[1:] if len(r) >= 2}


def cmd_eval(args) -> int:
    dets = read_det_csv(args.detections)
    gts = read_gt_csv(args.gt)
    if args.class_agnostic:
        dets, gts = ev.class_agnostic(dets), ev.class_agnostic(gts)
    n = args.num_images or len({d.image_id for d in dets} | {g.image_id for g in gts})
    if n <= 0:
        raise DataError("no images: pass --num-images")
    views = _read_views(args.views) if args.views else None
    task = "agnostic" if args.class_agnostic else "detection"
    report = ev.evaluate(dets, gts, n, LEVELS[args.level], views=views, task=task)

    def fmt(v):
        return "n/a" if v is None else f"{v:.4f}"

    print(f"{task} [{report.level}]  AP {fmt(report.ap)}  AR {fmt(report.ar)}  ({n} images)")
    for m in report.per_class:
        print(f"  class {m.class_id}: AP {fmt(m.ap)}  AR {fmt(m.ar)}  gt {m.curve.num_gt}")
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        ev.write_metrics([report], args.out / "metrics.txt", args.out / "metrics.csv")
        for m in report.per_class:
            ev.write_pr_csv(m.curve, args.out / f"pr_class{m.class_id}.csv")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .experiment import ExperimentConfig, ablation_table, run_ablation

    exp = ExperimentConfig(train_images=args.train_images, test_images=args.test_images, seed=args.seed)
    if args.config:
        run = load_config(args.config)
        exp = replace(exp, train=run.train, model=run.model, inference=run.inference)
    if args.iterations:
        exp = replace(exp, train=replace(exp.train, iterations=args.iterations))
    results = run_ablation(exp, args.workdir)
    print(ablation_table(results))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "detect": cmd_detect, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"mspdet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"mspdet: invalid input: {exc}", file=sys.stderr)
        return EXIT_DATA


def run() -> None:
    sys.exit(main())
