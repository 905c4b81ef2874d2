"""Command-line entry points: ``msf-bench corrupt | evaluate | report``.

Exit codes: 0 success, 2 partial failure (some frames failed), 64 bad usage,
65 malformed input data, 66 missing input directory.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .dataset_io import KittiFormatError, load_depth_map, load_labels
from .engine import CorruptionError, CorruptionSpec, corrupt_dataset
from .metrics import (
    DetectionEvalConfig,
    MetricError,
    MotFrameCounts,
    TrackingEvalConfig,
    average_precision,
    clear_mot_counts,
    pooled_rmse,
)
from .report import FORMATS, RunResult, build_report, emit_report, load_run_result
from .severity import PATTERNS, ConfigError, default_table

EXIT_OK = 0
EXIT_PARTIAL = 2
EXIT_USAGE = 64
EXIT_DATAERR = 65
EXIT_NOINPUT = 66

log = logging.getLogger("msf_bench")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _number(text: str):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def _parse_params(items) -> dict:
    params = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--param expects KEY=VALUE, got {item!r}")
        params[key.strip()] = _number(value.strip())
    return params


# -- corrupt ------------------------------------------------------------------


def cmd_corrupt(args) -> int:
    if args.pattern not in PATTERNS:
        raise UsageError(f"unknown pattern {args.pattern!r}; choose from: {' '.join(PATTERNS)}")
    spec = CorruptionSpec(args.pattern, args.severity, args.seed, _parse_params(args.param))
    table = default_table()
    try:
        spec.validate(table)
    except CorruptionError as e:
        raise UsageError(str(e)) from None
    if not Path(args.in_dir).is_dir():
        log.error("dataset directory not found: %s", args.in_dir)
        return EXIT_NOINPUT
    log.info("corrupting %s with %s level %d (seed %d)", args.in_dir, spec.pattern, spec.severity, spec.seed)
    try:
        manifest = corrupt_dataset(args.in_dir, spec, args.out, jobs=args.jobs, table=table)
    except FileNotFoundError as e:
        log.error("%s", e)
        return EXIT_NOINPUT
    print(Path(args.out, "manifest.json"))
    if manifest["failed"]:
        log.error("%d item(s) failed: %s", len(manifest["failed"]), ", ".join(manifest["failed"][:10]))
        return EXIT_PARTIAL
    return EXIT_OK


# -- evaluate -----------------------------------------------------------------


def _label_files(path: Path) -> dict:
    if path.is_file():
        return {path.name: path}
    return {p.name: p for p in sorted(path.glob("*.txt"))}


def _evaluate_detection(gt: Path, pred: Path, args):
    config = DetectionEvalConfig(**({"iou_threshold": args.iou} if args.iou is not None else {}))
    gt_files = _label_files(gt)
    pred_files = _label_files(pred) if pred.exists() else {}
    gts = {name: load_labels(p, "detection") for name, p in gt_files.items()}
    preds = {name: load_labels(p, "detection") for name, p in pred_files.items()}
    return average_precision(preds, gts, config), {"frames": len(gts)}


def _evaluate_tracking(gt: Path, pred: Path, args):
    config = TrackingEvalConfig(**({"iou_threshold": args.iou} if args.iou is not None else {}))
    gt_files = _label_files(gt)
    pred_files = _label_files(pred) if pred.exists() else {}
    if gt.is_file() and pred.is_file():
        pred_files = {gt.name: pred}
    total = MotFrameCounts()
    for name, path in gt_files.items():
        gts = load_labels(path, "tracking")
        preds = load_labels(pred_files[name], "tracking") if name in pred_files else []
        total = total.merge(clear_mot_counts(preds, gts, config))
    return total.mota, {"fn": total.fn, "fp": total.fp, "idsw": total.idsw, "gt": total.gt}


def _evaluate_depth(gt: Path, pred: Path, args):
    pairs = []
    for g in sorted(gt.rglob("*.png")) if gt.is_dir() else [gt]:
        rel = g.relative_to(gt) if gt.is_dir() else Path(g.name)
        p = pred / rel if pred.is_dir() else pred
        if not p.is_file():
            raise KittiFormatError("missing depth prediction", path=p)
        pairs.append((load_depth_map(p), load_depth_map(g)))
    return pooled_rmse(pairs), {"images": len(pairs)}


_EVALUATORS = {"detection": _evaluate_detection, "tracking": _evaluate_tracking, "depth": _evaluate_depth}


def cmd_evaluate(args) -> int:
    gt, pred = Path(args.gt), Path(args.pred)
    if not gt.exists():
        log.error("ground truth not found: %s", gt)
        return EXIT_NOINPUT
    if args.pattern != "clean" and args.severity is None:
        raise UsageError("--severity is required for a corrupted run")
    try:
        value, details = _EVALUATORS[args.task](gt, pred, args)
    except (KittiFormatError, MetricError) as e:
        log.error("%s", e)
        return EXIT_DATAERR
    result = RunResult(args.task, args.pattern, args.severity, value, meta=details)
    out = Path(args.out) if args.out else Path(f"{args.task}_{args.pattern}_result.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(result.to_json())
    print(f"{result.metric} {value:.6f}")
    print(out)
    return EXIT_OK


# -- report -------------------------------------------------------------------


def cmd_report(args) -> int:
    try:
        results = [load_run_result(p) for p in args.results]
        clean = None
        if args.clean:
            clean = load_run_result(args.clean)
        else:
            cleans = [r for r in results if r.is_clean]
            clean = cleans[0] if len(cleans) == 1 else None
        if clean is None:
            log.error("no clean baseline result given")
            return EXIT_DATAERR
        corrupted = [r for r in results if not r.is_clean]
        report = build_report(clean, corrupted, meta={"severity_config": default_table().digest})
    except (OSError, ValueError) as e:
        log.error("%s", e)
        return EXIT_DATAERR

    formats = args.format or (list(FORMATS) if args.out else ["markdown"])
    if not args.out:
        for fmt in formats:
            sys.stdout.write(emit_report(report, fmt))
        return EXIT_OK
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    suffix = {"json": "json", "csv": "csv", "markdown": "md"}
    for fmt in formats:
        path = out / f"report.{suffix[fmt]}"
        path.write_text(emit_report(report, fmt))
        print(path)
    return EXIT_OK


# -- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="msf-bench", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("corrupt", help="write a corrupted copy of a KITTI directory")
    c.add_argument("--in", dest="in_dir", required=True, help="input KITTI split directory")
    c.add_argument("--out", required=True, help="output directory")
    c.add_argument("--pattern", required=True, help=f"one of: {' '.join(PATTERNS)}")
    c.add_argument("--severity", type=int, required=True, help="level 1-3 (1-5 for TM, LOSS_C, LOSS_L)")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="parallel worker processes")
    c.add_argument("--param", action="append", metavar="KEY=VALUE", help="override a physical parameter")
    c.set_defaults(func=cmd_corrupt)

    e = sub.add_parser("evaluate", help="score predictions against ground truth")
    e.add_argument("--task", required=True, choices=sorted(_EVALUATORS))
    e.add_argument("--gt", required=True, help="ground-truth file or directory")
    e.add_argument("--pred", required=True, help="prediction file or directory")
    e.add_argument("--out", help="where to write the run-result JSON")
    e.add_argument("--pattern", default="clean", choices=("clean", *PATTERNS), help="corruption the run used")
    e.add_argument("--severity", type=int)
    e.add_argument("--iou", type=float, help="override the matching IOU threshold")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="robustness scores from run results")
    r.add_argument("results", nargs="+", help="run-result JSON files")
    r.add_argument("--clean", help="clean baseline run-result JSON (default: the clean one among RESULTS)")
    r.add_argument("--format", action="append", choices=FORMATS)
    r.add_argument("--out", help="directory for report files (default: print to stdout)")
    r.set_defaults(func=cmd_report)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"msf-bench: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"msf-bench: error: {e}", file=sys.stderr)
        return EXIT_USAGE


def main(argv=None) -> None:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(message)s")
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
