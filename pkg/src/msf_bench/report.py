"""Robustness scores and report tables.

``Rb`` compares a corrupted run with the clean run of the same system;
``mRb`` averages ``Rb`` over corruption patterns, then over severity levels.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Optional

from .severity import PATTERNS

TASK_METRIC = {"detection": "AP", "tracking": "MOTA", "depth": "RMSE"}
ERROR_TASKS = {"depth"}  # lower metric is better
FORMATS = ("json", "csv", "markdown")

# weather, camera and noise columns first, then misalignment and signal loss
TABLE_PATTERNS = ("RN", "FG", "BR", "DK", "DT", "MB", "DB", "GN_C", "GN_L", "IN_C", "IN_L")
REPORT_ORDER = TABLE_PATTERNS + tuple(p for p in PATTERNS if p not in TABLE_PATTERNS)
RB_RULES = {
    "score": "Rb = P_c / P_clean (MOTA clamped at 0 first)",
    "error": "Rb = P_clean / P_c (inverse ratio so that Rb = 1 when unchanged and < 1 when degraded)",
}


class RobustnessError(ValueError):
    pass


def display_name(pattern: str) -> str:
    for suffix, tag in (("_C", "(C)"), ("_L", "(L)")):
        if pattern.endswith(suffix):
            return pattern[: -len(suffix)] + tag
    return pattern


@dataclass
class RunResult:
    task: str
    pattern: str
    severity: Optional[int]
    metric_value: float
    metric: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASK_METRIC:
            raise ValueError(f"unknown task {self.task!r}; expected one of {sorted(TASK_METRIC)}")
        self.metric = self.metric or TASK_METRIC[self.task]
        if self.pattern != "clean" and self.pattern not in PATTERNS:
            raise ValueError(f"unknown pattern {self.pattern!r}")
        if self.severity is not None and (isinstance(self.severity, bool) or not isinstance(self.severity, int)):
            raise ValueError(f"severity must be an integer, got {self.severity!r}")
        if self.pattern != "clean" and self.severity is None:
            raise ValueError(f"corrupted result for {self.pattern} needs a severity")

    @property
    def is_clean(self) -> bool:
        return self.pattern == "clean"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: Mapping) -> "RunResult":
        try:
            return cls(
                task=data["task"],
                pattern=data["pattern"],
                severity=data.get("severity"),
                metric_value=float(data["metric_value"]),
                metric=data.get("metric", ""),
                meta=dict(data.get("meta", {})),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ValueError(f"malformed run result: {e}") from None


def load_run_result(path) -> RunResult:
    with open(path, "rb") as f:
        raw = f.read()
    try:
        data = json.loads(raw.decode("utf-8"))
    except UnicodeDecodeError:
        raise ValueError(f"{path}: not UTF-8 text") from None
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: not valid JSON ({e})") from None
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a JSON object, got {type(data).__name__}")
    try:
        return RunResult.from_dict(data)
    except ValueError as e:
        raise ValueError(f"{path}: {e}") from None


def robustness_score(p_c: float, p_clean: float, task: str) -> float:
    """Corrupted-over-clean performance, oriented so that 1 means unaffected."""
    if task not in TASK_METRIC:
        raise ValueError(f"unknown task {task!r}")
    if task in ERROR_TASKS:
        if p_c <= 0:
            raise RobustnessError(f"robustness undefined for non-positive corrupted error {p_c}")
        if p_clean < 0:
            raise RobustnessError(f"clean error must be non-negative, got {p_clean}")
        return p_clean / p_c
    if task == "tracking":
        p_c, p_clean = max(p_c, 0.0), max(p_clean, 0.0)
    if p_clean <= 0:
        raise RobustnessError(f"robustness undefined for clean score {p_clean}")
    if p_c < 0:
        raise RobustnessError(f"score must be non-negative, got {p_c}")
    return p_c / p_clean


def _mean(values) -> float:
    values = list(values)
    return sum(values) / len(values)


def per_severity_means(scores: Mapping) -> dict:
    """``{severity: mean Rb over the patterns present at that severity}``."""
    grouped = {}
    for (_, severity), rb in scores.items():
        grouped.setdefault(severity, []).append(rb)
    return {s: _mean(v) for s, v in sorted(grouped.items())}


def mean_robustness(scores: Mapping) -> float:
    """mRb from ``{(pattern, severity): Rb}``; absent cells are left out of both means."""
    if not scores:
        raise RobustnessError("no robustness scores to average")
    return _mean(per_severity_means(scores).values())


def _missing_cells(scores: Mapping) -> list:
    patterns = {p for p, _ in scores}
    severities = {s for _, s in scores}
    return sorted((p, s) for p in patterns for s in severities if (p, s) not in scores)


@dataclass
class RobustnessReport:
    task: str
    clean: float
    cells: list
    per_severity: list
    mrb: float
    meta: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "RobustnessReport":
        return cls(**{k: data[k] for k in ("task", "clean", "cells", "per_severity", "mrb")},
                   meta=data.get("meta", {}), warnings=data.get("warnings", []))  # fmt: skip


def build_report(clean: RunResult, results: Iterable[RunResult], meta: Optional[dict] = None) -> RobustnessReport:
    results = list(results)
    if not clean.is_clean:
        raise RobustnessError(f"baseline must be a clean run, got pattern {clean.pattern!r}")
    if not results:
        raise RobustnessError("no corrupted results to report")
    scores, cells = {}, []
    order = {p: i for i, p in enumerate(REPORT_ORDER)}
    for r in sorted(results, key=lambda r: (order.get(r.pattern, len(order)), r.severity or 0)):
        if r.task != clean.task:
            raise RobustnessError(f"task mismatch: clean run is {clean.task}, {r.pattern} run is {r.task}")
        if r.is_clean:
            raise RobustnessError("more than one clean result")
        key = (r.pattern, int(r.severity))
        if key in scores:
            raise RobustnessError(f"duplicate result for {r.pattern} severity {r.severity}")
        rb = robustness_score(r.metric_value, clean.metric_value, clean.task)
        scores[key] = rb
        cells.append({"pattern": r.pattern, "severity": key[1], "value": r.metric_value, "rb": rb})
    notes = []
    missing = _missing_cells(scores)
    if missing:
        notes.append("missing cells excluded from means: " + ", ".join(f"{p}@{s}" for p, s in missing))
        warnings.warn(notes[-1], stacklevel=2)
    rule = RB_RULES["error" if clean.task in ERROR_TASKS else "score"]
    return RobustnessReport(
        task=clean.task,
        clean=clean.metric_value,
        cells=cells,
        per_severity=[{"severity": s, "rb": v} for s, v in per_severity_means(scores).items()],
        mrb=mean_robustness(scores),
        meta={"metric": TASK_METRIC[clean.task], "rb_rule": rule, **(meta or {})},
        warnings=notes,
    )


def _pattern_means(report: RobustnessReport) -> dict:
    grouped = {}
    for c in report.cells:
        grouped.setdefault(c["pattern"], []).append(c["rb"])
    return {p: _mean(v) for p, v in grouped.items()}


def _severities(report: RobustnessReport) -> list:
    return sorted({c["severity"] for c in report.cells})


def _to_csv(report: RobustnessReport) -> str:
    sevs = _severities(report)
    lookup = {(c["pattern"], c["severity"]): c["rb"] for c in report.cells}
    means = _pattern_means(report)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["pattern", *(f"rb_s{s}" for s in sevs), "rb_mean"])
    for p in (p for p in REPORT_ORDER if p in means):
        row = [lookup.get((p, s)) for s in sevs]
        writer.writerow([p, *("" if v is None else f"{v:.6f}" for v in row), f"{means[p]:.6f}"])
    return buf.getvalue()


def _to_markdown(report: RobustnessReport) -> str:
    means = _pattern_means(report)
    patterns = list(TABLE_PATTERNS) + [p for p in REPORT_ORDER if p in means and p not in TABLE_PATTERNS]
    sevs = {r["severity"]: r["rb"] for r in report.per_severity}
    header = ["Task", *map(display_name, patterns), *(f"Rb^s{s}" for s in sevs), "mRb"]
    row = [report.task, *(f"{means[p]:.2f}" if p in means else "-" for p in patterns)]
    row += [f"{v:.2f}" for v in sevs.values()] + [f"{report.mrb:.2f}"]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header), "| " + " | ".join(row) + " |"]
    return "\n".join(lines) + "\n"


def emit_report(report: RobustnessReport, fmt: str = "json") -> str:
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        return _to_csv(report)
    if fmt == "markdown":
        return _to_markdown(report)
    raise ValueError(f"unknown report format {fmt!r}; expected one of {', '.join(FORMATS)}")
