"""Task metrics: 3D detection AP over 40 recall levels, CLEAR-MOT MOTA, depth RMSE."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .dataset_io import DepthMap, ObjectLabel
from .geometry import box_iou_2d, box_iou_3d

DONTCARE = "DontCare"


class MetricError(ValueError):
    pass


@dataclass
class DetectionEvalConfig:
    iou_threshold: float = 0.7
    cls: str = "Car"
    min_height: float = 25.0  # px, KITTI "moderate"
    max_occlusion: int = 1
    max_truncation: float = 0.30
    recall_levels: int = 40

    def __post_init__(self):
        if not 0 < self.iou_threshold <= 1:
            raise ValueError(f"iou_threshold must be in (0, 1], got {self.iou_threshold}")
        if self.recall_levels < 1:
            raise ValueError("recall_levels must be >= 1")


@dataclass
class TrackingEvalConfig:
    iou_threshold: float = 0.5
    cls: str = "Car"


def filter_difficulty(labels: Sequence[ObjectLabel], config: DetectionEvalConfig = None):
    """Split ground truth into boxes that are scored and boxes that are ignored.

    A prediction matched to an ignored box is neither a true nor a false
    positive. Everything that is not a ``config.cls`` box passing the
    height, occlusion and truncation gates is ignored.
    """
    config = config or DetectionEvalConfig()
    evaluated, ignored = [], []
    for lb in labels:
        ok = (
            lb.type == config.cls
            and lb.height_2d >= config.min_height
            and lb.occlusion <= config.max_occlusion
            and lb.truncation <= config.max_truncation
        )
        (evaluated if ok else ignored).append(lb)
    return evaluated, ignored


def _overlap_fraction(pred_box, region) -> float:
    """Intersection area divided by the prediction's own 2D area."""
    w = min(pred_box[2], region[2]) - max(pred_box[0], region[0])
    h = min(pred_box[3], region[3]) - max(pred_box[1], region[1])
    area = (pred_box[2] - pred_box[0]) * (pred_box[3] - pred_box[1])
    if w <= 0 or h <= 0 or area <= 0:
        return 0.0
    return w * h / area


def _absorbed_by_ignored(pred: ObjectLabel, ignored: Sequence[ObjectLabel], thr: float) -> bool:
    for g in ignored:
        if g.type == DONTCARE or min(g.dims) <= 0:
            if _overlap_fraction(pred.bbox2d, g.bbox2d) >= 0.5:
                return True
        elif box_iou_3d(pred, g) >= thr:
            return True
    return False


def _score(lb: ObjectLabel) -> float:
    return 1.0 if lb.score is None else lb.score


def match_frame(preds: Sequence[ObjectLabel], gts: Sequence[ObjectLabel], config: DetectionEvalConfig):
    """Greedy matching in descending score order.

    Returns ``(n_evaluated_gt, [(score, is_tp), ...])`` with predictions that
    fall on ignored ground truth left out.
    """
    evaluated, ignored = filter_difficulty(gts, config)
    cands = sorted((p for p in preds if p.type == config.cls), key=_score, reverse=True)
    taken = [False] * len(evaluated)
    out = []
    for p in cands:
        best, best_iou = -1, config.iou_threshold
        for j, g in enumerate(evaluated):
            if taken[j]:
                continue
            iou = box_iou_3d(p, g)
            if iou >= best_iou:
                best, best_iou = j, iou
        if best >= 0:
            taken[best] = True
            out.append((_score(p), True))
        elif not _absorbed_by_ignored(p, ignored, config.iou_threshold):
            out.append((_score(p), False))
    return len(evaluated), out


def interpolated_ap(scored: Sequence, n_gt: int, recall_levels: int = 40) -> float:
    """Mean of max-interpolated precision at recall ``1/R, 2/R, ..., 1``.

    ``scored`` is ``(score, is_tp)`` for every counted prediction. Precision
    and recall are taken at each distinct score threshold.
    """
    if n_gt <= 0:
        raise MetricError("empty ground truth: no evaluated boxes")
    if not scored:
        return 0.0
    order = sorted(scored, key=lambda s: s[0], reverse=True)
    scores = np.array([s for s, _ in order])
    tp = np.cumsum([bool(t) for _, t in order])
    fp = np.arange(1, len(order) + 1) - tp
    # last index of each run of equal scores = one operating point per threshold
    ends = np.flatnonzero(np.append(scores[1:] != scores[:-1], True))
    tp, fp = tp[ends], fp[ends]
    precision = tp / (tp + fp)
    # sum exact ratios so the result does not depend on summation order
    total = Fraction(0)
    for k in range(1, recall_levels + 1):
        # recall tp / n_gt >= k / R, in integers
        reach = np.flatnonzero(tp * recall_levels >= k * n_gt)
        if reach.size:
            i = reach[np.argmax(precision[reach])]
            total += Fraction(int(tp[i]), int(tp[i] + fp[i]))
    return float(total / recall_levels)


def _by_frame(labels) -> dict:
    if isinstance(labels, Mapping):
        return {k: list(v) for k, v in labels.items()}
    grouped = defaultdict(list)
    for lb in labels:
        grouped[lb.frame].append(lb)
    return dict(grouped)


def average_precision(predictions, ground_truth, config: DetectionEvalConfig = None) -> float:
    """AP over all frames jointly. Inputs map frame id to labels (or are flat lists with ``frame`` set)."""
    config = config or DetectionEvalConfig()
    preds, gts = _by_frame(predictions), _by_frame(ground_truth)
    n_gt, scored = 0, []
    for frame in sorted(set(preds) | set(gts), key=str):
        n, s = match_frame(preds.get(frame, []), gts.get(frame, []), config)
        n_gt += n
        scored += s
    return interpolated_ap(scored, n_gt, config.recall_levels)


# -- tracking -----------------------------------------------------------------


@dataclass
class MotFrameCounts:
    fn: int = 0
    fp: int = 0
    idsw: int = 0
    gt: int = 0
    per_frame: list = field(default_factory=list)

    def add(self, frame, fn, fp, idsw, gt) -> None:
        if fn > gt or min(fn, fp, idsw, gt) < 0:
            raise MetricError(f"inconsistent counts in frame {frame}")
        self.fn += fn
        self.fp += fp
        self.idsw += idsw
        self.gt += gt
        self.per_frame.append({"frame": frame, "fn": fn, "fp": fp, "idsw": idsw, "gt": gt})

    def merge(self, other: "MotFrameCounts") -> "MotFrameCounts":
        return MotFrameCounts(
            self.fn + other.fn, self.fp + other.fp, self.idsw + other.idsw, self.gt + other.gt,
            self.per_frame + other.per_frame,
        )  # fmt: skip

    @property
    def mota(self) -> float:
        if self.gt == 0:
            raise MetricError("empty ground truth: MOTA undefined")
        return 1.0 - (self.fn + self.fp + self.idsw) / self.gt


def _index_tracks(objs: Sequence[ObjectLabel], frame, what: str) -> dict:
    out = {}
    for o in objs:
        if o.track_id in out:
            raise MetricError(f"duplicate {what} track id {o.track_id} in frame {frame}")
        out[o.track_id] = o
    return out


def clear_mot_counts(pred_tracks, gt_tracks, config: TrackingEvalConfig = None) -> MotFrameCounts:
    """CLEAR-MOT error counts for one sequence.

    Correspondences from the previous frame are kept while their 2D IOU stays
    at or above the threshold; the rest are matched by an assignment that
    maximizes total IOU. A ground-truth track whose matched hypothesis id
    differs from its last matched id counts one identity switch. Unmatched
    predictions covering a DontCare region are not counted as false positives.
    """
    config = config or TrackingEvalConfig()
    thr = config.iou_threshold
    preds, gts = _by_frame(pred_tracks), _by_frame(gt_tracks)
    counts = MotFrameCounts()
    prev = {}  # gt id -> pred id matched in the previous frame
    last = {}  # gt id -> pred id of its most recent match
    for frame in sorted(set(preds) | set(gts)):
        frame_gt = gts.get(frame, [])
        g = _index_tracks([o for o in frame_gt if o.type == config.cls], frame, "ground-truth")
        p = _index_tracks([o for o in preds.get(frame, []) if o.type == config.cls], frame, "predicted")
        dontcare = [o for o in frame_gt if o.type == DONTCARE]

        matches = {}
        for gid, pid in prev.items():
            if gid in g and pid in p and box_iou_2d(g[gid].bbox2d, p[pid].bbox2d) >= thr:
                matches[gid] = pid
        free_g = [gid for gid in g if gid not in matches]
        used = set(matches.values())
        free_p = [pid for pid in p if pid not in used]
        idsw = 0
        if free_g and free_p:
            iou = np.array([[box_iou_2d(g[a].bbox2d, p[b].bbox2d) for b in free_p] for a in free_g])
            cost = np.where(iou >= thr, -iou, 1.0)
            rows, cols = linear_sum_assignment(cost)
            for r, c in zip(rows, cols):
                if iou[r, c] >= thr:
                    gid, pid = free_g[r], free_p[c]
                    if gid in last and last[gid] != pid:
                        idsw += 1
                    matches[gid] = pid
        matched_p = set(matches.values())
        fp = sum(
            1
            for pid, obj in p.items()
            if pid not in matched_p and not any(_overlap_fraction(obj.bbox2d, d.bbox2d) >= 0.5 for d in dontcare)
        )
        counts.add(frame, len(g) - len(matches), fp, idsw, len(g))
        last.update(matches)
        prev = matches
    return counts


def mota(pred_tracks, gt_tracks, config: TrackingEvalConfig = None):
    """``(MOTA, counts)``; MOTA = 1 - (FN + FP + IDSW) / GT summed over frames."""
    counts = clear_mot_counts(pred_tracks, gt_tracks, config)
    return counts.mota, counts


# -- depth --------------------------------------------------------------------


def depth_error_sums(pred: DepthMap, gt: DepthMap):
    """``(sum of squared errors in mm^2, number of ground-truth pixels)``."""
    if pred.raw.shape != gt.raw.shape:
        raise MetricError(f"depth map shapes differ: {pred.raw.shape} vs {gt.raw.shape}")
    valid = gt.valid
    if (valid & ~pred.valid).any():
        missing = int((valid & ~pred.valid).sum())
        raise MetricError(f"prediction has no depth at {missing} ground-truth pixel(s)")
    diff = pred.depth_mm[valid] - gt.depth_mm[valid]
    return float(np.dot(diff, diff)), int(valid.sum())


def rmse(pred: DepthMap, gt: DepthMap) -> float:
    """Root-mean-squared depth error in millimeters over pixels with ground truth."""
    return pooled_rmse([(pred, gt)])


def pooled_rmse(pairs) -> float:
    """RMSE over all ground-truth pixels of several ``(pred, gt)`` pairs taken together."""
    total, m = 0.0, 0
    for pred, gt in pairs:
        s, n = depth_error_sums(pred, gt)
        total += s
        m += n
    if m == 0:
        raise MetricError("no ground-truth depth pixels")
    return float(np.sqrt(total / m))
