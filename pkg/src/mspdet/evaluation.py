"""Detection evaluation: overlap, greedy matching, PR curves, AP and
FPPI-sampled AR, with height-filtered levels and per-task class breakdowns.

Records are duck-typed: detections need ``image_id``, ``class_id``, ``score``
and ``box``; ground truth needs ``image_id``, ``class_id`` and ``box``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import boxes as bx
from .boxes import overlap  # noqa: F401  (re-exported)

IOU_THRESH = 0.5
FPPI_POINTS = 10.0 ** (-2.0 + np.arange(9) / 4.0)


@dataclass(frozen=True)
class EvalLevel:
    """Ground truth outside [min_height, max_height) (or off-view) is ignored."""

    name: str
    min_height: float = 0.0
    max_height: float = float("inf")
    views: frozenset[str] | None = None

    def __post_init__(self):
        if self.min_height < 0 or self.max_height <= self.min_height:
            raise ValueError(f"bad height range for level {self.name}")

    def ignores(self, gt, view: str | None = None) -> bool:
        h = gt.box[3] - gt.box[1]
        if h < self.min_height or h >= self.max_height:
            return True
        return self.views is not None and view not in self.views


L1 = EvalLevel("L1", 70.0, views=frozenset({"back"}))
L2 = EvalLevel("L2", 25.0)
ALL = EvalLevel("all", 0.0)
SMALL = EvalLevel("small", 0.0, 16.0)


@dataclass
class MatchResult:
    """Per-detection flags (aligned with the input detection list) and per-gt flags."""

    tp: np.ndarray        # bool
    fp: np.ndarray        # bool
    ignored: np.ndarray   # bool; matched to an ignore region, excluded from scoring
    gt_matched: np.ndarray
    gt_ignored: np.ndarray

    @property
    def num_gt(self) -> int:
        return int((~self.gt_ignored).sum())


def match_detections(dets: Sequence, gts: Sequence, iou_thresh: float = IOU_THRESH,
                     level: EvalLevel = ALL, views: Mapping[str, str] | None = None) -> MatchResult:
    """Greedy score-ordered matching per (image, class).

    A detection takes the unmatched, non-ignored gt of highest overlap above
    ``iou_thresh`` (TP). Failing that, overlap above the threshold with an
    ignored gt removes it from scoring; otherwise it is a FP. Ignored gts may
    absorb several detections.
    """
    views = views or {}
    nd, ng = len(dets), len(gts)
    tp = np.zeros(nd, bool)
    fp = np.zeros(nd, bool)
    ign = np.zeros(nd, bool)
    gt_matched = np.zeros(ng, bool)
    gt_ignored = np.array([level.ignores(g, views.get(g.image_id)) for g in gts], dtype=bool)

    groups: dict[tuple, tuple[list[int], list[int]]] = {}
    for i, d in enumerate(dets):
        groups.setdefault((d.image_id, d.class_id), ([], []))[0].append(i)
    for j, g in enumerate(gts):
        groups.setdefault((g.image_id, g.class_id), ([], []))[1].append(j)

    for d_idx, g_idx in groups.values():
        if not d_idx:
            continue
        d_idx = sorted(d_idx, key=lambda i: -dets[i].score)
        if not g_idx:
            fp[d_idx] = True
            continue
        ious = bx.iou_matrix([list(dets[i].box) for i in d_idx], [list(gts[j].box) for j in g_idx])
        g_ign = gt_ignored[g_idx]
        taken = np.zeros(len(g_idx), bool)
        for row, i in enumerate(d_idx):
            cand = (ious[row] > iou_thresh) & ~g_ign & ~taken
            if cand.any():
                best = int(np.argmax(np.where(cand, ious[row], -1.0)))
                taken[best] = True
                tp[i] = True
            elif np.any((ious[row] > iou_thresh) & g_ign):
                ign[i] = True
            else:
                fp[i] = True
        gt_matched[g_idx] = taken
    return MatchResult(tp, fp, ign, gt_matched, gt_ignored)


@dataclass
class PRCurve:
    """Cumulative counts at each distinct score threshold, highest first."""

    thresholds: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    num_gt: int
    num_images: int

    @property
    def recall(self) -> np.ndarray:
        return self.tp / self.num_gt if self.num_gt else np.zeros_like(self.tp, dtype=float)

    @property
    def precision(self) -> np.ndarray:
        total = self.tp + self.fp
        return np.where(total > 0, self.tp / np.maximum(total, 1), 0.0)

    @property
    def fppi(self) -> np.ndarray:
        return self.fp / self.num_images


def pr_curve(scores, tp, fp, num_gt: int, num_images: int = 1) -> PRCurve:
    """Build a curve from scored detections already flagged TP/FP (ignored ones removed)."""
    scores = np.asarray(scores, dtype=np.float64)
    tp = np.asarray(tp, dtype=np.int64)
    fp = np.asarray(fp, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    s, ctp, cfp = scores[order], np.cumsum(tp[order]), np.cumsum(fp[order])
    # last index of each run of equal scores
    last = np.nonzero(np.append(s[1:] != s[:-1], True))[0] if len(s) else np.array([], dtype=np.int64)
    return PRCurve(s[last], ctp[last], cfp[last], int(num_gt), int(num_images))


def curve_from_match(dets: Sequence, match: MatchResult, num_images: int) -> PRCurve:
    keep = ~match.ignored
    scores = np.array([d.score for d in dets], dtype=np.float64)[keep]
    return pr_curve(scores, match.tp[keep], match.fp[keep], match.num_gt, num_images)


def average_precision(curve: PRCurve) -> float | None:
    """All-points interpolated area under the PR curve; None without ground truth."""
    if curve.num_gt == 0:
        return None
    if len(curve.thresholds) == 0:
        return 0.0
    r = np.concatenate([[0.0], curve.recall])
    p = np.concatenate([[0.0], curve.precision])
    env = np.maximum.accumulate(p[::-1])[::-1]
    return float(np.sum((r[1:] - r[:-1]) * env[1:]))


def average_recall(curve: PRCurve, points: np.ndarray = FPPI_POINTS) -> float | None:
    """Mean recall at the given FPPI operating points.

    At each point the lowest threshold whose FPPI does not exceed it is used;
    if none qualifies the recall there is 0.
    """
    if curve.num_gt == 0:
        return None
    if curve.num_images <= 0:
        raise ValueError("image count must be positive")
    fppi, rec = curve.fppi, curve.recall
    out = []
    for f in points:
        ok = np.nonzero(fppi <= f)[0]
        out.append(rec[ok[-1]] if len(ok) else 0.0)
    return float(np.mean(out))


@dataclass
class ClassMetrics:
    class_id: object
    ap: float | None
    ar: float | None
    curve: PRCurve


def evaluate_class(dets, gts, class_id, num_images: int, level: EvalLevel = ALL,
                   views=None, iou_thresh: float = IOU_THRESH) -> ClassMetrics:
    d = [x for x in dets if x.class_id == class_id]
    g = [x for x in gts if x.class_id == class_id]
    m = match_detections(d, g, iou_thresh, level, views)
    curve = curve_from_match(d, m, num_images)
    return ClassMetrics(class_id, average_precision(curve), average_recall(curve), curve)


@dataclass
class Report:
    task: str
    level: str
    ap: float | None
    ar: float | None
    per_class: list[ClassMetrics] = field(default_factory=list)


def _macro(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def evaluate(dets, gts, num_images: int, level: EvalLevel = ALL, classes: Iterable | None = None,
             views=None, task: str = "detection") -> Report:
    """Per-class AP/AR macro-averaged over classes that have ground truth."""
    if num_images <= 0:
        raise ValueError("image count must be positive")
    if classes is None:
        classes = sorted({g.class_id for g in gts} | {d.class_id for d in dets}, key=str)
    per = [evaluate_class(dets, gts, c, num_images, level, views) for c in classes]
    return Report(task, level.name, _macro(m.ap for m in per), _macro(m.ar for m in per), per)


def relabel(records, mapping: Mapping) -> list:
    out = []
    for r in records:
        if r.class_id not in mapping:
            raise KeyError(f"class_id {r.class_id!r} not in taxonomy")
        out.append(replace(r, class_id=mapping[r.class_id]))
    return out


def class_agnostic(records) -> list:
    return [replace(r, class_id=1) for r in records]


def classified_eval(dets, gts, tasks: Mapping[str, Mapping], num_images: int,
                    level: EvalLevel = ALL, views=None) -> dict[str, Report]:
    """One report per task; each task maps class_id -> task label (e.g. "L"/"R")."""
    out = {}
    for name, mapping in tasks.items():
        d, g = relabel(dets, mapping), relabel(gts, mapping)
        labels = sorted(set(mapping.values()), key=str)
        out[name] = evaluate(d, g, num_images, level, labels, views, task=name)
    return out


def write_metrics(reports: Sequence[Report], txt_path, csv_path) -> None:
    def fmt(v):
        return "nan" if v is None else f"{v:.6f}"

    lines = []
    for r in reports:
        lines.append(f"{r.task} [{r.level}]  AP {fmt(r.ap)}  AR {fmt(r.ar)}")
        for m in r.per_class:
            lines.append(f"  class {m.class_id}: AP {fmt(m.ap)}  AR {fmt(m.ar)}  gt {m.curve.num_gt}")
    with open(txt_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(csv_path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["task", "level", "AP", "AR"])
        for r in reports:
            wr.writerow([r.task, r.level, fmt(r.ap), fmt(r.ar)])


def write_pr_csv(curve: PRCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["recall", "precision"])
        for r, p in zip(curve.recall, curve.precision):
            wr.writerow([f"{r:.6f}", f"{p:.6f}"])
