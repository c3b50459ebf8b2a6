"""
Detection evaluation
====================

Greedy class-aware TP/FP matching, precision/recall and their relative
changes, all-point interpolated AP/mAP, and confidence-score statistics.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, NamedTuple, Optional

import numpy as np

from .annoset import Annotation, CategoryId, ImageId
from .geometry import boxes_to_array, iou_matrix

DEFAULT_MATCH_IOU = 0.5
AP_PROTOCOL = "all-point interpolated AP, single IoU threshold, class-aware greedy matching"


@dataclass(frozen=True)
class DetectionMatch:
    image_id: ImageId
    index: int  # position in dets[image_id]
    category: CategoryId
    score: float
    is_tp: bool
    gt_index: Optional[int] = None


@dataclass
class MatchReport:
    detections: List[DetectionMatch]
    num_gt: Dict[CategoryId, int]
    match_iou: float

    @property
    def categories(self) -> List[CategoryId]:
        return sorted(set(self.num_gt) | {d.category for d in self.detections})

    def tp(self, category: Optional[CategoryId] = None) -> int:
        return sum(d.is_tp for d in self._select(category))

    def fp(self, category: Optional[CategoryId] = None) -> int:
        return sum(not d.is_tp for d in self._select(category))

    def fn(self, category: Optional[CategoryId] = None) -> int:
        return self.n_gt(category) - self.tp(category)

    def n_gt(self, category: Optional[CategoryId] = None) -> int:
        if category is None:
            return sum(self.num_gt.values())
        return self.num_gt.get(category, 0)

    def _select(self, category):
        if category is None:
            return self.detections
        return [d for d in self.detections if d.category == category]


def match_tp_fp(
    dets: Mapping[ImageId, List[Annotation]],
    gt: Mapping[ImageId, List[Annotation]],
    match_iou: float = DEFAULT_MATCH_IOU,
) -> MatchReport:
    """Label every detection TP or FP by greedy one-to-one matching.

    Within each image, detections are visited by descending score (ties keep
    input order). Each claims the unmatched same-category ground truth with
    the highest IoU >= ``match_iou``; IoU ties go to the lower gt index.
    """
    if not 0.0 < match_iou <= 1.0:
        raise ValueError(f"match_iou must lie in (0, 1], got {match_iou}")
    num_gt: Dict[CategoryId, int] = {}
    for anns in gt.values():
        for a in anns:
            num_gt[a.category] = num_gt.get(a.category, 0) + 1

    results: List[DetectionMatch] = []
    for image_id, image_dets in dets.items():
        if not image_dets:
            continue
        image_gt = gt.get(image_id) or []
        overlaps = iou_matrix(
            boxes_to_array([d.box for d in image_dets]),
            boxes_to_array([g.box for g in image_gt]),
        )
        gt_cats = np.array([g.category for g in image_gt], dtype=np.int64)
        taken = np.zeros(len(image_gt), dtype=bool)
        order = sorted(range(len(image_dets)), key=lambda i: -image_dets[i].score)
        for i in order:
            det = image_dets[i]
            gt_index = None
            if len(image_gt):
                row = np.where((gt_cats == det.category) & ~taken, overlaps[i], -1.0)
                j = int(np.argmax(row))
                if row[j] >= match_iou:
                    gt_index = j
                    taken[j] = True
            results.append(DetectionMatch(image_id, i, det.category, det.score, gt_index is not None, gt_index))
    return MatchReport(results, num_gt, match_iou)


class PrecisionRecall(NamedTuple):
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int

    @property
    def no_detections(self) -> bool:
        """Precision is 1.0 by convention, not measured."""
        return self.tp + self.fp == 0

    @property
    def no_ground_truth(self) -> bool:
        return self.tp + self.fn == 0


def precision_recall(report: MatchReport, category: Optional[CategoryId] = None) -> PrecisionRecall:
    """Precision and recall pooled over all categories (or one).

    Precision of an empty detection set is 1.0 by convention; recall without
    ground truth is NaN. Both cases are flagged on the result.
    """
    tp, fp, fn = report.tp(category), report.fp(category), report.fn(category)
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else math.nan
    return PrecisionRecall(precision, recall, tp, fp, fn)


@dataclass(frozen=True)
class PRDelta:
    """Relative change (in %) of recall and precision; ``None`` when undefined."""

    delta_recall_pct: Optional[float]
    delta_precision_pct: Optional[float]
    old: PrecisionRecall
    new: PrecisionRecall

    @property
    def defined(self) -> bool:
        return self.delta_recall_pct is not None and self.delta_precision_pct is not None


def _relative_pct(new: float, old: float) -> Optional[float]:
    if old == 0 or math.isnan(old) or math.isnan(new):
        return None
    return 100.0 * (new - old) / old


def delta_pr(
    new_set: Mapping[ImageId, List[Annotation]],
    old_set: Mapping[ImageId, List[Annotation]],
    true_gt: Mapping[ImageId, List[Annotation]],
    match_iou: float = DEFAULT_MATCH_IOU,
) -> PRDelta:
    old = precision_recall(match_tp_fp(old_set, true_gt, match_iou))
    new = precision_recall(match_tp_fp(new_set, true_gt, match_iou))
    d_recall = _relative_pct(new.recall, old.recall)
    if old.no_detections or new.no_detections:
        d_precision = None
    else:
        d_precision = _relative_pct(new.precision, old.precision)
    return PRDelta(d_recall, d_precision, old, new)


def ap_from_report(report: MatchReport, category: CategoryId) -> float:
    """All-point interpolated AP of one category.

    PR points are taken at every distinct score, so tied detections enter
    the curve together.
    """
    n_gt = report.n_gt(category)
    if n_gt == 0:
        raise ValueError(f"category {category} has no ground truth; AP undefined")
    sel = [d for d in report.detections if d.category == category]
    if not sel:
        return 0.0
    scores = np.array([d.score for d in sel])
    tps = np.array([d.is_tp for d in sel], dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    scores, tps = scores[order], tps[order]
    ctp = np.cumsum(tps)
    cfp = np.cumsum(1 - tps)
    # last index of every run of equal scores
    ends = np.r_[np.nonzero(np.diff(scores))[0], len(scores) - 1]
    recall = ctp[ends] / n_gt
    precision = ctp[ends] / (ctp[ends] + cfp[ends])

    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(
    dets: Mapping[ImageId, List[Annotation]],
    gt: Mapping[ImageId, List[Annotation]],
    category: CategoryId,
    match_iou: float = DEFAULT_MATCH_IOU,
) -> float:
    return ap_from_report(match_tp_fp(dets, gt, match_iou), category)


@dataclass
class MeanAP:
    value: float
    per_category: Dict[CategoryId, float]
    excluded: List[CategoryId]  # detected but absent from ground truth


def map_over_categories(report: MatchReport) -> MeanAP:
    """Unweighted mean of per-category AP over categories present in ground truth."""
    per_cat = {c: ap_from_report(report, c) for c in sorted(report.num_gt) if report.num_gt[c] > 0}
    excluded = [c for c in report.categories if c not in per_cat]
    value = float(np.mean(list(per_cat.values()))) if per_cat else math.nan
    return MeanAP(value, per_cat, excluded)


@dataclass
class ScoreHistogram:
    edges: np.ndarray
    tp: np.ndarray
    fp: np.ndarray

    def rows(self):
        for k in range(len(self.tp)):
            yield float(self.edges[k]), float(self.edges[k + 1]), int(self.tp[k]), int(self.fp[k])


def score_histogram(report: MatchReport, bins: int = 10, category: Optional[CategoryId] = None) -> ScoreHistogram:
    """TP and FP counts per uniform score bin over [0, 1] (last bin closed)."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    sel = report._select(category)
    tp_scores = [d.score for d in sel if d.is_tp]
    fp_scores = [d.score for d in sel if not d.is_tp]
    tp, edges = np.histogram(tp_scores, bins=bins, range=(0.0, 1.0))
    fp, _ = np.histogram(fp_scores, bins=bins, range=(0.0, 1.0))
    return ScoreHistogram(edges, tp, fp)


def fraction_above(report: MatchReport, score_cut: float, category: Optional[CategoryId] = None) -> float:
    """Share of true positives scoring strictly above ``score_cut``; NaN without TP."""
    scores = [d.score for d in report._select(category) if d.is_tp]
    if not scores:
        return math.nan
    return sum(s > score_cut for s in scores) / len(scores)


def count_above(report: MatchReport, score_cut: float, tp: bool, category: Optional[CategoryId] = None) -> int:
    return sum(d.score > score_cut for d in report._select(category) if d.is_tp == tp)


@dataclass
class CategoryRow:
    category: CategoryId
    name: str
    ap: Optional[float]
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int


@dataclass
class EvalReport:
    rows: List[CategoryRow]
    map: float
    precision: float
    recall: float
    histogram: ScoreHistogram
    match_iou: float
    excluded: List[CategoryId] = field(default_factory=list)
    protocol: str = AP_PROTOCOL

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "match_iou": self.match_iou,
            "mAP": _num(self.map),
            "precision": _num(self.precision),
            "recall": _num(self.recall),
            "excluded_categories": list(self.excluded),
            "categories": [
                {
                    "category_id": r.category,
                    "name": r.name,
                    "AP": _num(r.ap),
                    "precision": _num(r.precision),
                    "recall": _num(r.recall),
                    "tp": r.tp,
                    "fp": r.fp,
                    "fn": r.fn,
                }
                for r in self.rows
            ],
        }


def _num(x):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return None
    return x


def evaluate(
    dets: Mapping[ImageId, List[Annotation]],
    gt: Mapping[ImageId, List[Annotation]],
    match_iou: float = DEFAULT_MATCH_IOU,
    bins: int = 10,
    category_names: Optional[Mapping[CategoryId, str]] = None,
) -> EvalReport:
    report = match_tp_fp(dets, gt, match_iou)
    mean_ap = map_over_categories(report)
    names = category_names or {}
    rows = []
    for c in report.categories:
        pr = precision_recall(report, c)
        rows.append(
            CategoryRow(c, names.get(c, str(c)), mean_ap.per_category.get(c), pr.precision, pr.recall, pr.tp, pr.fp, pr.fn)
        )
    overall = precision_recall(report)
    return EvalReport(
        rows=rows,
        map=mean_ap.value,
        precision=overall.precision,
        recall=overall.recall,
        histogram=score_histogram(report, bins),
        match_iou=match_iou,
        excluded=mean_ap.excluded,
    )


def write_report(report: EvalReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2) + "\n")


def write_histogram_csv(hist: ScoreHistogram, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["bin_low", "bin_high", "tp", "fp"])
        for row in hist.rows():
            w.writerow(row)
