"""
Confidence thresholds and classification targets
================================================
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional

import numpy as np

from .annoset import Annotation, AnnotationSet, CategoryId, ImageId
from .metrics import DEFAULT_MATCH_IOU, match_tp_fp

log = logging.getLogger(__name__)

DEFAULT_CONFIDENCE = 0.01


@dataclass(frozen=True)
class ThresholdTable:
    """Per-category confidence thresholds.

    With ``inclusive=False`` a detection survives when ``score > threshold``;
    with ``inclusive=True`` when ``score >= threshold``. Adaptive tables are
    inclusive because each threshold is the lowest score that is kept.
    """

    thresholds: Mapping[CategoryId, float] = field(default_factory=dict)
    default_threshold: float = DEFAULT_CONFIDENCE
    inclusive: bool = False
    fallbacks: Mapping[CategoryId, str] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for c, t in list(self.thresholds.items()) + [("default", self.default_threshold)]:
            if not 0.0 <= t <= 1.0:
                raise ValueError(f"threshold for {c} out of [0, 1]: {t}")

    def threshold_for(self, category: CategoryId) -> float:
        return self.thresholds.get(category, self.default_threshold)

    def passes(self, ann: Annotation) -> bool:
        t = self.threshold_for(ann.category)
        return ann.score >= t if self.inclusive else ann.score > t

    @classmethod
    def constant(cls, threshold: float = DEFAULT_CONFIDENCE) -> "ThresholdTable":
        return cls({}, threshold)

    @property
    def mean_threshold(self) -> float:
        return float(np.mean(list(self.thresholds.values()))) if self.thresholds else self.default_threshold


def filter_confidence(dets: Mapping[ImageId, List[Annotation]], table: ThresholdTable) -> AnnotationSet:
    out = {}
    for image_id, anns in dets.items():
        kept = [a for a in anns if table.passes(a)]
        if kept:
            out[image_id] = kept
    return out


def _best_threshold(scores: np.ndarray, is_tp: np.ndarray, n_gt: int) -> float:
    """Lowest observed score whose ``score >= t`` filter maximizes F1."""
    order = np.argsort(-scores, kind="stable")
    scores, is_tp = scores[order], is_tp[order]
    ctp = np.cumsum(is_tp)
    ends = np.r_[np.nonzero(np.diff(scores))[0], len(scores) - 1]

    best_t, best_num, best_den = None, -1, 1
    # ascending thresholds so ties keep the lowest one
    for e in ends[::-1]:
        # F1 = 2 TP / (kept + n_gt), compared as exact fractions
        num, den = 2 * int(ctp[e]), int(e) + 1 + n_gt
        if best_t is None or num * best_den > best_num * den:
            best_t, best_num, best_den = float(scores[e]), num, den
    return best_t


def adaptive_thresholds(
    val_dets: Mapping[ImageId, List[Annotation]],
    val_gt: Mapping[ImageId, List[Annotation]],
    match_iou: float = DEFAULT_MATCH_IOU,
    default_threshold: float = DEFAULT_CONFIDENCE,
    categories: Optional[List[CategoryId]] = None,
) -> ThresholdTable:
    """Pick, per category, the confidence threshold that maximizes F1 on validation data.

    Candidates are the distinct detection scores of the category; a candidate
    ``t`` keeps detections with ``score >= t``. Ties go to the lowest
    threshold. Categories without detections or without ground truth fall
    back to ``default_threshold`` and are listed in ``table.fallbacks``.
    """
    report = match_tp_fp(val_dets, val_gt, match_iou)
    if categories is None:
        categories = report.categories

    thresholds: Dict[CategoryId, float] = {}
    fallbacks: Dict[CategoryId, str] = {}
    for c in categories:
        sel = [d for d in report.detections if d.category == c]
        n_gt = report.n_gt(c)
        if not sel:
            fallbacks[c] = "no detections"
        elif n_gt == 0:
            fallbacks[c] = "no ground truth"
        else:
            thresholds[c] = _best_threshold(
                np.array([d.score for d in sel]), np.array([d.is_tp for d in sel], dtype=np.int64), n_gt
            )
    for c, why in fallbacks.items():
        log.warning("category %s: %s, using default threshold %g", c, why, default_threshold)
    return ThresholdTable(thresholds, default_threshold, inclusive=True, fallbacks=fallbacks)


def soft_target(category: int, score: float, num_categories: int) -> np.ndarray:
    """Soft classification target: background gets ``1 - score``, ``category`` gets ``score``."""
    if not 1 <= category <= num_categories:
        raise ValueError(f"category index {category} outside 1..{num_categories}")
    if not 0.0 <= score <= 1.0:
        raise ValueError(f"score out of [0, 1]: {score}")
    y = np.zeros(num_categories + 1)
    y[0] = 1.0 - score
    y[category] = score
    return y


def hard_target(category: int, num_categories: int) -> np.ndarray:
    return soft_target(category, 1.0, num_categories)


def save_table(table: ThresholdTable, path, names: Optional[Mapping[CategoryId, str]] = None) -> None:
    """Write a flat ``name<TAB>threshold`` file; options go in ``#`` header lines."""
    names = names or {}
    lines = [
        f"# default_threshold\t{table.default_threshold!r}",
        f"# inclusive\t{str(table.inclusive).lower()}",
    ]
    for c in sorted(table.thresholds):
        lines.append(f"{names.get(c, c)}\t{table.thresholds[c]!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_table(path, names: Optional[Mapping[CategoryId, str]] = None) -> ThresholdTable:
    """Inverse of :func:`save_table`. ``names`` maps category ids to the names used in the file."""
    by_name = {str(v): k for k, v in (names or {}).items()}
    thresholds = {}
    default, inclusive = DEFAULT_CONFIDENCE, False
    for raw in Path(path).read_text().splitlines():
        if not raw.strip():
            continue
        if raw.startswith("#"):
            key, _, value = raw[1:].strip().partition("\t")
            if key == "default_threshold":
                default = float(value)
            elif key == "inclusive":
                inclusive = value.strip() == "true"
            continue
        key, _, value = raw.partition("\t")
        if key in by_name:
            cat = by_name[key]
        else:
            try:
                cat = int(key)
            except ValueError:
                raise ValueError(f"{path}: unknown category name {key!r}") from None
        thresholds[cat] = float(value)
    return ThresholdTable(thresholds, default, inclusive)
