"""
Annotation sets and their IoU-thresholded algebra
=================================================

An annotation set maps image ids to lists of :class:`Annotation`. The four
operations here are pure: inputs are never mutated and images are processed
independently.

``subtract``
    drop candidates overlapping any reference box by more than ``t``
``preserve``
    keep candidates overlapping some reference box by more than ``t``
``expand``
    ``initial | subtract(new, gt | initial, t_e)``; raises recall
``shrink``
    ``preserve(current, subtract(new, gt, t_s), t_s)``; raises precision
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Dict, Hashable, Iterable, Iterator, List, Mapping, Tuple

import numpy as np

from .geometry import Box, boxes_to_array, iou_matrix

ImageId = Hashable
CategoryId = int

DEFAULT_T_E = 0.7
DEFAULT_T_S = 0.5


class Source(str, enum.Enum):
    """Provenance tag of an annotation."""

    GROUND_TRUTH = "ground_truth"
    INITIAL = "initial"
    EXPAND = "expand"
    PRESERVED = "preserved"


@dataclass(frozen=True)
class Annotation:
    box: Box
    category: CategoryId
    score: float = 1.0
    source: Source = Source.GROUND_TRUTH

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score out of [0, 1]: {self.score}")
        if not self.box.area > 0.0:
            raise ValueError(f"annotation box must have positive area: {self.box}")

    @property
    def key(self) -> Tuple[Box, CategoryId, float]:
        """Identity used for duplicate removal (provenance ignored)."""
        return (self.box, self.category, self.score)


AnnotationSet = Dict[ImageId, List[Annotation]]


def count(annset: Mapping[ImageId, List[Annotation]]) -> int:
    return sum(len(v) for v in annset.values())


def iter_annotations(annset: Mapping[ImageId, List[Annotation]]) -> Iterator[Tuple[ImageId, Annotation]]:
    for image_id, anns in annset.items():
        for ann in anns:
            yield image_id, ann


def normalize(annset: Mapping[ImageId, List[Annotation]]) -> AnnotationSet:
    """Copy of ``annset`` without images that carry no annotations."""
    return {k: list(v) for k, v in annset.items() if v}


def as_keyset(annset: Mapping[ImageId, List[Annotation]]) -> Dict[ImageId, frozenset]:
    """Per-image frozensets of annotations, for order-insensitive comparison."""
    return {k: frozenset(v) for k, v in annset.items() if v}


def _dedup(anns: Iterable[Annotation]) -> List[Annotation]:
    seen = set()
    out = []
    for ann in anns:
        if ann.key in seen:
            continue
        seen.add(ann.key)
        out.append(ann)
    return out


def union(*sets: Mapping[ImageId, List[Annotation]]) -> AnnotationSet:
    """Per-image union; exact duplicates (box, category, score) keep the first occurrence."""
    out: AnnotationSet = {}
    for s in sets:
        for image_id, anns in s.items():
            out.setdefault(image_id, []).extend(anns)
    return {k: _dedup(v) for k, v in out.items() if v}


def retag(annset: Mapping[ImageId, List[Annotation]], source: Source) -> AnnotationSet:
    return {k: [replace(a, source=source) for a in v] for k, v in annset.items() if v}


def restrict_categories(annset: Mapping[ImageId, List[Annotation]], categories: Iterable[CategoryId]) -> AnnotationSet:
    cats = set(categories)
    return normalize({k: [a for a in v if a.category in cats] for k, v in annset.items()})


def _overlap_hits(candidates: List[Annotation], reference: List[Annotation], t: float, class_aware: bool) -> np.ndarray:
    """Boolean (N, M) matrix: candidate i overlaps reference j by more than t."""
    overlaps = iou_matrix(
        boxes_to_array([a.box for a in candidates]),
        boxes_to_array([a.box for a in reference]),
    )
    hits = overlaps > t
    if class_aware:
        c = np.array([a.category for a in candidates])
        r = np.array([a.category for a in reference])
        hits &= c[:, None] == r[None, :]
    return hits


def _check_threshold(t: float) -> None:
    if not 0.0 < t <= 1.0:
        raise ValueError(f"IoU threshold must lie in (0, 1], got {t}")


def subtract(
    candidates: Mapping[ImageId, List[Annotation]],
    reference: Mapping[ImageId, List[Annotation]],
    t: float,
    class_aware: bool = False,
) -> AnnotationSet:
    """Keep each candidate whose IoU with every reference annotation is <= t.

    Images missing from ``reference`` pass all their candidates through.
    """
    _check_threshold(t)
    out: AnnotationSet = {}
    for image_id, cands in candidates.items():
        if not cands:
            continue
        refs = reference.get(image_id) or []
        if not refs:
            out[image_id] = list(cands)
            continue
        blocked = _overlap_hits(cands, refs, t, class_aware).any(axis=1)
        kept = [a for a, b in zip(cands, blocked) if not b]
        if kept:
            out[image_id] = kept
    return out


def preserve(
    candidates: Mapping[ImageId, List[Annotation]],
    reference: Mapping[ImageId, List[Annotation]],
    t: float,
    class_aware: bool = False,
) -> AnnotationSet:
    """Keep each candidate with IoU > t against at least one reference annotation.

    Kept annotations are returned unchanged (score and provenance included).
    """
    _check_threshold(t)
    out: AnnotationSet = {}
    for image_id, cands in candidates.items():
        refs = reference.get(image_id) or []
        if not cands or not refs:
            continue
        confirmed = _overlap_hits(cands, refs, t, class_aware).any(axis=1)
        kept = [a for a, c in zip(cands, confirmed) if c]
        if kept:
            out[image_id] = kept
    return out


def expand(
    initial: Mapping[ImageId, List[Annotation]],
    new_preds: Mapping[ImageId, List[Annotation]],
    existing_gt: Mapping[ImageId, List[Annotation]],
    t_e: float = DEFAULT_T_E,
    class_aware: bool = False,
) -> AnnotationSet:
    """Add new predictions that do not overlap ground truth or ``initial`` beyond ``t_e``.

    Added annotations keep the new detector's score and are tagged
    ``Source.EXPAND``. The result is always a superset of ``initial``.
    """
    novel = subtract(new_preds, union(existing_gt, initial), t_e, class_aware)
    return union(initial, retag(novel, Source.EXPAND))


def shrink(
    current: Mapping[ImageId, List[Annotation]],
    new_preds: Mapping[ImageId, List[Annotation]],
    existing_gt: Mapping[ImageId, List[Annotation]],
    t_s: float = DEFAULT_T_S,
    class_aware: bool = False,
) -> AnnotationSet:
    """Keep only annotations of ``current`` confirmed by a new prediction.

    Predictions overlapping existing ground truth by more than ``t_s`` are
    discarded first, so they cannot confirm anything.
    """
    confirming = subtract(new_preds, existing_gt, t_s, class_aware)
    return preserve(current, confirming, t_s, class_aware)
