"""
Box geometry
============

Axis-aligned boxes in corner format ``(x1, y1, x2, y2)``, pairwise IoU and
greedy non-maximum suppression.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:
    from .annoset import Annotation


@dataclass(frozen=True, order=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 <= self.x2 and self.y1 <= self.y2):
            raise ValueError(f"invalid box corners: {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "Box":
        return cls(x, y, x + w, y + h)

    def to_xywh(self) -> list[float]:
        return [self.x1, self.y1, self.x2 - self.x1, self.y2 - self.y1]

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes.

    Returns 0.0 when the union is empty, so two coincident zero-area boxes
    have IoU 0.
    """
    iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64)


def iou_matrix(boxes1: np.ndarray, boxes2: np.ndarray) -> np.ndarray:
    """
    Pairwise IoU between two arrays of corner-format boxes.

    Args:
        boxes1: (N, 4) array
        boxes2: (M, 4) array

    Returns:
        (N, M) IoU matrix, bit-identical to :func:`iou` elementwise
    """
    boxes1 = np.asarray(boxes1, dtype=np.float64).reshape(-1, 4)
    boxes2 = np.asarray(boxes2, dtype=np.float64).reshape(-1, 4)
    if len(boxes1) == 0 or len(boxes2) == 0:
        return np.zeros((len(boxes1), len(boxes2)))

    a = boxes1[:, None, :]
    b = boxes2[None, :, :]
    iw = np.maximum(0.0, np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]))
    ih = np.maximum(0.0, np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]))
    inter = iw * ih
    area1 = (boxes1[:, 2] - boxes1[:, 0]) * (boxes1[:, 3] - boxes1[:, 1])
    area2 = (boxes2[:, 2] - boxes2[:, 0]) * (boxes2[:, 3] - boxes2[:, 1])
    union = area1[:, None] + area2[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return out


def nms(dets: Sequence[Annotation], iou_threshold: float = 0.6, per_class: bool = True) -> list[Annotation]:
    """Greedy non-maximum suppression.

    Detections are visited in descending score order (ties keep input
    order). A kept detection suppresses every remaining one whose IoU with
    it exceeds ``iou_threshold``; with ``per_class`` only detections of the
    same category are suppressed.

    Returns:
        kept detections in descending score order
    """
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    boxes = boxes_to_array([dets[i].box for i in order])
    cats = np.array([dets[i].category for i in order])
    overlaps = iou_matrix(boxes, boxes)

    alive = np.ones(len(order), dtype=bool)
    keep = []
    for k in range(len(order)):
        if not alive[k]:
            continue
        keep.append(dets[order[k]])
        hit = overlaps[k] > iou_threshold
        if per_class:
            hit &= cats == cats[k]
        hit[: k + 1] = False
        alive &= ~hit
    return keep
