"""
Synthetic detectors
===================

Seeded noise models standing in for trained detectors. A
:class:`DetectorProfile` controls how often ground-truth objects are missed,
how many false boxes appear per image, how boxes are perturbed and how
confidence scores are distributed for true and false detections.

Two presets mimic the score signatures of hard-label and soft-label trained
models: the hard preset scores its true positives higher and emits roughly
four times as many confident false positives.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .annoset import Annotation, AnnotationSet, CategoryId, ImageId, Source
from .dataset_io import Dataset, ImageInfo
from .geometry import Box

DEFAULT_JITTER = 0.05
FALLBACK_IMAGE_SIZE = 100.0


@dataclass(frozen=True)
class BetaScores:
    """Beta(a, b) confidence-score distribution on [0, 1]."""

    a: float
    b: float

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise ValueError("Beta parameters must be positive")

    @property
    def mode(self) -> Optional[float]:
        if self.a > 1 and self.b > 1:
            return (self.a - 1) / (self.a + self.b - 2)
        return None

    @property
    def mean(self) -> float:
        return self.a / (self.a + self.b)

    def sample(self, rng: np.random.Generator, size=None):
        return np.clip(rng.beta(self.a, self.b, size), 0.0, 1.0)


@dataclass(frozen=True)
class DetectorProfile:
    miss_rate: float = 0.2
    fp_per_image: float = 1.0
    tp_scores: BetaScores = field(default_factory=lambda: BetaScores(2.0, 2.0))
    fp_scores: BetaScores = field(default_factory=lambda: BetaScores(1.5, 4.0))
    jitter: float = DEFAULT_JITTER
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.miss_rate <= 1.0:
            raise ValueError("miss_rate must lie in [0, 1]")
        if self.fp_per_image < 0 or self.jitter < 0:
            raise ValueError("fp_per_image and jitter must be non-negative")

    def with_seed(self, seed: int) -> "DetectorProfile":
        return replace(self, seed=int(seed))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorProfile":
        d = dict(d)
        for key in ("tp_scores", "fp_scores"):
            if key in d and not isinstance(d[key], BetaScores):
                v = d[key]
                d[key] = BetaScores(*v) if isinstance(v, (list, tuple)) else BetaScores(**v)
        return cls(**d)


# Calibration constants, not measured values. TP shapes put the modes at
# 0.7 (hard) and 0.15 (soft); with these FP rates the hard preset emits about
# four times as many false positives above 0.2.
def hard_profile(seed: int = 0) -> DetectorProfile:
    return DetectorProfile(
        miss_rate=0.15,
        fp_per_image=2.0,
        tp_scores=BetaScores(1.3, 0.7 + 0.3 / 0.7),  # mode (a-1)/(a+b-2) = 0.7
        fp_scores=BetaScores(1.5, 2.2),
        jitter=DEFAULT_JITTER,
        seed=seed,
    )


def soft_profile(seed: int = 0) -> DetectorProfile:
    return DetectorProfile(
        miss_rate=0.2,
        fp_per_image=1.3,
        tp_scores=BetaScores(4.0, 18.0),
        fp_scores=BetaScores(1.5, 8.0),
        jitter=DEFAULT_JITTER,
        seed=seed,
    )


def initial_profile(seed: int = 0) -> DetectorProfile:
    """A weaker detector trained on one dataset, used for initial labeling."""
    return DetectorProfile(
        miss_rate=0.35,
        fp_per_image=1.5,
        tp_scores=BetaScores(2.0, 2.0),
        fp_scores=BetaScores(1.5, 4.0),
        jitter=DEFAULT_JITTER,
        seed=seed,
    )


PRESETS = {"hard": hard_profile, "soft": soft_profile, "initial": initial_profile}


def image_rng(seed: int, image_id: ImageId) -> np.random.Generator:
    """Independent stream per (seed, image id), stable across processes."""
    key = zlib.crc32(repr(image_id).encode())
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, key]))


def _image_size(info: ImageInfo, anns: Sequence[Annotation]):
    w = float(info.width or 0) or max([a.box.x2 for a in anns], default=FALLBACK_IMAGE_SIZE)
    h = float(info.height or 0) or max([a.box.y2 for a in anns], default=FALLBACK_IMAGE_SIZE)
    return w, h


def _jitter_box(box: Box, scale: float, width: float, height: float, rng: np.random.Generator) -> Box:
    noise = rng.normal(0.0, 1.0, 4) * scale
    x1 = min(max(box.x1 + noise[0] * box.width, 0.0), width)
    y1 = min(max(box.y1 + noise[1] * box.height, 0.0), height)
    x2 = min(max(box.x2 + noise[2] * box.width, 0.0), width)
    y2 = min(max(box.y2 + noise[3] * box.height, 0.0), height)
    if x2 - x1 <= 0 or y2 - y1 <= 0:
        return box
    return Box(float(x1), float(y1), float(x2), float(y2))


def _false_box(width: float, height: float, rng: np.random.Generator) -> Box:
    # log-uniform side lengths between 5% and 50% of the short image side
    short = min(width, height)
    w, h = np.exp(rng.uniform(np.log(0.05 * short), np.log(0.5 * short), 2))
    x1 = rng.uniform(0.0, width - w)
    y1 = rng.uniform(0.0, height - h)
    return Box(float(x1), float(y1), float(x1 + w), float(y1 + h))


def simulate_detector(
    gt: Dataset,
    categories: Iterable[CategoryId],
    profile: DetectorProfile,
    image_ids: Optional[Iterable[ImageId]] = None,
) -> AnnotationSet:
    """Sample detections from ground truth under a noise profile.

    Each ground-truth box of a listed category is missed with probability
    ``miss_rate``, otherwise emitted with jittered corners and a TP score.
    Every image also receives Poisson(``fp_per_image``) random boxes with FP
    scores and uniformly drawn categories. Output depends only on the
    profile seed and the image ids.
    """
    cats = sorted(set(categories))
    unknown = [c for c in cats if c not in gt.categories]
    if unknown:
        raise ValueError(f"categories not in ground truth table: {unknown}")
    wanted = set(cats)

    out: AnnotationSet = {}
    for image_id in gt.images if image_ids is None else image_ids:
        info = gt.images[image_id]
        anns = gt.annotations.get(image_id, [])
        width, height = _image_size(info, anns)
        rng = image_rng(profile.seed, image_id)
        dets = []
        for a in anns:
            # draw everything for every box so streams stay aligned across profiles
            missed = rng.random() < profile.miss_rate
            box = _jitter_box(a.box, profile.jitter, width, height, rng) if profile.jitter > 0 else a.box
            score = float(profile.tp_scores.sample(rng))
            if a.category in wanted and not missed:
                dets.append(Annotation(box, a.category, score, Source.INITIAL))
        if cats:
            for _ in range(rng.poisson(profile.fp_per_image)):
                box = _false_box(width, height, rng)
                cat = cats[int(rng.integers(len(cats)))]
                dets.append(Annotation(box, cat, float(profile.fp_scores.sample(rng)), Source.INITIAL))
        if dets:
            out[image_id] = dets
    return out


class SimulatedOracle:
    """Detector oracle backed by :func:`simulate_detector`."""

    def __init__(self, truth: Dataset, categories: Iterable[CategoryId], profile: DetectorProfile, stage: str = ""):
        self.truth = truth
        self.categories = frozenset(categories)
        self.profile = profile
        self.stage = stage

    def predict(self, image_ids: Iterable[ImageId]) -> AnnotationSet:
        return simulate_detector(self.truth, self.categories, self.profile, image_ids)


def synthetic_dataset(
    n_images: int,
    category_names: Sequence[str],
    seed: int = 0,
    boxes_per_image: tuple = (1, 6),
    image_size: tuple = (640, 480),
    grid: tuple = (4, 3),
    label: str = "synthetic",
    first_image_id: int = 1,
) -> Dataset:
    """Random dataset whose boxes never overlap within an image.

    Boxes are placed in distinct cells of a ``grid`` laid over the image, so
    every pair of boxes in an image has IoU 0.
    """
    rng = np.random.default_rng(seed)
    width, height = image_size
    cols, rows = grid
    cw, ch = width / cols, height / rows
    categories = {i + 1: n for i, n in enumerate(category_names)}
    lo, hi = boxes_per_image
    hi = min(hi, cols * rows)

    images, annotations = {}, {}
    for n in range(n_images):
        image_id = first_image_id + n
        images[image_id] = ImageInfo(image_id, f"{image_id:06d}.jpg", width, height)
        k = int(rng.integers(lo, hi + 1))
        cells = rng.choice(cols * rows, size=k, replace=False)
        anns = []
        for cell in cells:
            cx, cy = (cell % cols) * cw, (cell // cols) * ch
            fx1, fy1 = rng.uniform(0.0, 0.3, 2)
            fx2, fy2 = rng.uniform(0.7, 1.0, 2)
            box = Box(float(cx + fx1 * cw), float(cy + fy1 * ch), float(cx + fx2 * cw), float(cy + fy2 * ch))
            anns.append(Annotation(box, int(rng.integers(1, len(categories) + 1))))
        annotations[image_id] = anns
    return Dataset(images, annotations, categories, label)


def cross_dataset_setting(
    n_images: int,
    groups: Sequence[Sequence[str]],
    labels: Optional[Sequence[str]] = None,
    seed: int = 0,
    **kwargs,
) -> List[tuple]:
    """Split one synthetic dataset into partially labeled datasets.

    Images are dealt round-robin to ``len(groups)`` datasets; dataset ``i``
    keeps ground truth only for the category names in ``groups[i]``.

    Returns:
        list of ``(partial, truth)`` dataset pairs; ``truth`` carries the same
        label and images but every category
    """
    labels = list(labels or [f"part{i}" for i in range(len(groups))])
    names = [n for g in groups for n in g]
    names = list(dict.fromkeys(names))
    full = synthetic_dataset(n_images, names, seed=seed, **kwargs)
    out = []
    for i, (group, label) in enumerate(zip(groups, labels)):
        ids = list(full.images)[i :: len(groups)]
        keep_ids = {c for c, n in full.categories.items() if n in set(group)}
        images = {k: full.images[k] for k in ids}
        truth_anns = {k: list(full.annotations.get(k, [])) for k in ids if full.annotations.get(k)}
        partial_anns = {}
        for k, anns in truth_anns.items():
            kept = [a for a in anns if a.category in keep_ids]
            if kept:
                partial_anns[k] = kept
        partial = Dataset(images, partial_anns, {c: full.categories[c] for c in sorted(keep_ids)}, label)
        truth = Dataset(dict(images), truth_anns, dict(full.categories), label)
        out.append((partial, truth))
    return out
