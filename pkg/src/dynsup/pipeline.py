"""
Dynamic supervisor pipeline
===========================

Three stages turn partially labeled datasets into one fully labeled dataset:

1. initial labeling: detectors trained elsewhere label the categories each
   dataset is missing (confidence filter, then per-class NMS);
2. and 3. expand with a hard-label model and shrink with a soft-label model,
   in either order.

In the *cross-annotated* mechanism every dataset has its own stage 2/3
detectors (trained on the other, augmented datasets) and datasets are only
merged at the end. In the *self-annotated* mechanism the datasets are merged
right after initial labeling and a single detector per stage predicts on the
merged image set.

Training happens outside this package. Detectors are reached through the
:class:`DetectorOracle` protocol: anything with a ``categories`` set and a
``predict(image_ids)`` method. File-backed and truth-backed oracles live
here; a simulator-backed one in :mod:`dynsup.simulator`.
"""

from __future__ import annotations

import enum
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Protocol, Sequence, Tuple, runtime_checkable

from . import annoset as aset
from .annoset import Annotation, AnnotationSet, CategoryId, ImageId, Source
from .dataset_io import (
    CategoryMapping,
    Dataset,
    dataset_to_coco,
    detections_to_records,
    load_detections,
    merge_datasets,
    namespaced,
    unify,
)
from .geometry import nms
from .metrics import DEFAULT_MATCH_IOU, PRDelta, delta_pr
from .thresholds import DEFAULT_CONFIDENCE, ThresholdTable, filter_confidence, hard_target, soft_target

log = logging.getLogger(__name__)

MERGED = "merged"
NMS_IOU = 0.6


class PipelineError(ValueError):
    pass


class MissingBindingError(PipelineError):
    pass


class OracleRangeError(PipelineError):
    pass


class Mechanism(str, enum.Enum):
    SELF_ANNOTATED = "self_annotated"
    CROSS_ANNOTATED = "cross_annotated"


class OpSequence(str, enum.Enum):
    EXPAND_THEN_SHRINK = "expand_then_shrink"
    SHRINK_THEN_EXPAND = "shrink_then_expand"

    @property
    def operations(self) -> Tuple[str, str]:
        return ("expand", "shrink") if self is OpSequence.EXPAND_THEN_SHRINK else ("shrink", "expand")


@dataclass
class PipelineConfig:
    mechanism: Mechanism = Mechanism.CROSS_ANNOTATED
    sequence: OpSequence = OpSequence.EXPAND_THEN_SHRINK
    t_e: float = aset.DEFAULT_T_E
    t_s: float = aset.DEFAULT_T_S
    t_c: float = DEFAULT_CONFIDENCE
    threshold_mode: str = "fixed"  # or "adaptive"
    threshold_table: Optional[ThresholdTable] = None
    class_aware: bool = False
    nms_iou: float = NMS_IOU
    match_iou: float = DEFAULT_MATCH_IOU

    def __post_init__(self):
        self.mechanism = Mechanism(self.mechanism)
        self.sequence = OpSequence(self.sequence)
        for name in ("t_e", "t_s", "nms_iou", "match_iou"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise PipelineError(f"{name} must lie in (0, 1], got {v}")
        if not 0.0 <= self.t_c <= 1.0:
            raise PipelineError(f"t_c must lie in [0, 1], got {self.t_c}")
        if self.threshold_mode not in ("fixed", "adaptive"):
            raise PipelineError(f"unknown threshold_mode {self.threshold_mode!r}")
        if self.threshold_mode == "adaptive" and self.threshold_table is None:
            raise PipelineError("adaptive threshold mode needs a threshold_table")

    @property
    def table(self) -> ThresholdTable:
        if self.threshold_mode == "adaptive":
            return self.threshold_table
        return ThresholdTable.constant(self.t_c)

    def to_dict(self) -> dict:
        return {
            "mechanism": self.mechanism.value,
            "sequence": self.sequence.value,
            "t_e": self.t_e,
            "t_s": self.t_s,
            "t_c": self.t_c,
            "threshold_mode": self.threshold_mode,
            "threshold_table": None
            if self.threshold_table is None
            else {
                "thresholds": {str(k): v for k, v in sorted(self.threshold_table.thresholds.items())},
                "default_threshold": self.threshold_table.default_threshold,
                "inclusive": self.threshold_table.inclusive,
            },
            "class_aware": self.class_aware,
            "nms_iou": self.nms_iou,
            "match_iou": self.match_iou,
        }


# --------------------------------------------------------------------------
# oracles
# --------------------------------------------------------------------------


@runtime_checkable
class DetectorOracle(Protocol):
    categories: FrozenSet[CategoryId]

    def predict(self, image_ids: Iterable[ImageId]) -> AnnotationSet: ...


class FileOracle:
    """Predictions read from a COCO results file (category ids in the merged table)."""

    def __init__(self, path, categories: Iterable[CategoryId], stage: str = ""):
        self.path = Path(path)
        self.categories = frozenset(categories)
        self.stage = stage
        self._cache = None

    def predict(self, image_ids: Iterable[ImageId]) -> AnnotationSet:
        if self._cache is None:
            self._cache = load_detections(self.path)
        return {i: list(self._cache[i]) for i in image_ids if self._cache.get(i)}


class TruthOracle:
    """A perfect detector: returns ground truth with score 1.0."""

    def __init__(self, truth: Dataset, categories: Iterable[CategoryId], stage: str = ""):
        self.truth = truth
        self.categories = frozenset(categories)
        self.stage = stage

    def predict(self, image_ids: Iterable[ImageId]) -> AnnotationSet:
        out = {}
        for i in image_ids:
            anns = [Annotation(a.box, a.category, 1.0, Source.INITIAL) for a in self.truth.annotations.get(i, [])]
            anns = [a for a in anns if a.category in self.categories]
            if anns:
                out[i] = anns
        return out


@dataclass
class Oracles:
    """Detector bindings per stage.

    ``initial`` maps each dataset label to its initial-labeling oracle.
    ``expand`` and ``shrink`` map dataset labels to oracles in the
    cross-annotated mechanism, or hold a single entry under ``"merged"``
    (predicting on merged image ids) in the self-annotated mechanism.
    """

    initial: Mapping[str, DetectorOracle]
    expand: Mapping[str, DetectorOracle] = field(default_factory=dict)
    shrink: Mapping[str, DetectorOracle] = field(default_factory=dict)


# --------------------------------------------------------------------------
# trace
# --------------------------------------------------------------------------


@dataclass
class StageSnapshot:
    index: int
    operation: str  # "initial", "expand" or "shrink"
    generated: Dict[str, AnnotationSet]
    predictions: Dict[str, AnnotationSet]
    delta_vs_initial: Dict[str, PRDelta] = field(default_factory=dict)
    delta_vs_previous: Dict[str, PRDelta] = field(default_factory=dict)


@dataclass
class PipelineTrace:
    config: PipelineConfig
    categories: CategoryMapping
    datasets: List[Dataset]  # ground truth in merged category ids
    missing: Dict[str, List[CategoryId]]
    stages: List[StageSnapshot]
    final: Optional[Dataset] = None

    @property
    def header(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "categories": {str(k): v for k, v in self.categories.names.items()},
            "missing_categories": self.missing,
            "oracle_output_filtering": "confidence filter then per-class NMS at every stage",
            "evaluation": f"class-aware greedy matching at IoU {self.config.match_iou}",
        }

    def final_generated(self) -> Dict[str, AnnotationSet]:
        return self.stages[-1].generated


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------


def prepare_predictions(preds: Mapping[ImageId, List[Annotation]], config: PipelineConfig) -> AnnotationSet:
    """Confidence filter followed by per-class NMS, applied to every oracle output."""
    kept = filter_confidence(preds, config.table)
    return aset.normalize({i: nms(anns, config.nms_iou, per_class=True) for i, anns in kept.items()})


def _query(oracle: DetectorOracle, image_ids: List[ImageId], stage: str, target: str, required=None) -> AnnotationSet:
    if oracle is None:
        raise MissingBindingError(f"no {stage} detector bound for {target!r}")
    declared = frozenset(oracle.categories)
    if required is not None and not set(required) <= declared:
        raise OracleRangeError(
            f"{stage} detector for {target!r} covers {sorted(declared)}, needs {sorted(required)}"
        )
    preds = oracle.predict(image_ids)
    for image_id, anns in preds.items():
        for a in anns:
            if a.category not in declared:
                raise OracleRangeError(f"{stage} detector for {target!r} returned category {a.category} outside its range")
    return preds


def _map(fn, items, workers):
    if workers and workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


@dataclass
class _Setup:
    cm: CategoryMapping
    unified: List[Dataset]
    own: Dict[str, List[CategoryId]]
    missing: Dict[str, List[CategoryId]]
    gt: Dict[str, AnnotationSet]


def _setup(datasets: Sequence[Dataset], aliases=None) -> _Setup:
    cm, unified = unify(datasets, aliases)
    own = {d.label: sorted(set(cm.for_dataset(d.label).values())) for d in datasets}
    missing = {label: sorted(set(cm.names) - set(cats)) for label, cats in own.items()}
    gt = {d.label: d.annotations for d in unified}
    return _Setup(cm, unified, own, missing, gt)


def run_initial_labeling(
    config: PipelineConfig,
    datasets: Sequence[Dataset],
    oracles: Oracles,
    aliases=None,
    workers: int = 1,
) -> Dict[str, AnnotationSet]:
    """Initial pseudo-labels for each dataset's missing categories (merged category ids)."""
    return _initial(config, _setup(datasets, aliases), oracles, workers)[0]


def _initial(config, setup: _Setup, oracles: Oracles, workers):
    def one(d: Dataset):
        need = setup.missing[d.label]
        preds = _query(oracles.initial.get(d.label), list(d.images), "initial", d.label, required=need)
        preds = prepare_predictions(aset.restrict_categories(preds, need), config)
        return preds, aset.retag(preds, Source.INITIAL)

    results = _map(one, setup.unified, workers)
    preds = {d.label: r[0] for d, r in zip(setup.unified, results)}
    generated = {d.label: r[1] for d, r in zip(setup.unified, results)}
    return generated, preds


def sequence_stages(
    initial: Mapping[ImageId, List[Annotation]],
    expand_preds: Mapping[ImageId, List[Annotation]],
    shrink_preds: Mapping[ImageId, List[Annotation]],
    gt: Mapping[ImageId, List[Annotation]],
    config: PipelineConfig,
) -> List[Tuple[str, AnnotationSet]]:
    """Intermediate sets of :func:`apply_sequence`, one per operation."""
    current = aset.normalize(initial)
    out = []
    for op in config.sequence.operations:
        if op == "expand":
            current = aset.expand(current, expand_preds, gt, config.t_e, config.class_aware)
        else:
            current = aset.shrink(current, shrink_preds, gt, config.t_s, config.class_aware)
        out.append((op, current))
    return out


def apply_sequence(
    initial: Mapping[ImageId, List[Annotation]],
    expand_preds: Mapping[ImageId, List[Annotation]],
    shrink_preds: Mapping[ImageId, List[Annotation]],
    gt: Mapping[ImageId, List[Annotation]],
    config: PipelineConfig,
) -> AnnotationSet:
    """Expand then shrink, or shrink then expand, according to ``config.sequence``.

    ``expand_preds`` feed the expand step (with ``t_e``) and ``shrink_preds``
    the shrink step (with ``t_s``), whichever comes first.
    """
    return sequence_stages(initial, expand_preds, shrink_preds, gt, config)[-1][1]


def _merged_index(setup: _Setup) -> Dict[ImageId, Tuple[str, ImageId]]:
    single = len(setup.unified) == 1
    return {
        (i if single else namespaced(d.label, i)): (d.label, i) for d in setup.unified for i in d.images
    }


def _stage_predictions(config, setup: _Setup, bindings, op, workers):
    """Filtered predictions per dataset for one update stage."""
    if config.mechanism is Mechanism.CROSS_ANNOTATED:

        def one(d: Dataset):
            preds = _query(bindings.get(d.label), list(d.images), op, d.label)
            return prepare_predictions(aset.restrict_categories(preds, setup.missing[d.label]), config)

        return dict(zip((d.label for d in setup.unified), _map(one, setup.unified, workers)))

    index = _merged_index(setup)
    preds = _query(bindings.get(MERGED), list(index), op, MERGED)
    split: Dict[str, AnnotationSet] = {d.label: {} for d in setup.unified}
    for merged_id, anns in preds.items():
        if merged_id not in index:
            raise PipelineError(f"{op} detector returned unknown merged image id {merged_id!r}")
        label, image_id = index[merged_id]
        split[label][image_id] = anns
    return {
        label: prepare_predictions(aset.restrict_categories(p, setup.missing[label]), config)
        for label, p in split.items()
    }


def _deltas(current, reference, truth, config) -> Dict[str, PRDelta]:
    out = {}
    pooled_new, pooled_old, pooled_truth = {}, {}, {}
    for label in current:
        if label not in truth:
            continue
        out[label] = delta_pr(current[label], reference[label], truth[label], config.match_iou)
        for src, dst in ((current, pooled_new), (reference, pooled_old), (truth, pooled_truth)):
            for i, anns in src[label].items():
                dst[(label, i)] = anns
    if truth:
        out["all"] = delta_pr(pooled_new, pooled_old, pooled_truth, config.match_iou)
    return out


def run_pipeline(
    config: PipelineConfig,
    datasets: Sequence[Dataset],
    oracles: Oracles,
    truth: Optional[Mapping[str, Dataset]] = None,
    aliases=None,
    workers: int = 1,
) -> PipelineTrace:
    """Run all three stages with the mechanism chosen in ``config``.

    Args:
        truth: optional fully labeled copies of the datasets (by label) used
            to report recall/precision changes per stage; category names
            must match the merged table.
    """
    setup = _setup(datasets, aliases)
    truth_missing = {}
    for label, t in (truth or {}).items():
        by_name = {n: c for c, n in setup.cm.names.items()}
        id_map = {c: by_name[n] for c, n in t.categories.items() if n in by_name}
        anns = {
            i: [Annotation(a.box, id_map[a.category], a.score, a.source) for a in v if a.category in id_map]
            for i, v in t.annotations.items()
        }
        truth_missing[label] = aset.restrict_categories(anns, setup.missing[label])

    generated, preds = _initial(config, setup, oracles, workers)
    stages = [StageSnapshot(1, "initial", generated, preds)]
    for label in generated:
        log.info("initial labeling: %s gets %d pseudo-annotations", label, aset.count(generated[label]))

    for k, op in enumerate(config.sequence.operations, start=2):
        bindings = oracles.expand if op == "expand" else oracles.shrink
        stage_preds = _stage_predictions(config, setup, bindings, op, workers)
        current = {}
        for label, prev in stages[-1].generated.items():
            gt = setup.gt[label]
            if op == "expand":
                current[label] = aset.expand(prev, stage_preds[label], gt, config.t_e, config.class_aware)
            else:
                current[label] = aset.shrink(prev, stage_preds[label], gt, config.t_s, config.class_aware)
        snap = StageSnapshot(k, op, current, stage_preds)
        if truth_missing:
            snap.delta_vs_initial = _deltas(current, stages[0].generated, truth_missing, config)
            snap.delta_vs_previous = _deltas(current, stages[-1].generated, truth_missing, config)
        stages.append(snap)

    final = merge_datasets([(d, stages[-1].generated[d.label]) for d in setup.unified])
    return PipelineTrace(config, setup.cm, setup.unified, setup.missing, stages, final)


def run_self_annotated(config, datasets, oracles, truth=None, aliases=None, workers=1) -> PipelineTrace:
    if config.mechanism is not Mechanism.SELF_ANNOTATED:
        config = _with_mechanism(config, Mechanism.SELF_ANNOTATED)
    return run_pipeline(config, datasets, oracles, truth, aliases, workers)


def run_cross_annotated(config, datasets, oracles, truth=None, aliases=None, workers=1) -> PipelineTrace:
    if config.mechanism is not Mechanism.CROSS_ANNOTATED:
        config = _with_mechanism(config, Mechanism.CROSS_ANNOTATED)
    return run_pipeline(config, datasets, oracles, truth, aliases, workers)


def _with_mechanism(config: PipelineConfig, mechanism: Mechanism) -> PipelineConfig:
    return replace(config, mechanism=mechanism)


# --------------------------------------------------------------------------
# run directory
# --------------------------------------------------------------------------


def _dump(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1) + "\n")


def _delta_dict(d: PRDelta) -> dict:
    return {
        "delta_recall_pct": d.delta_recall_pct,
        "delta_precision_pct": d.delta_precision_pct,
        "old": {"precision": d.old.precision, "recall": d.old.recall, "tp": d.old.tp, "fp": d.old.fp, "fn": d.old.fn},
        "new": {"precision": d.new.precision, "recall": d.new.recall, "tp": d.new.tp, "fp": d.new.fp, "fn": d.new.fn},
    }


def training_targets(d: Dataset) -> dict:
    """Soft/hard classification-target sidecar for a training manifest.

    Vector index 0 is background; index ``k`` is the k-th category id in
    ascending order. Ground truth gets hard targets, pseudo-annotations soft
    ones built from their confidence.
    """
    cats = sorted(d.categories)
    slot = {c: k + 1 for k, c in enumerate(cats)}
    rows = []
    for image_id in d.images:
        for n, a in enumerate(d.annotations.get(image_id, [])):
            if a.source is Source.GROUND_TRUTH:
                kind, y = "hard", hard_target(slot[a.category], len(cats))
            else:
                kind, y = "soft", soft_target(slot[a.category], a.score, len(cats))
            rows.append({"image_id": image_id, "annotation_index": n, "kind": kind, "target": y.tolist()})
    return {"background_index": 0, "index_to_category": {str(slot[c]): c for c in cats}, "targets": rows}


def write_run_directory(trace: PipelineTrace, run_dir) -> List[Path]:
    """Write every stage of ``trace`` under ``run_dir``; returns the files written.

    Layout::

        trace.json
        stage_<n>/<dataset>/annotations.json   augmented training manifest
        stage_<n>/<dataset>/targets.json       soft/hard target sidecar
        stage_<n>/<dataset>/detections.json    filtered oracle predictions
        stage_<n>/<dataset>/generated.json     pseudo-annotations after the stage
        stage_<n>/<dataset>/report.json        counts and recall/precision deltas
        stage_<n>/merged/annotations.json      self-annotated mechanism only
        final/merged.json
    """
    run_dir = Path(run_dir)
    written: List[Path] = []

    def emit(obj, rel):
        p = run_dir / rel
        _dump(obj, p)
        written.append(p)

    emit({"header": trace.header, "stages": [_stage_summary(s) for s in trace.stages]}, "trace.json")
    for snap in trace.stages:
        stage_dir = f"stage_{snap.index}"
        augmented = []
        for d in trace.datasets:
            gen = snap.generated.get(d.label, {})
            aug = Dataset(dict(d.images), aset.union(d.annotations, gen), dict(d.categories), d.label)
            augmented.append((d, gen))
            emit(dataset_to_coco(aug), f"{stage_dir}/{d.label}/annotations.json")
            emit(training_targets(aug), f"{stage_dir}/{d.label}/targets.json")
            emit(detections_to_records(snap.predictions.get(d.label, {})), f"{stage_dir}/{d.label}/detections.json")
            emit(detections_to_records(gen), f"{stage_dir}/{d.label}/generated.json")
            report = {"operation": snap.operation, "num_generated": aset.count(gen)}
            if d.label in snap.delta_vs_initial:
                report["delta_vs_initial"] = _delta_dict(snap.delta_vs_initial[d.label])
                report["delta_vs_previous"] = _delta_dict(snap.delta_vs_previous[d.label])
            emit(report, f"{stage_dir}/{d.label}/report.json")
        if trace.config.mechanism is Mechanism.SELF_ANNOTATED and snap.index < len(trace.stages):
            emit(dataset_to_coco(merge_datasets(augmented)), f"{stage_dir}/{MERGED}/annotations.json")
    emit(dataset_to_coco(trace.final), "final/merged.json")
    return written


def _stage_summary(s: StageSnapshot) -> dict:
    out = {
        "stage": s.index,
        "operation": s.operation,
        "num_generated": {k: aset.count(v) for k, v in s.generated.items()},
        "num_predictions": {k: aset.count(v) for k, v in s.predictions.items()},
    }
    if s.delta_vs_initial:
        out["delta_vs_initial"] = {k: _delta_dict(v) for k, v in s.delta_vs_initial.items()}
    return out
