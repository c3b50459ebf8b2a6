"""Pseudo-label fusion for cross-dataset object detection.

Partially labeled detection datasets are completed with pseudo-annotations
that are generated once and then refined by IoU-thresholded expand and
shrink operations driven by further detectors.
"""

from .annoset import Annotation, AnnotationSet, Source, expand, preserve, shrink, subtract, union
from .dataset_io import Dataset, load_dataset, load_detections, merge_datasets, save_dataset, save_detections
from .geometry import Box, iou, nms
from .metrics import average_precision, delta_pr, match_tp_fp, precision_recall
from .pipeline import Mechanism, OpSequence, Oracles, PipelineConfig, apply_sequence, run_pipeline
from .simulator import DetectorProfile, hard_profile, simulate_detector, soft_profile
from .thresholds import ThresholdTable, adaptive_thresholds, filter_confidence, hard_target, soft_target

__version__ = "0.1.0"

__all__ = [
    "Annotation",
    "AnnotationSet",
    "Box",
    "Dataset",
    "DetectorProfile",
    "Mechanism",
    "OpSequence",
    "Oracles",
    "PipelineConfig",
    "Source",
    "ThresholdTable",
    "adaptive_thresholds",
    "apply_sequence",
    "average_precision",
    "delta_pr",
    "expand",
    "filter_confidence",
    "hard_profile",
    "hard_target",
    "iou",
    "load_dataset",
    "load_detections",
    "match_tp_fp",
    "merge_datasets",
    "nms",
    "precision_recall",
    "preserve",
    "run_pipeline",
    "save_dataset",
    "save_detections",
    "shrink",
    "simulate_detector",
    "soft_profile",
    "soft_target",
    "subtract",
    "union",
]
