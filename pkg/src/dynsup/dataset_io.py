"""
COCO-format datasets
====================

Loading and saving COCO annotation files and COCO results files, merging
datasets with category unification by name, and carving category subsets.

Boxes are stored in corner format internally and converted from/to COCO's
``[x, y, w, h]`` here. Annotation records may carry two optional extra keys,
``score`` and ``source``, so pseudo-annotations survive a save/load cycle.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .annoset import Annotation, AnnotationSet, CategoryId, ImageId, Source, count, union
from .geometry import Box


class DatasetError(ValueError):
    """Base class of dataset validation errors."""


class MalformedFileError(DatasetError):
    pass


class DanglingIdError(DatasetError):
    pass


class InvalidBoxError(DatasetError):
    pass


class CategoryConflictError(DatasetError):
    pass


@dataclass(frozen=True)
class ImageInfo:
    id: ImageId
    file_name: str = ""
    width: float = 0
    height: float = 0


@dataclass
class Dataset:
    images: Dict[ImageId, ImageInfo]
    annotations: AnnotationSet
    categories: Dict[CategoryId, str]
    label: str = "dataset"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        names = list(self.categories.values())
        if len(set(names)) != len(names):
            raise CategoryConflictError(f"{self.label}: duplicate category names")
        for image_id, anns in self.annotations.items():
            if image_id not in self.images:
                raise DanglingIdError(f"{self.label}: annotations reference unknown image id {image_id!r}")
            for a in anns:
                if a.category not in self.categories:
                    raise DanglingIdError(f"{self.label}: annotation references unknown category id {a.category!r}")

    @property
    def name_to_id(self) -> Dict[str, CategoryId]:
        return {v: k for k, v in self.categories.items()}

    def num_annotations(self) -> int:
        return count(self.annotations)

    def with_annotations(self, annotations: AnnotationSet, label: Optional[str] = None) -> "Dataset":
        return Dataset(dict(self.images), annotations, dict(self.categories), label or self.label)


def equivalent(a: Dataset, b: Dataset, tol: float = 1e-9) -> bool:
    """Semantic equality: same tables and annotations; box corners may differ by ``tol`` (relative)."""
    if a.label != b.label or a.categories != b.categories or a.images != b.images:
        return False
    keys = {k for k, v in a.annotations.items() if v} | {k for k, v in b.annotations.items() if v}
    for k in keys:
        xs, ys = a.annotations.get(k) or [], b.annotations.get(k) or []
        if len(xs) != len(ys):
            return False
        for x, y in zip(xs, ys):
            if (x.category, x.score, x.source) != (y.category, y.score, y.source):
                return False
            if not all(math.isclose(p, q, rel_tol=tol, abs_tol=tol) for p, q in zip(x.box.as_tuple(), y.box.as_tuple())):
                return False
    return True


# --------------------------------------------------------------------------
# COCO files
# --------------------------------------------------------------------------


def _read_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise MalformedFileError(f"{path}: not valid JSON ({e})") from e


def _write_json(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, indent=1)
        f.write("\n")


def _parse_bbox(raw, where) -> Box:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        raise MalformedFileError(f"{where}: bbox must be a list of 4 numbers")
    try:
        x, y, w, h = (float(v) for v in raw)
    except (TypeError, ValueError):
        raise MalformedFileError(f"{where}: bbox must be a list of 4 numbers") from None
    if not (w > 0 and h > 0) or not all(map(math.isfinite, (x, y, w, h))):
        raise InvalidBoxError(f"{where}: non-positive box dimensions {raw}")
    box = Box.from_xywh(x, y, w, h)
    if not box.area > 0:
        raise InvalidBoxError(f"{where}: box collapses to zero area {raw}")
    return box


def _parse_annotation(rec, where, default_source: Source) -> Tuple[ImageId, Annotation]:
    if not isinstance(rec, dict):
        raise MalformedFileError(f"{where}: record must be an object")
    for key in ("image_id", "category_id", "bbox"):
        if key not in rec:
            raise MalformedFileError(f"{where}: missing key {key!r}")
    box = _parse_bbox(rec["bbox"], where)
    score = float(rec.get("score", 1.0))
    if not 0.0 <= score <= 1.0:
        raise MalformedFileError(f"{where}: score out of [0, 1]")
    try:
        source = Source(rec.get("source", default_source.value))
    except ValueError:
        raise MalformedFileError(f"{where}: unknown source {rec['source']!r}") from None
    return rec["image_id"], Annotation(box, int(rec["category_id"]), score, source)


def _annotation_record(image_id, ann: Annotation, **extra) -> dict:
    rec = {"image_id": image_id, "category_id": ann.category, "bbox": ann.box.to_xywh(), "score": ann.score}
    rec["source"] = ann.source.value
    rec.update(extra)
    return rec


def load_dataset(path, label: Optional[str] = None) -> Dataset:
    """Parse and validate a COCO annotation file.

    Raises:
        MalformedFileError: not JSON, or missing/ill-typed keys
        DanglingIdError: an annotation names an unknown image or category
        InvalidBoxError: a box with non-positive width or height
    """
    data = _read_json(path)
    if not isinstance(data, dict):
        raise MalformedFileError(f"{path}: top level must be an object")
    for key in ("images", "annotations", "categories"):
        if not isinstance(data.get(key), list):
            raise MalformedFileError(f"{path}: missing list {key!r}")

    images = {}
    for rec in data["images"]:
        if not isinstance(rec, dict) or "id" not in rec:
            raise MalformedFileError(f"{path}: image record without id")
        images[rec["id"]] = ImageInfo(rec["id"], rec.get("file_name", ""), rec.get("width", 0), rec.get("height", 0))
    categories = {}
    for rec in data["categories"]:
        if not isinstance(rec, dict) or "id" not in rec or "name" not in rec:
            raise MalformedFileError(f"{path}: category record needs id and name")
        categories[int(rec["id"])] = str(rec["name"])

    annotations: AnnotationSet = {}
    for n, rec in enumerate(data["annotations"]):
        where = f"{path}: annotations[{n}]"
        image_id, ann = _parse_annotation(rec, where, Source.GROUND_TRUTH)
        if image_id not in images:
            raise DanglingIdError(f"{where}: unknown image id {image_id!r}")
        if ann.category not in categories:
            raise DanglingIdError(f"{where}: unknown category id {ann.category!r}")
        annotations.setdefault(image_id, []).append(ann)

    if label is None:
        label = data.get("info", {}).get("label") if isinstance(data.get("info"), dict) else None
        label = label or Path(path).stem
    return Dataset(images, annotations, categories, label)


def dataset_to_coco(d: Dataset) -> dict:
    images = [
        {"id": im.id, "file_name": im.file_name, "width": im.width, "height": im.height} for im in d.images.values()
    ]
    annotations = []
    for image_id in d.images:
        for ann in d.annotations.get(image_id, []):
            x, y, w, h = ann.box.to_xywh()
            annotations.append(_annotation_record(image_id, ann, id=len(annotations) + 1, area=w * h, iscrowd=0))
    categories = [{"id": c, "name": n} for c, n in d.categories.items()]
    return {"info": {"label": d.label}, "images": images, "annotations": annotations, "categories": categories}


def save_dataset(d: Dataset, path) -> None:
    _write_json(dataset_to_coco(d), path)


def load_detections(path, default_source: Source = Source.INITIAL) -> AnnotationSet:
    """Parse a COCO results file (a list of ``{image_id, category_id, bbox, score}``)."""
    data = _read_json(path)
    if not isinstance(data, list):
        raise MalformedFileError(f"{path}: results file must be a list")
    out: AnnotationSet = {}
    for n, rec in enumerate(data):
        if isinstance(rec, dict) and "score" not in rec:
            raise MalformedFileError(f"{path}: [{n}]: missing key 'score'")
        image_id, ann = _parse_annotation(rec, f"{path}: [{n}]", default_source)
        out.setdefault(image_id, []).append(ann)
    return out


def detections_to_records(dets: Mapping[ImageId, List[Annotation]]) -> List[dict]:
    return [_annotation_record(image_id, a) for image_id, anns in dets.items() for a in anns]


def save_detections(dets: Mapping[ImageId, List[Annotation]], path) -> None:
    _write_json(detections_to_records(dets), path)


# --------------------------------------------------------------------------
# merging
# --------------------------------------------------------------------------


@dataclass
class CategoryMapping:
    """Maps ``(dataset label, source category id)`` to merged category ids."""

    mapping: Dict[Tuple[str, CategoryId], CategoryId] = field(default_factory=dict)
    names: Dict[CategoryId, str] = field(default_factory=dict)

    def for_dataset(self, label: str) -> Dict[CategoryId, CategoryId]:
        return {src: dst for (lab, src), dst in self.mapping.items() if lab == label}


def build_category_mapping(datasets: Sequence[Dataset], aliases: Optional[Mapping[str, str]] = None) -> CategoryMapping:
    """Unify category tables by exact name.

    The first dataset keeps its ids; names first seen later get fresh ids
    above the current maximum. ``aliases`` rewrites names before matching.
    Names equal up to case (after aliasing) are an error.
    """
    aliases = dict(aliases or {})
    labels = [d.label for d in datasets]
    if len(set(labels)) != len(labels):
        raise CategoryConflictError(f"dataset labels must be unique: {labels}")

    cm = CategoryMapping()
    by_name: Dict[str, CategoryId] = {}
    folded: Dict[str, str] = {}
    for d in datasets:
        for src_id, raw_name in d.categories.items():
            name = aliases.get(raw_name, raw_name)
            key = name.casefold()
            if key in folded and folded[key] != name:
                raise CategoryConflictError(
                    f"category names {folded[key]!r} and {name!r} differ only in case; supply an alias"
                )
            folded[key] = name
            if name not in by_name:
                # the first dataset is processed whole before any other
                new_id = src_id if d is datasets[0] else max(cm.names, default=0) + 1
                by_name[name] = new_id
                cm.names[new_id] = name
            cm.mapping[(d.label, src_id)] = by_name[name]
    return cm


def remap_categories(annset: Mapping[ImageId, List[Annotation]], id_map: Mapping[CategoryId, CategoryId]) -> AnnotationSet:
    out = {}
    for image_id, anns in annset.items():
        try:
            out[image_id] = [Annotation(a.box, id_map[a.category], a.score, a.source) for a in anns]
        except KeyError as e:
            raise DanglingIdError(f"no merged category for source id {e.args[0]!r}") from None
    return out


def unify(
    datasets: Sequence[Dataset], aliases: Optional[Mapping[str, str]] = None
) -> Tuple[CategoryMapping, List[Dataset]]:
    """Category mapping plus copies of ``datasets`` relabeled into merged category ids.

    Each copy keeps its images and ground truth but carries the full merged
    category table.
    """
    cm = build_category_mapping(datasets, aliases)
    out = [
        Dataset(dict(d.images), remap_categories(d.annotations, cm.for_dataset(d.label)), dict(cm.names), d.label)
        for d in datasets
    ]
    return cm, out


def align_categories(d: Dataset, names: Mapping[CategoryId, str], aliases: Optional[Mapping[str, str]] = None) -> Dataset:
    """Re-express ``d`` in the category table ``names`` by matching names."""
    aliases = dict(aliases or {})
    by_name = {n: c for c, n in names.items()}
    missing = [n for n in d.categories.values() if aliases.get(n, n) not in by_name]
    if missing:
        raise CategoryConflictError(f"{d.label}: categories absent from target table: {missing}")
    id_map = {c: by_name[aliases.get(n, n)] for c, n in d.categories.items()}
    return Dataset(dict(d.images), remap_categories(d.annotations, id_map), dict(names), d.label)


def namespaced(label: str, image_id: ImageId) -> str:
    return f"{label}/{image_id}"


def merge_datasets(
    parts: Sequence[Tuple[Dataset, Mapping[ImageId, List[Annotation]]]],
    label: str = "merged",
    aliases: Optional[Mapping[str, str]] = None,
) -> Dataset:
    """Merge datasets and their generated annotations into one dataset.

    Each part is ``(dataset, generated)``. Ground truth uses the dataset's
    own category ids; ``generated`` uses the dataset's image ids but merged
    category ids, since it mostly holds categories the dataset lacks.
    Categories are unified by name (see :func:`build_category_mapping`).
    With two or more parts, image ids become ``"<label>/<id>"``; a single
    part keeps its ids and label.
    """
    if not parts:
        raise ValueError("nothing to merge")
    datasets = [d for d, _ in parts]
    cm = build_category_mapping(datasets, aliases)
    single = len(parts) == 1

    images: Dict[ImageId, ImageInfo] = {}
    annotations: AnnotationSet = {}
    for d, generated in parts:
        for image_id in generated:
            if image_id not in d.images:
                raise DanglingIdError(f"{d.label}: generated annotations for unknown image {image_id!r}")
            for a in generated[image_id]:
                if a.category not in cm.names:
                    raise DanglingIdError(f"{d.label}: generated annotation with unknown merged category {a.category!r}")
        combined = union(remap_categories(d.annotations, cm.for_dataset(d.label)), generated)
        for image_id, info in d.images.items():
            new_id = image_id if single else namespaced(d.label, image_id)
            images[new_id] = ImageInfo(new_id, info.file_name, info.width, info.height)
            if combined.get(image_id):
                annotations[new_id] = combined[image_id]
    return Dataset(images, annotations, dict(cm.names), datasets[0].label if single else label)


def carve_subset(
    d: Dataset,
    category_names: Iterable[str],
    image_budget: Optional[int] = None,
    seed: int = 0,
    label: Optional[str] = None,
) -> Dataset:
    """Keep only the named categories and up to ``image_budget`` images.

    An image is dropped when it had annotations and none of them survive;
    images without any annotation are kept as negatives. Images are sampled
    without replacement under ``seed`` and keep their original order.
    """
    names = list(category_names)
    if not names:
        raise ValueError("category list is empty")
    lookup = d.name_to_id
    unknown = [n for n in names if n not in lookup]
    if unknown:
        raise KeyError(f"unknown categories: {unknown}")
    keep = {lookup[n] for n in names}

    kept = {}
    for image_id in d.images:
        before = d.annotations.get(image_id) or []
        anns = [a for a in before if a.category in keep]
        if anns or not before:
            kept[image_id] = anns
    image_ids = list(kept)
    if image_budget is not None and image_budget < len(image_ids):
        rng = np.random.default_rng(seed)
        picked = np.sort(rng.choice(len(image_ids), size=image_budget, replace=False))
        image_ids = [image_ids[i] for i in picked]

    return Dataset(
        {i: d.images[i] for i in image_ids},
        {i: kept[i] for i in image_ids if kept[i]},
        {c: n for c, n in d.categories.items() if c in keep},
        label or d.label,
    )
