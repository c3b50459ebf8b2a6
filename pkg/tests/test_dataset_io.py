from __future__ import annotations

import json
import random

import pytest

from dynsup.annoset import Annotation, Source
from dynsup.dataset_io import (
    CategoryConflictError,
    DanglingIdError,
    Dataset,
    ImageInfo,
    InvalidBoxError,
    MalformedFileError,
    align_categories,
    build_category_mapping,
    carve_subset,
    equivalent,
    load_dataset,
    load_detections,
    merge_datasets,
    save_dataset,
    save_detections,
)
from dynsup.geometry import Box
from dynsup.simulator import synthetic_dataset
from oracles import random_dataset


def minimal(tmp_path, **override):
    data = {
        "images": [{"id": 1, "file_name": "a.jpg", "width": 100, "height": 80}],
        "annotations": [{"id": 1, "image_id": 1, "category_id": 3, "bbox": [10, 10, 20, 30]}],
        "categories": [{"id": 3, "name": "person"}],
    }
    data.update(override)
    p = tmp_path / "mini.json"
    p.write_text(json.dumps(data))
    return p


def test_minimal_file(tmp_path):
    d = load_dataset(minimal(tmp_path))
    assert len(d.images) == 1 and d.num_annotations() == 1 and d.categories == {3: "person"}
    assert d.annotations[1][0].box == Box(10, 10, 30, 40)
    assert d.label == "mini"


@pytest.mark.parametrize(
    "override, error",
    [
        ({"annotations": [{"image_id": 9, "category_id": 3, "bbox": [0, 0, 1, 1]}]}, DanglingIdError),
        ({"annotations": [{"image_id": 1, "category_id": 4, "bbox": [0, 0, 1, 1]}]}, DanglingIdError),
        ({"annotations": [{"image_id": 1, "category_id": 3, "bbox": [0, 0, 0, 1]}]}, InvalidBoxError),
        ({"annotations": [{"image_id": 1, "category_id": 3, "bbox": [0, 0, 1]}]}, MalformedFileError),
        ({"annotations": [{"image_id": 1, "bbox": [0, 0, 1, 1]}]}, MalformedFileError),
        ({"images": None}, MalformedFileError),
    ],
)
def test_validation_errors(tmp_path, override, error):
    with pytest.raises(error):
        load_dataset(minimal(tmp_path, **override))


def test_not_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{")
    with pytest.raises(MalformedFileError):
        load_dataset(p)


def test_dataset_roundtrip_randomized(tmp_path):
    rng = random.Random(11)
    for n in range(60):
        d = random_dataset(rng, label=f"r{n}")
        save_dataset(d, tmp_path / "d.json")
        back = load_dataset(tmp_path / "d.json")
        assert equivalent(d, back)
        # a second trip is byte-stable
        save_dataset(back, tmp_path / "e.json")
        assert equivalent(back, load_dataset(tmp_path / "e.json"), tol=0.0)


def test_detections_roundtrip(tmp_path):
    p = tmp_path / "r.json"
    p.write_text("[]")
    assert load_detections(p) == {}
    p.write_text(json.dumps([{"image_id": 4, "category_id": 1, "bbox": [0, 0, 2, 2], "score": 0.5}]))
    dets = load_detections(p)
    assert dets[4][0].score == 0.5 and dets[4][0].source is Source.INITIAL
    rng = random.Random(12)
    for _ in range(20):
        d = random_dataset(rng)
        save_detections(d.annotations, p)
        back = load_detections(p)
        assert equivalent(d, d.with_annotations(back))


def test_detections_need_score(tmp_path):
    p = tmp_path / "r.json"
    p.write_text(json.dumps([{"image_id": 4, "category_id": 1, "bbox": [0, 0, 2, 2]}]))
    with pytest.raises(MalformedFileError):
        load_detections(p)


def named(names, label, n_images=3, seed=0):
    return synthetic_dataset(n_images, names, seed=seed, label=label)


def test_merge_setting_a_counts():
    a = named([f"voc{i}" for i in range(10)], "voc")
    b = named([f"sun{i}" for i in range(10)], "sun")
    merged = merge_datasets([(a, {}), (b, {})])
    assert len(merged.categories) == 20
    assert len(merged.images) == 6 and "voc/1" in merged.images


def test_merge_setting_c_counts():
    shared = ["person", "car", "chair", "dog"]
    a = named(shared + [f"a{i}" for i in range(16)], "a")
    b = named(shared[:2] + [f"b{i}" for i in range(16)], "b")
    c = named(shared[2:] + ["c0", "c1"], "c")
    assert (len(a.categories), len(b.categories), len(c.categories)) == (20, 18, 4)
    assert len(build_category_mapping([a, b, c]).names) == 38


def test_merge_single_is_identity():
    d = named(["x", "y"], "only")
    assert equivalent(merge_datasets([(d, {})]), d, tol=0.0)


def test_merge_remaps_annotations_by_name():
    a = Dataset({1: ImageInfo(1)}, {1: [Annotation(Box(0, 0, 1, 1), 1)]}, {1: "cat"}, "a")
    b = Dataset({1: ImageInfo(1)}, {1: [Annotation(Box(0, 0, 2, 2), 7)]}, {5: "dog", 7: "cat"}, "b")
    gen = {1: [Annotation(Box(5, 5, 6, 6), 2, 0.4, Source.EXPAND)]}
    m = merge_datasets([(a, gen), (b, {})])
    assert m.categories == {1: "cat", 2: "dog"}
    assert [x.category for x in m.annotations["a/1"]] == [1, 2]
    assert [x.category for x in m.annotations["b/1"]] == [1]


def test_merge_aliases_and_case_conflict():
    a = Dataset({}, {}, {1: "tvmonitor"}, "a")
    b = Dataset({}, {}, {1: "TV"}, "b")
    assert len(build_category_mapping([a, b], {"TV": "tvmonitor"}).names) == 1
    c = Dataset({}, {}, {1: "Tvmonitor"}, "c")
    with pytest.raises(CategoryConflictError):
        build_category_mapping([a, c])


def test_merge_rejects_dangling_generated():
    a = named(["x"], "a")
    with pytest.raises(DanglingIdError):
        merge_datasets([(a, {999: [Annotation(Box(0, 0, 1, 1), 1, 0.5)]})])


def test_align_categories():
    d = Dataset({1: ImageInfo(1)}, {1: [Annotation(Box(0, 0, 1, 1), 1)]}, {1: "cat"}, "d")
    out = align_categories(d, {4: "dog", 9: "cat"})
    assert out.annotations[1][0].category == 9 and out.categories == {4: "dog", 9: "cat"}
    with pytest.raises(CategoryConflictError):
        align_categories(d, {4: "dog"})


def test_carve():
    d = named(["a", "b", "c"], "d", n_images=30, seed=4)
    assert equivalent(carve_subset(d, ["a", "b", "c"]), d, tol=0.0)
    with pytest.raises(ValueError):
        carve_subset(d, [])
    with pytest.raises(KeyError):
        carve_subset(d, ["zebra"])
    one = carve_subset(d, ["a"], image_budget=5, seed=2)
    assert len(one.images) == 5 and set(one.categories.values()) == {"a"}
    assert all(x.category == 1 for v in one.annotations.values() for x in v)
    assert equivalent(one, carve_subset(d, ["a"], image_budget=5, seed=2), tol=0.0)
