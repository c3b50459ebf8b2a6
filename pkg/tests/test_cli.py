from __future__ import annotations

import json
import subprocess
import sys

import pytest

from dynsup.annoset import Annotation, Source
from dynsup.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_VALIDATION, main
from dynsup.dataset_io import Dataset, ImageInfo, load_dataset, load_detections, save_dataset, save_detections
from dynsup.geometry import Box
from dynsup.thresholds import load_table
from oracles import tree_bytes, write_setting


@pytest.fixture
def setting(tmp_path):
    return write_setting(tmp_path / "in", n_images=20)


def run(*argv):
    return main([str(a) for a in argv])


def test_pipeline_twice_is_byte_identical(setting, tmp_path):
    assert run("pipeline", "--config", setting, "--out", tmp_path / "a") == EXIT_OK
    assert run("pipeline", "--config", setting, "--out", tmp_path / "b", "--threads", 3) == EXIT_OK
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["command"] == "pipeline" and "timings_s" not in manifest
    for rel in manifest["outputs"]:
        assert (tmp_path / "a" / rel).is_file()
    assert len(manifest["inputs"]) == 4


def test_seed_changes_output(setting, tmp_path):
    run("pipeline", "--config", setting, "--out", tmp_path / "a")
    run("pipeline", "--config", setting, "--out", tmp_path / "b", "--seed", 99)
    assert tree_bytes(tmp_path / "a") != tree_bytes(tmp_path / "b")


def test_flags_override_config(setting, tmp_path):
    run("pipeline", "--config", setting, "--out", tmp_path / "a", "--sequence", "shrink_then_expand", "--timings")
    trace = json.loads((tmp_path / "a" / "trace.json").read_text())
    assert trace["header"]["config"]["sequence"] == "shrink_then_expand"
    assert "timings_s" in json.loads((tmp_path / "a" / "manifest.json").read_text())


def test_self_annotated_pipeline(tmp_path):
    cfg = write_setting(tmp_path / "in", n_images=12, mechanism="self_annotated")
    assert run("pipeline", "--config", cfg, "--out", tmp_path / "o") == EXIT_OK
    assert (tmp_path / "o" / "stage_2" / "merged" / "annotations.json").is_file()


def test_truth_detectors_reach_fixed_point(tmp_path):
    cfg = write_setting(tmp_path / "in", n_images=12)
    data = json.loads(cfg.read_text())
    for stage in ("initial", "expand", "shrink"):
        data["detectors"][stage] = {"voc": {"truth": True}, "sun": {"truth": True}}
    cfg.write_text(json.dumps(data))
    assert run("pipeline", "--config", cfg, "--out", tmp_path / "o") == EXIT_OK
    truth = load_dataset(tmp_path / "in" / "voc_truth.json")
    final = load_detections(tmp_path / "o" / "stage_3" / "voc" / "generated.json")
    want = {(k, a.box) for k, v in truth.annotations.items() for a in v if truth.categories[a.category] in "de"}
    assert {(k, a.box) for k, v in final.items() for a in v} == want


def test_exit_codes(setting, tmp_path):
    assert run("pipeline", "--out", tmp_path / "o") == EXIT_CONFIG
    assert run("eval", "--gt", tmp_path / "nope.json", "--detections", tmp_path / "x", "--out", tmp_path / "o") == EXIT_IO
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert run("eval", "--gt", bad, "--detections", bad, "--out", tmp_path / "o") == EXIT_VALIDATION
    assert run("pipeline", "--config", bad, "--out", tmp_path / "o") == EXIT_CONFIG
    data = json.loads(setting.read_text())
    del data["detectors"]["shrink"]
    setting.write_text(json.dumps(data))
    assert run("pipeline", "--config", setting, "--out", tmp_path / "o") == EXIT_CONFIG
    with pytest.raises(SystemExit) as e:
        run("pipeline", "--mechanism", "telepathy")
    assert e.value.code == 2


def test_eval_on_ground_truth(setting, tmp_path):
    gt = setting.parent / "voc_truth.json"
    dets = tmp_path / "dets.json"
    save_detections(load_dataset(gt).annotations, dets)
    assert run("eval", "--gt", gt, "--detections", dets, "--out", tmp_path / "o") == EXIT_OK
    assert json.loads((tmp_path / "o" / "report.json").read_text())["mAP"] == 1.0
    assert (tmp_path / "o" / "histogram.csv").read_text().startswith("bin_low,bin_high,tp,fp")
    assert run("histogram", "--gt", gt, "--detections", dets, "--out", tmp_path / "h", "--bins", 5) == EXIT_OK
    assert len((tmp_path / "h" / "histogram.csv").read_text().splitlines()) == 6


def test_expand_and_shrink_match_library_example(tmp_path):
    gt = Dataset({1: ImageInfo(1, "a.jpg", 100, 100)}, {1: [Annotation(Box(0, 0, 10, 10), 1)]}, {1: "cat", 2: "dog"}, "d")
    initial = {1: [Annotation(Box(20, 20, 30, 30), 2, 0.6, Source.INITIAL)]}
    preds = {1: [Annotation(Box(0, 0, 10, 9), 2, 0.9), Annotation(Box(50, 50, 60, 60), 2, 0.4)]}
    save_dataset(gt, tmp_path / "gt.json")
    save_detections(initial, tmp_path / "init.json")
    save_detections(preds, tmp_path / "preds.json")
    assert run("expand", "--initial", tmp_path / "init.json", "--predictions", tmp_path / "preds.json",
               "--gt", tmp_path / "gt.json", "--t-e", 0.7, "--out", tmp_path / "e") == EXIT_OK
    out = load_detections(tmp_path / "e" / "expanded.json")
    assert [(a.box, a.source) for a in out[1]] == [(Box(20, 20, 30, 30), Source.INITIAL), (Box(50, 50, 60, 60), Source.EXPAND)]
    assert run("shrink", "--current", tmp_path / "e" / "expanded.json", "--predictions", tmp_path / "init.json",
               "--gt", tmp_path / "gt.json", "--out", tmp_path / "s") == EXIT_OK
    assert [a.box for a in load_detections(tmp_path / "s" / "shrunk.json")[1]] == [Box(20, 20, 30, 30)]


def test_label_threshold_simulate(setting, tmp_path):
    truth = setting.parent / "voc_truth.json"
    assert run("simulate", "--truth", truth, "--profile", "hard", "--seed", 1, "--out", tmp_path / "sim") == EXIT_OK
    dets = tmp_path / "sim" / "detections.json"
    assert run("threshold", "--detections", dets, "--gt", truth, "--out", tmp_path / "thr") == EXIT_OK
    table = load_table(tmp_path / "thr" / "thresholds.tsv", load_dataset(truth).categories)
    assert table.inclusive and set(table.thresholds) <= {1, 2, 3, 4, 5}
    assert run("label", "--detections", dets, "--threshold-table", tmp_path / "thr" / "thresholds.tsv",
               "--gt", truth, "--out", tmp_path / "lab") == EXIT_OK
    assert run("label", "--detections", dets, "--t-c", 0.5, "--out", tmp_path / "lab2") == EXIT_OK
    labeled = load_detections(tmp_path / "lab2" / "generated.json")
    assert all(a.score > 0.5 for v in labeled.values() for a in v)


def test_merge_and_carve(setting, tmp_path):
    voc, sun = setting.parent / "voc.json", setting.parent / "sun.json"
    assert run("merge", "--dataset", voc, "--dataset", sun, "--out", tmp_path / "m") == EXIT_OK
    merged = load_dataset(tmp_path / "m" / "merged.json")
    assert len(merged.categories) == 5
    assert run("carve", "--dataset", tmp_path / "m" / "merged.json", "--categories", "a", "d",
               "--budget", 3, "--out", tmp_path / "c") == EXIT_OK
    carved = load_dataset(tmp_path / "c" / "subset.json")
    assert len(carved.images) == 3 and set(carved.categories.values()) == {"a", "d"}
    assert run("carve", "--dataset", voc, "--categories", "zebra", "--out", tmp_path / "c2") == EXIT_VALIDATION


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "dynsup", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and "dynsup" in out.stdout


def test_cli_outputs_equal_library_outputs(setting, tmp_path):
    """Each subcommand writes exactly what the library call produces."""
    from dynsup import annoset as aset
    from dynsup.dataset_io import merge_datasets
    from dynsup.simulator import hard_profile, simulate_detector
    from dynsup.thresholds import adaptive_thresholds, save_table

    truth_path = setting.parent / "voc_truth.json"
    truth = load_dataset(truth_path)
    lib = tmp_path / "lib"
    lib.mkdir()

    run("simulate", "--truth", truth_path, "--profile", "hard", "--seed", 5, "--out", tmp_path / "s1")
    save_detections(simulate_detector(truth, truth.categories, hard_profile(5)), lib / "d1.json")
    assert (tmp_path / "s1" / "detections.json").read_bytes() == (lib / "d1.json").read_bytes()
    run("simulate", "--truth", truth_path, "--profile", "soft", "--seed", 6, "--out", tmp_path / "s2")
    d1, d2 = lib / "d1.json", tmp_path / "s2" / "detections.json"

    gt = load_dataset(setting.parent / "voc.json")
    run("expand", "--initial", d1, "--predictions", d2, "--gt", setting.parent / "voc.json", "--out", tmp_path / "e")
    save_detections(aset.expand(load_detections(d1), load_detections(d2), gt.annotations, 0.7), lib / "e.json")
    assert (tmp_path / "e" / "expanded.json").read_bytes() == (lib / "e.json").read_bytes()

    run("shrink", "--current", d1, "--predictions", d2, "--gt", setting.parent / "voc.json", "--t-s", 0.4, "--out", tmp_path / "k")
    save_detections(aset.shrink(load_detections(d1), load_detections(d2), gt.annotations, 0.4), lib / "k.json")
    assert (tmp_path / "k" / "shrunk.json").read_bytes() == (lib / "k.json").read_bytes()

    run("threshold", "--detections", d1, "--gt", truth_path, "--out", tmp_path / "t")
    table = adaptive_thresholds(load_detections(d1), truth.annotations, 0.5, 0.01, sorted(truth.categories))
    save_table(table, lib / "t.tsv", truth.categories)
    assert (tmp_path / "t" / "thresholds.tsv").read_bytes() == (lib / "t.tsv").read_bytes()

    run("merge", "--dataset", setting.parent / "voc.json", "--dataset", setting.parent / "sun.json", "--out", tmp_path / "m")
    save_dataset(merge_datasets([(gt, {}), (load_dataset(setting.parent / "sun.json"), {})]), lib / "m.json")
    assert (tmp_path / "m" / "merged.json").read_bytes() == (lib / "m.json").read_bytes()


def test_pipeline_final_dataset_validates(setting, tmp_path):
    run("pipeline", "--config", setting, "--out", tmp_path / "o")
    final = load_dataset(tmp_path / "o" / "final" / "merged.json")
    assert len(final.categories) == 5 and all("/" in str(i) for i in final.images)
