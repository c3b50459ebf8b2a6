from __future__ import annotations

import json

import pytest

from dynsup import annoset as aset
from dynsup.annoset import Annotation, Source
from dynsup.dataset_io import Dataset, ImageInfo
from dynsup.geometry import Box
from dynsup.pipeline import (
    MERGED,
    Mechanism,
    MissingBindingError,
    OpSequence,
    OracleRangeError,
    Oracles,
    PipelineConfig,
    PipelineError,
    apply_sequence,
    run_initial_labeling,
    run_pipeline,
    sequence_stages,
    write_run_directory,
)
from dynsup.simulator import SimulatedOracle, cross_dataset_setting, hard_profile, initial_profile, soft_profile
from dynsup.thresholds import ThresholdTable
from oracles import box_keys, missing_truth, truth_oracles


class Fixed:
    """Oracle returning a canned answer."""

    def __init__(self, preds, categories):
        self.preds = preds
        self.categories = frozenset(categories)

    def predict(self, image_ids):
        return {i: self.preds[i] for i in image_ids if i in self.preds}


@pytest.fixture(scope="module")
def pairs():
    return cross_dataset_setting(40, [["a", "b", "c"], ["d", "e"]], labels=["voc", "sun"], seed=2)


def ann(x, cat, score=0.9):
    return Annotation(Box(x, 0, x + 10, 10), cat, score, Source.INITIAL)


@pytest.mark.parametrize("mechanism", list(Mechanism))
@pytest.mark.parametrize("sequence", list(OpSequence))
def test_truth_oracles_reach_fixed_point(pairs, mechanism, sequence):
    config = PipelineConfig(mechanism=mechanism, sequence=sequence)
    trace = run_pipeline(config, [p for p, _ in pairs], truth_oracles(pairs, mechanism))
    want = missing_truth(pairs)
    for label, gen in trace.final_generated().items():
        assert box_keys(gen) == want[label]


def test_empty_oracles_after_initial_give_empty_final(pairs):
    datasets = [p for p, _ in pairs]
    oracles = truth_oracles(pairs, Mechanism.CROSS_ANNOTATED)
    empty = {p.label: Fixed({}, range(1, 6)) for p in datasets}
    trace = run_pipeline(PipelineConfig(), datasets, Oracles(oracles.initial, empty, empty))
    assert all(g == {} for g in trace.final_generated().values())
    assert any(trace.stages[0].generated.values())


def test_initial_labeling_filters_and_suppresses():
    d1 = Dataset({1: ImageInfo(1)}, {1: [ann(0, 1)]}, {1: "cat"}, "one")
    d2 = Dataset({1: ImageInfo(1)}, {1: [ann(0, 1)]}, {1: "dog"}, "two")
    preds = {1: [ann(20, 2, 0.9), ann(20, 2, 0.8), ann(40, 2, 0.005), ann(60, 1, 0.9)]}
    oracles = Oracles({"one": Fixed(preds, [1, 2]), "two": Fixed({}, [1])})
    out = run_initial_labeling(PipelineConfig(), [d1, d2], oracles)
    # 0.8 duplicate suppressed, 0.005 below t_c, category 1 is not missing for "one"
    assert box_keys(out["one"]) == {(1, Box(20, 0, 30, 10), 2)}
    assert out["two"] == {}


def test_initial_truth_is_kept():
    d1 = Dataset({1: ImageInfo(1)}, {}, {1: "cat"}, "one")
    d2 = Dataset({1: ImageInfo(1)}, {}, {1: "dog"}, "two")
    truth = {1: [ann(0, 2, 1.0), ann(30, 2, 1.0)]}
    oracles = Oracles({"one": Fixed(truth, [2]), "two": Fixed({}, [1])})
    assert box_keys(run_initial_labeling(PipelineConfig(t_c=0.99), [d1, d2], oracles)["one"]) == box_keys(truth)


def test_adaptive_constant_equals_fixed(pairs):
    datasets = [p for p, _ in pairs]
    oracles = Oracles({p.label: SimulatedOracle(t, range(1, 6), initial_profile(1)) for p, t in pairs})
    fixed = run_initial_labeling(PipelineConfig(t_c=0.3), datasets, oracles)
    table = ThresholdTable({c: 0.3 for c in range(1, 6)})
    adaptive = run_initial_labeling(PipelineConfig(threshold_mode="adaptive", threshold_table=table), datasets, oracles)
    assert fixed == adaptive


def test_binding_and_range_errors(pairs):
    datasets = [p for p, _ in pairs]
    with pytest.raises(MissingBindingError):
        run_initial_labeling(PipelineConfig(), datasets, Oracles({"voc": Fixed({}, range(1, 6))}))
    narrow = {p.label: Fixed({}, [1]) for p in datasets}
    with pytest.raises(OracleRangeError):
        run_initial_labeling(PipelineConfig(), datasets, Oracles(narrow))
    liar = {p.label: Fixed({p.images and next(iter(p.images)): [ann(0, 5)]}, [4]) for p in datasets}
    with pytest.raises(OracleRangeError):
        run_pipeline(PipelineConfig(), datasets, Oracles(truth_oracles(pairs, "cross_annotated").initial, liar, liar))


def test_config_validation():
    with pytest.raises(PipelineError):
        PipelineConfig(t_e=0.0)
    with pytest.raises(PipelineError):
        PipelineConfig(threshold_mode="adaptive")
    with pytest.raises(ValueError):
        PipelineConfig(mechanism="telepathy")


def test_apply_sequence_examples():
    initial = {1: [ann(0, 1), ann(20, 2)]}
    for seq in OpSequence:
        config = PipelineConfig(sequence=seq)
        assert apply_sequence(initial, initial, initial, {}, config) == initial
    assert apply_sequence(initial, {}, {}, {}, PipelineConfig()) == {}


def _simulated(pairs, mechanism, seed=0):
    from dynsup.dataset_io import align_categories, merge_datasets, unify

    cm, _ = unify([p for p, _ in pairs])
    aligned = {p.label: align_categories(t, cm.names) for p, t in pairs}
    cats = list(cm.names)
    initial = {l: SimulatedOracle(t, cats, initial_profile(seed + i)) for i, (l, t) in enumerate(aligned.items())}
    if mechanism is Mechanism.SELF_ANNOTATED:
        merged = merge_datasets([(t, {}) for t in aligned.values()])
        return Oracles(
            initial,
            {MERGED: SimulatedOracle(merged, cats, hard_profile(seed + 10))},
            {MERGED: SimulatedOracle(merged, cats, soft_profile(seed + 20))},
        )
    expand = {l: SimulatedOracle(t, cats, hard_profile(seed + 10 + i)) for i, (l, t) in enumerate(aligned.items())}
    shrink = {l: SimulatedOracle(t, cats, soft_profile(seed + 20 + i)) for i, (l, t) in enumerate(aligned.items())}
    return Oracles(initial, expand, shrink)


@pytest.mark.parametrize("mechanism", list(Mechanism))
@pytest.mark.parametrize("sequence", list(OpSequence))
def test_trace_obeys_algebra_laws(pairs, mechanism, sequence):
    config = PipelineConfig(mechanism=mechanism, sequence=sequence)
    trace = run_pipeline(config, [p for p, _ in pairs], _simulated(pairs, mechanism), truth={p.label: t for p, t in pairs})
    for prev, snap in zip(trace.stages, trace.stages[1:]):
        for label, gen in snap.generated.items():
            before = box_keys(prev.generated[label])
            if snap.operation == "expand":
                assert box_keys(gen) >= before
            else:
                assert box_keys(gen) <= before
        assert set(snap.delta_vs_initial) == {"voc", "sun", "all"}
    assert [s.operation for s in trace.stages] == ["initial", *config.sequence.operations]


def test_mechanisms_agree_with_identical_oracles(pairs):
    """A merged oracle that answers exactly like the per-dataset ones gives the same trace."""
    datasets = [p for p, _ in pairs]
    cross = _simulated(pairs, Mechanism.CROSS_ANNOTATED)

    class Merged:
        def __init__(self, per_label):
            self.per_label = per_label
            self.categories = frozenset(range(1, 6))

        def predict(self, image_ids):
            out = {}
            for merged_id in image_ids:
                label, _, raw = merged_id.partition("/")
                got = self.per_label[label].predict([int(raw)])
                if got:
                    out[merged_id] = got[int(raw)]
            return out

    self_oracles = Oracles(cross.initial, {MERGED: Merged(cross.expand)}, {MERGED: Merged(cross.shrink)})
    a = run_pipeline(PipelineConfig(), datasets, cross)
    b = run_pipeline(PipelineConfig(mechanism="self_annotated"), datasets, self_oracles)
    assert a.final_generated() == b.final_generated()


def test_empty_second_dataset_is_noop(pairs):
    first = pairs[0][0]
    empty = Dataset({}, {}, {}, "empty")
    oracles = Oracles({first.label: Fixed({}, []), "empty": Fixed({}, range(1, 4))}, {}, {})
    oracles.expand = {first.label: Fixed({}, []), "empty": Fixed({}, [])}
    oracles.shrink = oracles.expand
    trace = run_pipeline(PipelineConfig(), [first, empty], oracles)
    assert all(g == {} for g in trace.final_generated().values())
    assert trace.final.num_annotations() == first.num_annotations()


def test_run_directory_layout(pairs, tmp_path):
    config = PipelineConfig(mechanism="self_annotated")
    trace = run_pipeline(config, [p for p, _ in pairs], _simulated(pairs, Mechanism.SELF_ANNOTATED), truth={p.label: t for p, t in pairs})
    written = {p.relative_to(tmp_path).as_posix() for p in write_run_directory(trace, tmp_path)}
    for n in (1, 2, 3):
        for label in ("voc", "sun"):
            for name in ("annotations", "targets", "detections", "generated", "report"):
                assert f"stage_{n}/{label}/{name}.json" in written
    assert "stage_1/merged/annotations.json" in written and "final/merged.json" in written
    report = json.loads((tmp_path / "stage_3/voc/report.json").read_text())
    assert report["operation"] == "shrink" and "delta_vs_initial" in report
    targets = json.loads((tmp_path / "stage_2/voc/targets.json").read_text())
    assert targets["background_index"] == 0


def test_sequence_stages_order():
    initial = {1: [ann(0, 1)]}
    extra = {1: [ann(50, 1)]}
    config = PipelineConfig(sequence="shrink_then_expand")
    ops = sequence_stages(initial, extra, {}, {}, config)
    assert [op for op, _ in ops] == ["shrink", "expand"]
    assert ops[0][1] == {} and aset.count(ops[1][1]) == 1
