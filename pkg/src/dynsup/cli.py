"""Command-line entry point: ``dynsup <subcommand> ...``.

Every subcommand reads its inputs, calls one library function and writes its
outputs plus ``manifest.json`` into ``--out``. Options may also come from a
JSON file given with ``--config``; keys are the option names with dashes
replaced by underscores, and explicit flags win over file values.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from . import annoset as aset
from .dataset_io import (
    DatasetError,
    align_categories,
    carve_subset,
    load_dataset,
    load_detections,
    merge_datasets,
    save_dataset,
    save_detections,
    unify,
)
from .metrics import evaluate, match_tp_fp, score_histogram, write_histogram_csv, write_report
from .pipeline import (
    MERGED,
    FileOracle,
    Mechanism,
    Oracles,
    PipelineConfig,
    PipelineError,
    TruthOracle,
    prepare_predictions,
    run_pipeline,
    write_run_directory,
)
from .simulator import PRESETS, DetectorProfile, SimulatedOracle, simulate_detector
from .thresholds import adaptive_thresholds, load_table, save_table

log = logging.getLogger("dynsup")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_VALIDATION = 4
LAYOUT_VERSION = 1


class ConfigError(Exception):
    pass


# --------------------------------------------------------------------------
# manifest
# --------------------------------------------------------------------------


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Collects inputs, outputs and timings of one invocation."""

    def __init__(self, command: str, options: dict, out: Path, timings: bool = False):
        self.command = command
        self.options = options
        self.out = out
        self.inputs: Dict[str, str] = {}
        self.outputs: List[Path] = []
        self.record_timings = timings
        self.threads = 1
        self.timings: Dict[str, float] = {}
        self._t0 = time.perf_counter()

    def input(self, path) -> Path:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"input file not found: {p}")
        self.inputs[str(path)] = _sha256(p)
        return p

    def output(self, name: str) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(p)
        return p

    def lap(self, name: str) -> None:
        now = time.perf_counter()
        self.timings[name] = now - self._t0
        self._t0 = now

    def write_manifest(self) -> None:
        missing = [str(p) for p in self.outputs if not p.exists()]
        if missing:
            raise RuntimeError(f"outputs missing at manifest time: {missing}")
        canonical = json.dumps(self.options, sort_keys=True, default=str)
        manifest = {
            "tool": "dynsup",
            "version": __version__,
            "layout_version": LAYOUT_VERSION,
            "command": self.command,
            "config_hash": hashlib.sha256(canonical.encode()).hexdigest(),
            "options": json.loads(canonical),
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": sorted(str(p.relative_to(self.out)) for p in self.outputs),
        }
        if self.record_timings:
            manifest["timings_s"] = self.timings
            manifest["threads"] = self.threads
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_label(args) -> None:
    run = args.run
    dets = load_detections(run.input(args.detections))
    if args.categories:
        dets = aset.restrict_categories(dets, [int(c) for c in args.categories])
    table = None
    if args.threshold_table:
        names = load_dataset(run.input(args.gt)).categories if args.gt else None
        table = load_table(run.input(args.threshold_table), names)
    config = PipelineConfig(
        t_c=args.t_c,
        nms_iou=args.nms_iou,
        threshold_mode="adaptive" if table else "fixed",
        threshold_table=table,
    )
    generated = aset.retag(prepare_predictions(dets, config), aset.Source.INITIAL)
    save_detections(generated, run.output("generated.json"))


def _gt_set(run, path) -> aset.AnnotationSet:
    return load_dataset(run.input(path)).annotations


def cmd_expand(args) -> None:
    run = args.run
    out = aset.expand(
        load_detections(run.input(args.initial)),
        load_detections(run.input(args.predictions)),
        _gt_set(run, args.gt),
        args.t_e,
        args.class_aware,
    )
    save_detections(out, run.output("expanded.json"))


def cmd_shrink(args) -> None:
    run = args.run
    out = aset.shrink(
        load_detections(run.input(args.current)),
        load_detections(run.input(args.predictions)),
        _gt_set(run, args.gt),
        args.t_s,
        args.class_aware,
    )
    save_detections(out, run.output("shrunk.json"))


def cmd_threshold(args) -> None:
    run = args.run
    gt = load_dataset(run.input(args.gt))
    table = adaptive_thresholds(
        load_detections(run.input(args.detections)), gt.annotations, args.match_iou, args.t_c, sorted(gt.categories)
    )
    save_table(table, run.output("thresholds.tsv"), gt.categories)


def cmd_eval(args) -> None:
    run = args.run
    gt = load_dataset(run.input(args.gt))
    report = evaluate(load_detections(run.input(args.detections)), gt.annotations, args.match_iou, args.bins, gt.categories)
    write_report(report, run.output("report.json"))
    write_histogram_csv(report.histogram, run.output("histogram.csv"))
    log.info("mAP %.4f  precision %.4f  recall %.4f", report.map, report.precision, report.recall)


def cmd_histogram(args) -> None:
    run = args.run
    gt = load_dataset(run.input(args.gt))
    report = match_tp_fp(load_detections(run.input(args.detections)), gt.annotations, args.match_iou)
    write_histogram_csv(score_histogram(report, args.bins), run.output("histogram.csv"))


def _load_aliases(run, value) -> Optional[dict]:
    if not value:
        return None
    if isinstance(value, dict):
        return value
    return json.loads(run.input(value).read_text())


def cmd_merge(args) -> None:
    run = args.run
    generated = list(args.generated or [])
    if generated and len(generated) != len(args.dataset):
        raise ConfigError("--generated must be given once per --dataset (use '-' for none)")
    parts = []
    for n, path in enumerate(args.dataset):
        d = load_dataset(run.input(path))
        g = generated[n] if generated else "-"
        parts.append((d, {} if g == "-" else load_detections(run.input(g))))
    merged = merge_datasets(parts, label=args.label, aliases=_load_aliases(run, args.aliases))
    save_dataset(merged, run.output("merged.json"))


def cmd_carve(args) -> None:
    run = args.run
    d = load_dataset(run.input(args.dataset))
    save_dataset(carve_subset(d, args.categories, args.budget, args.seed), run.output("subset.json"))


def _profile(choice, seed: int) -> DetectorProfile:
    if isinstance(choice, str):
        if choice in PRESETS:
            return PRESETS[choice](seed)
        choice = json.loads(Path(choice).read_text())
    profile = DetectorProfile.from_dict(choice)
    return profile if "seed" in choice else profile.with_seed(seed)


def cmd_simulate(args) -> None:
    run = args.run
    truth = load_dataset(run.input(args.truth))
    if args.categories:
        lookup = truth.name_to_id
        cats = [lookup[c] if c in lookup else int(c) for c in args.categories]
    else:
        cats = sorted(truth.categories)
    choice = args.profile
    if isinstance(choice, str) and choice not in PRESETS:
        choice = str(run.input(choice))
    dets = simulate_detector(truth, cats, _profile(choice, args.seed))
    save_detections(dets, run.output("detections.json"))


def _derive_seed(seed: int, *keys) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def _build_oracles(bindings: dict, base: Path, run: Run, datasets, truths, cm, seed: int, mechanism: Mechanism) -> Oracles:
    names = cm.names
    labels = [d.label for d in datasets]
    own = {d.label: set(cm.for_dataset(d.label).values()) for d in datasets}
    missing = {label: sorted(set(names) - own[label]) for label in labels}
    aligned = {label: align_categories(t, names) for label, t in truths.items()}

    def truth_for(target):
        if target == MERGED:
            if set(aligned) != set(labels):
                raise ConfigError("simulated or truth oracles on the merged set need truth for every dataset")
            return merge_datasets([(aligned[label], {}) for label in labels])
        if target not in aligned:
            raise ConfigError(f"no truth file for dataset {target!r}")
        return aligned[target]

    def make(stage_no, stage, target, entry):
        if target == MERGED:
            cats = sorted(names)
        elif target in missing:
            cats = missing[target]
        else:
            raise ConfigError(f"{stage} detector bound to unknown dataset {target!r}")
        if "categories" in entry:
            by_name = {n: c for c, n in names.items()}
            cats = [by_name[c] if c in by_name else int(c) for c in entry["categories"]]
        if "results" in entry:
            return FileOracle(run.input(base / entry["results"]), cats, stage)
        if entry.get("truth"):
            return TruthOracle(truth_for(target), cats, stage)
        if "simulate" in entry:
            profile_choice = entry["simulate"]
            if isinstance(profile_choice, str) and profile_choice not in PRESETS:
                profile_choice = str(run.input(base / profile_choice))
            return SimulatedOracle(
                truth_for(target), cats, _profile(profile_choice, _derive_seed(seed, stage_no, labels.index(target) if target in labels else len(labels))), stage
            )
        raise ConfigError(f"{stage}/{target}: detector entry needs 'results', 'simulate' or 'truth'")

    stages = {}
    for stage_no, stage in enumerate(("initial", "expand", "shrink"), start=1):
        entries = bindings.get(stage)
        if not isinstance(entries, dict) or not entries:
            raise ConfigError(f"config lacks detector bindings for stage {stage!r}")
        if stage != "initial" and mechanism is Mechanism.SELF_ANNOTATED and set(entries) != {MERGED}:
            raise ConfigError(f"self_annotated mechanism binds a single {MERGED!r} detector for {stage}")
        stages[stage] = {target: make(stage_no, stage, target, entry) for target, entry in entries.items()}
    return Oracles(**stages)


def cmd_pipeline(args) -> None:
    run = args.run
    if not args.config:
        raise ConfigError("pipeline needs --config")
    base = Path(args.config).resolve().parent
    raw = args.raw_config
    if not raw.get("datasets"):
        raise ConfigError("config lacks 'datasets'")

    datasets, truths = [], {}
    for entry in raw["datasets"]:
        d = load_dataset(run.input(base / entry["annotations"]), label=entry.get("label"))
        datasets.append(d)
        if entry.get("truth"):
            truths[d.label] = load_dataset(run.input(base / entry["truth"]), label=d.label)

    aliases = raw.get("aliases")
    if isinstance(aliases, str):
        aliases = json.loads(run.input(base / aliases).read_text())
    cm, _ = unify(datasets, aliases)

    table = None
    if args.threshold_mode == "adaptive":
        if not args.threshold_table:
            raise ConfigError("adaptive threshold mode needs threshold_table")
        table = load_table(run.input(base / args.threshold_table), cm.names)
    config = PipelineConfig(
        mechanism=args.mechanism,
        sequence=args.sequence,
        t_e=args.t_e,
        t_s=args.t_s,
        t_c=args.t_c,
        threshold_mode=args.threshold_mode,
        threshold_table=table,
        class_aware=args.class_aware,
        nms_iou=args.nms_iou,
        match_iou=args.match_iou,
    )
    oracles = _build_oracles(raw.get("detectors", {}), base, run, datasets, truths, cm, args.seed, config.mechanism)
    run.lap("load")
    trace = run_pipeline(config, datasets, oracles, truth=truths or None, aliases=aliases, workers=args.threads)
    run.lap("pipeline")
    for path in write_run_directory(trace, run.out):
        run.outputs.append(path)
    run.lap("write")


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of option values (flags override)")
    p.add_argument("--out", help="output directory (required)")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--threads", type=int, help="worker cap (default 1)")
    p.add_argument("--timings", action="store_true", default=None, help="record wall-clock timings in the manifest")
    p.add_argument("-v", "--verbose", action="store_true", default=None)


def _flag(p, name, **kw):
    p.add_argument(name, default=None, **kw)


DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "timings": False,
    "verbose": False,
    "t_e": aset.DEFAULT_T_E,
    "t_s": aset.DEFAULT_T_S,
    "t_c": 0.01,
    "nms_iou": 0.6,
    "match_iou": 0.5,
    "bins": 10,
    "class_aware": False,
    "label": "merged",
    "mechanism": Mechanism.CROSS_ANNOTATED.value,
    "sequence": "expand_then_shrink",
    "threshold_mode": "fixed",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynsup", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dynsup {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("label", help="initial labeling: confidence filter + per-class NMS")
    _common(p)
    _flag(p, "--detections", help="COCO results file")
    _flag(p, "--t-c", type=float, help="confidence threshold (default 0.01)")
    _flag(p, "--threshold-table", help="per-category threshold file (overrides --t-c)")
    _flag(p, "--gt", help="dataset whose category names the threshold file uses")
    _flag(p, "--nms-iou", type=float, help="NMS IoU threshold (default 0.6)")
    _flag(p, "--categories", nargs="+", help="keep only these category ids")
    p.set_defaults(func=cmd_label, required=["detections"])

    p = sub.add_parser("expand", help="add non-overlapping new predictions")
    _common(p)
    _flag(p, "--initial", help="current pseudo-annotations (results file)")
    _flag(p, "--predictions", help="new predictions (results file)")
    _flag(p, "--gt", help="ground-truth dataset (COCO annotation file)")
    _flag(p, "--t-e", type=float, help="expand IoU threshold (default 0.7)")
    _flag(p, "--class-aware", action="store_true")
    p.set_defaults(func=cmd_expand, required=["initial", "predictions", "gt"])

    p = sub.add_parser("shrink", help="keep pseudo-annotations confirmed by new predictions")
    _common(p)
    _flag(p, "--current", help="current pseudo-annotations (results file)")
    _flag(p, "--predictions", help="new predictions (results file)")
    _flag(p, "--gt", help="ground-truth dataset (COCO annotation file)")
    _flag(p, "--t-s", type=float, help="shrink IoU threshold (default 0.5)")
    _flag(p, "--class-aware", action="store_true")
    p.set_defaults(func=cmd_shrink, required=["current", "predictions", "gt"])

    p = sub.add_parser("threshold", help="per-category F1-maximizing confidence thresholds")
    _common(p)
    _flag(p, "--detections", help="validation detections (results file)")
    _flag(p, "--gt", help="validation ground truth (COCO annotation file)")
    _flag(p, "--match-iou", type=float, help="matching IoU (default 0.5)")
    _flag(p, "--t-c", type=float, help="fallback threshold (default 0.01)")
    p.set_defaults(func=cmd_threshold, required=["detections", "gt"])

    for name, func, helptext in (
        ("eval", cmd_eval, "AP/mAP, precision, recall and score histogram"),
        ("histogram", cmd_histogram, "TP/FP counts per score bin"),
    ):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        _flag(p, "--detections", help="detections (results file)")
        _flag(p, "--gt", help="ground truth (COCO annotation file)")
        _flag(p, "--match-iou", type=float, help="matching IoU (default 0.5)")
        _flag(p, "--bins", type=int, help="histogram bins (default 10)")
        p.set_defaults(func=func, required=["detections", "gt"])

    p = sub.add_parser("merge", help="merge datasets and generated annotations")
    _common(p)
    _flag(p, "--dataset", action="append", help="COCO annotation file (repeatable)")
    _flag(p, "--generated", action="append", help="generated results file per dataset, '-' for none")
    _flag(p, "--aliases", help="JSON object mapping category names to canonical names")
    _flag(p, "--label", help="label of the merged dataset")
    p.set_defaults(func=cmd_merge, required=["dataset"])

    p = sub.add_parser("carve", help="category/image subset of a dataset")
    _common(p)
    _flag(p, "--dataset", help="COCO annotation file")
    _flag(p, "--categories", nargs="+", help="category names to keep")
    _flag(p, "--budget", type=int, help="maximum number of images")
    p.set_defaults(func=cmd_carve, required=["dataset", "categories"])

    p = sub.add_parser("simulate", help="synthetic detections from ground truth")
    _common(p)
    _flag(p, "--truth", help="ground truth (COCO annotation file)")
    _flag(p, "--profile", help="preset name (hard, soft, initial) or profile JSON file")
    _flag(p, "--categories", nargs="+", help="category names or ids to detect (default all)")
    p.set_defaults(func=cmd_simulate, required=["truth", "profile"])

    p = sub.add_parser("pipeline", help="run the full three-stage pipeline from a config file")
    _common(p)
    _flag(p, "--mechanism", choices=[m.value for m in Mechanism])
    _flag(p, "--sequence", choices=["expand_then_shrink", "shrink_then_expand"])
    _flag(p, "--t-e", type=float, help="expand IoU threshold (default 0.7)")
    _flag(p, "--t-s", type=float, help="shrink IoU threshold (default 0.5)")
    _flag(p, "--t-c", type=float, help="confidence threshold (default 0.01)")
    _flag(p, "--threshold-mode", choices=["fixed", "adaptive"])
    _flag(p, "--threshold-table", help="threshold file for adaptive mode")
    _flag(p, "--class-aware", action="store_true")
    _flag(p, "--nms-iou", type=float, help="NMS IoU threshold (default 0.6)")
    _flag(p, "--match-iou", type=float, help="matching IoU for reports (default 0.5)")
    p.set_defaults(func=cmd_pipeline, required=[])
    return parser


def _resolve(args: argparse.Namespace) -> dict:
    """Fill unset options from the config file, then from DEFAULTS."""
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.config}: not valid JSON ({e})") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
    skip = {"func", "required", "config", "command"}
    options = {}
    for key, value in vars(args).items():
        if key in skip:
            continue
        if value is None:
            value = raw.get(key, DEFAULTS.get(key))
        setattr(args, key, value)
        options[key] = value
    missing = [k for k in args.required if getattr(args, k) in (None, [])]
    if missing:
        raise ConfigError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))
    if not args.out:
        raise ConfigError("missing required option: --out")
    args.raw_config = raw
    # runtime knobs that cannot change any output stay out of the hash
    for key in ("out", "timings", "verbose", "threads"):
        options.pop(key)
    if args.config:
        options["config"] = {k: v for k, v in raw.items()}
    return options


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        options = _resolve(args)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        args.run = Run(args.command, options, out, bool(args.timings))
        args.run.threads = args.threads
        args.func(args)
        args.run.lap("total")
        args.run.write_manifest()
    except ConfigError as e:
        print(f"dynsup: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FileNotFoundError) as e:
        print(f"dynsup: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (DatasetError, PipelineError, ValueError, KeyError) as e:
        print(f"dynsup: validation error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
