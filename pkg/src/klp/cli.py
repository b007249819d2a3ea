"""Command-line front end: ``python -m klp <command> --config run.json``.

Every stage reads its inputs from, and writes its outputs under, the run's
output directory::

    cohort/            generate       images/*.pgm, manifest.csv, annotations.csv
    curate/            curate         manifest.csv, splits.csv, exclusions.csv, table1.csv, table2.csv
    detect/            train-detector detector_<view>_<side>.klpw, history_*.csv, knees.csv
    classify/          train-classifier classifier_<variant>.klpw, history_*.csv
    infer/             infer          predictions.csv
    eval/              eval           table3.csv, table4.csv, confusion_* (.csv/.pgm/.svg)
    reader_study/      reader-study   ratings.csv, kappa_<scheme>.csv/.svg, summary.csv

Each stage also writes ``report.json`` and a verbatim copy of the config.
Exit status: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from collections import Counter
from pathlib import Path
from typing import Dict, List

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as C
from .classify import (ClassifierTrainConfig, MultiInputCNN, SingleViewCNN, build_balanced_validation,
                       classify_forward, load_classifier, train_with_restarts)
from .curate import (SPLITS, apply_exclusions, map_grade, map_grades, read_manifest, split_by_patient,
                     split_records, write_manifest)
from .detect import (DetectorSet, DetectorTrainConfig, GridDetector, evaluate_detection, flip_input,
                     train_detector)
from .evalstats import (SCHEMES, RatingsTable, accuracy, confusion, kappa, matrix_to_csv, pairwise_kappa_matrix,
                        reader_study_summary)
from .phantom import VIEWS, default_readers, generate_cohort, read_annotations, simulate_reader
from .pipeline import KneeExam, detector_inputs, knee_exams, patch_set, select_knees
from .preprocess import AugmentSpec
from .report import heatmap_pgm, heatmap_svg, write_report

log = logging.getLogger("klp")

VARIANT_TAGS = {"LAT": "lat", "PA": "pa", "PA+LAT": "pa_lat"}
GRADE_LABELS = [f"KL{g}" for g in range(5)]


class UsageError(Exception):
    pass


class StageError(Exception):
    pass


# --- helpers ----------------------------------------------------------------

def _stage_dir(cfg: dict, name: str) -> Path:
    d = Path(cfg["output_dir"]) / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def _require(path: Path, made_by: str) -> Path:
    if not path.exists():
        raise StageError(f"missing upstream artifact {path} (run `{made_by}` first)")
    return path


def _write_csv(path: Path, header: List[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _curated(cfg: dict) -> Dict[str, List[KneeExam]]:
    cur = Path(cfg["output_dir"]) / "curate"
    records = read_manifest(_require(cur / "manifest.csv", "curate"))
    with open(_require(cur / "splits.csv", "curate"), newline="") as fh:
        assignment = {r["patient_id"]: r["split"] for r in csv.DictReader(fh)}
    return {s: knee_exams(rs) for s, rs in split_records(records, assignment).items()}


def _cohort_root(cfg: dict) -> Path:
    return _require(Path(cfg["output_dir"]) / "cohort", "generate")


def _annotations(cfg: dict) -> Dict[str, dict]:
    return read_annotations(_require(_cohort_root(cfg) / "annotations.csv", "generate"))


def _detectors(cfg: dict) -> DetectorSet:
    d = _require(Path(cfg["output_dir"]) / "detect", "train-detector")
    try:
        return DetectorSet.load(d, shared=cfg["detect"]["shared"])
    except FileNotFoundError as exc:
        raise StageError(f"{exc} (run `train-detector` first)") from None


def _fmt(x: float) -> str:
    return f"{x + 0.0:.6f}"


# --- commands -----------------------------------------------------------------

def cmd_generate(cfg: dict, args) -> dict:
    p = cfg["phantom"]
    n = args.patients if args.patients is not None else p["n_patients"]
    if n < 1:
        raise UsageError("--patients must be at least 1")
    out = _stage_dir(cfg, "cohort")
    records, _ = generate_cohort(C.phantom_config(cfg), n, p["visits"], p["grade_distribution"], out_dir=out)
    knees = {r.knee_visit: r for r in records}
    grades = Counter(map_grade(r.kl_grade) for r in knees.values())
    metrics = {"n_patients": n, "n_knee_visits": len(knees), "n_images": len(records),
               "grade_counts": [grades.get(g, 0) for g in range(5)]}
    artifacts = ["manifest.csv", "annotations.csv", "phantom_config.json"]
    return write_report(out, "generate", C.seed_for(cfg, "phantom"), metrics, artifacts)


def cmd_curate(cfg: dict, args) -> dict:
    seed = C.seed_for(cfg, "curate")
    records = read_manifest(_require(_cohort_root(cfg) / "manifest.csv", "generate"))
    kept, report = apply_exclusions(records, seed)
    kept = map_grades(kept)
    assignment = split_by_patient(kept, cfg["curate"]["fractions"], seed) if kept else {}
    parts = split_records(kept, assignment)
    out = _stage_dir(cfg, "curate")
    write_manifest(out / "manifest.csv", kept)
    _write_csv(out / "splits.csv", ["patient_id", "split"], sorted(assignment.items()))
    (out / "exclusions.csv").write_text(report.to_csv())

    patients = {s: len({r.patient_id for r in parts[s]}) for s in SPLITS}
    knees = {s: len({r.knee_visit for r in parts[s]}) for s in SPLITS}
    grade_counts = {}
    for s in SPLITS:
        c = Counter(int(r.kl_grade) for r in parts[s] if r.view == "PA")
        grade_counts[s] = [c.get(g, 0) for g in range(5)]
    _write_csv(out / "table1.csv", ["split", "patients", "knee_visits", "images"],
               [[s, patients[s], knees[s], len(parts[s])] for s in SPLITS])
    _write_csv(out / "table2.csv", ["split", *GRADE_LABELS], [[s, *grade_counts[s]] for s in SPLITS])
    metrics = {"input_rows": len(records), "output_rows": len(kept), "exclusions": dict(report.rows()),
               "patients": patients, "knee_visits": knees, "grade_counts": grade_counts}
    artifacts = ["manifest.csv", "splits.csv", "exclusions.csv", "table1.csv", "table2.csv"]
    return write_report(out, "curate", seed, metrics, artifacts)


def _detection_knees(cfg: dict) -> Dict[str, List[KneeExam]]:
    """The annotation subset: train/val knees from the training split, test knees from the test split."""
    d = cfg["detect"]
    splits = _curated(cfg)
    seed = C.seed_for(cfg, "detect")
    try:
        pool = select_knees(splits["train"], d["n_train"] + d["n_val"], seed)
        test = select_knees(splits["test"], d["n_test"], seed + 1)
    except ValueError as exc:
        raise StageError(f"detection subset: {exc}") from None
    return {"train": pool[:d["n_train"]], "validation": pool[d["n_train"]:], "test": test}


def cmd_train_detector(cfg: dict, args) -> dict:
    d = cfg["detect"]
    seed = C.seed_for(cfg, "detect")
    root, ann = _cohort_root(cfg), _annotations(cfg)
    knees = _detection_knees(cfg)
    out = _stage_dir(cfg, "detect")
    _write_csv(out / "knees.csv", ["knee", "split"], [[e.key, s] for s in SPLITS for e in knees[s]])
    tcfg = DetectorTrainConfig(batch_size=d["batch_size"], lr=d["lr"], patience=d["patience"],
                               max_epochs=d["max_epochs"], offset_weight=d["offset_weight"], seed=seed)
    sides = ("right",) if d["shared"] else ("left", "right")
    models, metrics, artifacts = {}, {}, ["knees.csv"]
    for view in VIEWS:
        for side in sides:
            sets = {}
            for s in ("train", "validation"):
                subset = knees[s] if d["shared"] else [e for e in knees[s] if e.side == side]
                inputs = detector_inputs(root, subset, view, ann, d["input_size"])
                if d["shared"]:
                    inputs = [flip_input(i) if e.side == "left" else i for i, e in zip(inputs, subset)]
                sets[s] = inputs
            if len(sets["train"]) < 2 or not sets["validation"]:
                raise StageError(f"too few annotated {view}/{side} knees to train a detector")
            log.info("training %s/%s detector on %d images", view, side, len(sets["train"]))
            model = GridDetector(grid=d["grid"], input_size=d["input_size"], stem_pool=d["stem_pool"],
                                 widths=d["widths"], extra=d["extra"], seed=seed, view=view, side=side)
            model, hist = train_detector(model, sets["train"], sets["validation"], tcfg)
            models[(view, side)] = model
            (out / f"history_{view}_{side}.csv").write_text(hist.to_csv())
            artifacts += [f"detector_{view}_{side}.klpw", f"history_{view}_{side}.csv"]
            metrics[f"{view}_{side}"] = {"n_train": len(sets["train"]), "n_val": len(sets["validation"]),
                                         "best_epoch": hist.best_epoch, "epochs_run": len(hist.epochs),
                                         "best_val_mean_iou": hist.best_val_iou}
    DetectorSet(models, d["shared"]).save(out)
    return write_report(out, "train-detector", seed,
                        {"knees": {s: len(knees[s]) for s in SPLITS}, "models": metrics}, artifacts)


def _classifier_factory(c: dict, variant: str):
    kw = dict(input_size=c["input_size"], widths=c["widths"], trunk_width=c["trunk_width"],
              trunk_blocks=c["trunk_blocks"], hidden=c["hidden"])
    if variant == "PA+LAT":
        return lambda seed: MultiInputCNN(seed=seed, **kw)
    return lambda seed: SingleViewCNN(view=variant, seed=seed, **kw)


def _patches(cfg: dict, exams, mode: str, views=("PA", "LAT")):
    root = _cohort_root(cfg)
    size = cfg["classify"]["input_size"]
    if mode == "detector":
        return patch_set(root, exams, size, detectors=_detectors(cfg), views=views)
    return patch_set(root, exams, size, annotations=_annotations(cfg), views=views)


def cmd_train_classifier(cfg: dict, args) -> dict:
    c = cfg["classify"]
    seed = C.seed_for(cfg, "classify")
    splits = _curated(cfg)
    train, _, train_err = _patches(cfg, splits["train"], c["centers"])
    val, _, val_err = _patches(cfg, splits["validation"], c["centers"])
    if train_err or val_err:
        log.warning("%d training/validation knees could not be cropped", len(train_err) + len(val_err))
    missing = [g for g in range(5) if not np.any(train.labels == g)]
    if missing:
        raise StageError(f"training split has no knees of KL grade(s) {missing}")
    try:
        val_idx = build_balanced_validation(val.labels, seed)
    except ValueError as exc:
        raise StageError(str(exc)) from None
    val = val.subset(val_idx)
    a = c["augment"]
    tcfg = ClassifierTrainConfig(lr=c["lr"], batch_size=c["batch_size"], patience=c["patience"],
                                 warmup_epochs=c["warmup_epochs"], max_epochs=c["max_epochs"],
                                 restarts=c["restarts"], batches_per_epoch=c["batches_per_epoch"],
                                 augment=AugmentSpec(a["flip_prob"], a["rotation_deg"], a["translation"],
                                                     tuple(a["scale"]), a["shear_deg"]),
                                 seed=seed)
    out = _stage_dir(cfg, "classify")
    metrics, artifacts = {}, []
    for variant in c["variants"]:
        tag = VARIANT_TAGS[variant]
        log.info("training %s classifier (%d restarts)", variant, c["restarts"])
        result, histories = train_with_restarts(_classifier_factory(c, variant), train, val, tcfg)
        result.model.save(out / f"classifier_{tag}.klpw")
        artifacts.append(f"classifier_{tag}.klpw")
        for i, h in enumerate(histories):
            (out / f"history_{tag}_r{i}.csv").write_text(h.to_csv())
            artifacts.append(f"history_{tag}_r{i}.csv")
        metrics[variant] = {"best_val_accuracy": result.score, "selected_restart": result.index,
                            "restart_scores": result.scores, "best_epoch": histories[result.index].best_epoch,
                            "failed_restarts": len(result.failures)}
    return write_report(out, "train-classifier", seed,
                        {"n_train": len(train), "n_val_balanced": len(val), "variants": metrics}, artifacts)


def cmd_infer(cfg: dict, args) -> dict:
    mode = cfg["eval"]["centers"]
    variants = cfg["classify"]["variants"]
    cls_dir = Path(cfg["output_dir"]) / "classify"
    models = {v: load_classifier(_require(cls_dir / f"classifier_{VARIANT_TAGS[v]}.klpw", "train-classifier"))
              for v in variants}
    exams = _curated(cfg)["test"]
    ps, centers, errors = _patches(cfg, exams, mode)
    rows, counts = [], {}
    for v in variants:
        scores, grades = classify_forward(models[v], ps.pa, ps.lat)
        counts[v] = int(len(grades))
        for key, label, s, g in zip(ps.ids, ps.labels, scores, grades):
            (pax, pay), (lax, lay) = centers[key]["PA"], centers[key]["LAT"]
            rows.append([key, v, int(label), int(g), *[f"{p:.6f}" for p in s],
                         f"{pax:.3f}", f"{pay:.3f}", f"{lax:.3f}", f"{lay:.3f}", ""])
        for key in sorted(errors):
            rows.append([key, v, "", "", "", "", "", "", "", "", "", "", "", errors[key]])
    out = _stage_dir(cfg, "infer")
    _write_csv(out / "predictions.csv",
               ["knee", "variant", "kl_grade", "predicted", "p0", "p1", "p2", "p3", "p4",
                "pa_x", "pa_y", "lat_x", "lat_y", "error"], rows)
    metrics = {"n_exams": len(exams), "n_failed": len(errors), "centers": mode, "variants": counts}
    return write_report(out, "infer", C.seed_for(cfg, "classify"), metrics, ["predictions.csv"])


def _predictions(cfg: dict) -> Dict[str, Dict[str, tuple]]:
    path = _require(Path(cfg["output_dir"]) / "infer" / "predictions.csv", "infer")
    out: Dict[str, Dict[str, tuple]] = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            if not r["error"]:
                out.setdefault(r["variant"], {})[r["knee"]] = (int(r["kl_grade"]), int(r["predicted"]))
    return out


def cmd_eval(cfg: dict, args) -> dict:
    out = _stage_dir(cfg, "eval")
    artifacts = []
    # Table 3: detection on the held-out annotated knees
    root, ann = _cohort_root(cfg), _annotations(cfg)
    detectors = _detectors(cfg)
    test_knees = _detection_knees(cfg)["test"]
    detection, rows = {}, []
    for view in VIEWS:
        for side in ("left", "right"):
            subset = [e for e in test_knees if e.side == side]
            if not subset:
                continue
            inputs = detector_inputs(root, subset, view, ann, detectors.model_for(view, side).input_size)
            if detectors.shared and side == "left":
                inputs = [flip_input(i) for i in inputs]
            m = evaluate_detection(detectors.model_for(view, side), inputs)
            detection[f"{view}_{side}"] = m
            rows.append([view, side, m["n"], _fmt(m["fraction_iou_ge_0.75"]), _fmt(m["mean_iou"]),
                         _fmt(m["std_iou"])])
    _write_csv(out / "table3.csv", ["view", "side", "n", "fraction_iou_ge_0.75", "mean_iou", "std_iou"], rows)
    artifacts.append("table3.csv")

    # Table 4 and confusion matrices
    preds = _predictions(cfg)
    classification, rows = {}, []
    for v in cfg["classify"]["variants"]:
        if v not in preds:
            raise StageError(f"no predictions for variant {v} in infer/predictions.csv")
        labels = np.array([t for t, _ in preds[v].values()])
        pred = np.array([p for _, p in preds[v].values()])
        raw = confusion(pred, labels)
        norm = confusion(pred, labels, normalize=True)
        acc, qwk = accuracy(pred, labels), kappa(pred, labels, "quadratic")
        classification[v] = {"n": int(len(labels)), "accuracy": acc, "kappa_quadratic": qwk, "confusion": raw}
        rows.append([v, len(labels), _fmt(acc), _fmt(qwk)])
        tag = VARIANT_TAGS[v]
        for kind, m, fmt in (("raw", raw, "{:.0f}"), ("normalized", norm, "{:.2f}")):
            stem = f"confusion_{tag}_{kind}"
            (out / f"{stem}.csv").write_text(matrix_to_csv(m, GRADE_LABELS, "label\\pred"))
            heatmap_pgm(out / f"{stem}.pgm", m)
            heatmap_svg(out / f"{stem}.svg", m, GRADE_LABELS, GRADE_LABELS, f"{v} ({kind})", fmt=fmt)
            artifacts += [f"{stem}.csv", f"{stem}.pgm", f"{stem}.svg"]
    _write_csv(out / "table4.csv", ["model", "n", "accuracy", "kappa_quadratic"], rows)
    artifacts.append("table4.csv")
    return write_report(out, "eval", C.seed_for(cfg, "classify"),
                        {"detection": detection, "classification": classification}, artifacts)


def cmd_reader_study(cfg: dict, args) -> dict:
    e = cfg["eval"]
    seed = C.seed_for(cfg, "readers")
    preds = _predictions(cfg)
    model_variant = "PA+LAT" if "PA+LAT" in preds else sorted(preds)[0]
    exams = {x.key: x for x in _curated(cfg)["test"] if x.key in preds.get(model_variant, {})}
    n = e["reader_cases"]
    if n > len(exams):
        raise StageError(f"reader study asks for {n} cases but the test set has {len(exams)} graded knees")
    keys = sorted(exams)
    chosen = [keys[i] for i in np.sort(np.random.default_rng(seed).choice(len(keys), size=n, replace=False))]
    readers = default_readers(seed, e["reader_swap_probabilities"], e["reader_biases"])
    rows = []
    for k in chosen:
        x = exams[k]
        for r in readers:
            rows.append(dict(case_id=k, rater_id=r.name, role="reader", grade=simulate_reader(r, x)))
        rows.append(dict(case_id=k, rater_id="reference", role="reference", grade=x.kl_grade))
        rows.append(dict(case_id=k, rater_id="model", role="model", grade=preds[model_variant][k][1]))
    table = RatingsTable.from_long(rows)
    out = _stage_dir(cfg, "reader_study")
    (out / "ratings.csv").write_text(table.to_csv())
    artifacts = ["ratings.csv", "summary.csv"]
    matrices, summary = {}, {}
    for scheme in SCHEMES:
        m = pairwise_kappa_matrix(table, scheme)
        matrices[scheme] = m
        summary[scheme] = reader_study_summary(m, table.rater_ids, table.roles)
        (out / f"kappa_{scheme}.csv").write_text(matrix_to_csv(m, table.rater_ids, "rater"))
        heatmap_svg(out / f"kappa_{scheme}.svg", m, table.rater_ids, table.rater_ids,
                    f"{scheme}-weighted kappa", vmax=1.0)
        artifacts += [f"kappa_{scheme}.csv", f"kappa_{scheme}.svg"]
    _write_csv(out / "summary.csv", ["scheme", "mean_reader_pairs", "mean_model_vs_readers",
                                     "mean_readers_vs_reference"],
               [[s, *(_fmt(summary[s][k]) for k in ("mean_reader_pairs", "mean_model_vs_readers",
                                                     "mean_readers_vs_reference"))] for s in SCHEMES])
    metrics = {"n_cases": n, "n_reader_labels": int(sum(r["role"] == "reader" for r in rows)),
               "model_variant": model_variant, "raters": table.rater_ids,
               "kappa": matrices, "summary": summary}
    return write_report(out, "reader-study", seed, metrics, artifacts)


COMMANDS = {
    "generate": cmd_generate,
    "curate": cmd_curate,
    "train-detector": cmd_train_detector,
    "train-classifier": cmd_train_classifier,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "reader-study": cmd_reader_study,
}

HELP = {
    "generate": "render a phantom cohort with manifest and centre annotations",
    "curate": "apply exclusions, map grades and split by patient",
    "train-detector": "train the knee-joint grid detectors",
    "train-classifier": "train the KL-grade classifiers (LAT, PA, PA+LAT)",
    "infer": "grade every test knee end to end",
    "eval": "detection table, accuracy/kappa table and confusion matrices",
    "reader-study": "simulated readers vs reference vs model, pairwise kappa",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="klp", description="Knee KL-grading pipeline on synthetic radiographs.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")
    for name in COMMANDS:
        s = sub.add_parser(name, help=HELP[name])
        s.add_argument("--config", required=True, help="run configuration (JSON)")
        s.add_argument("--seed", type=int, help="overrides seeds.global")
        s.add_argument("--output", help="overrides output_dir")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "generate":
            s.add_argument("--patients", type=int, help="overrides phantom.n_patients")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        text, cfg = C.load(args.config)
        if args.seed is not None:
            cfg["seeds"]["global"] = args.seed
        if args.output is not None:
            cfg["output_dir"] = args.output
        threads = int(os.environ.get("KLP_THREADS", "1"))
        if threads < 1:
            raise C.ConfigError("KLP_THREADS must be a positive integer")
    except (C.ConfigError, ValueError) as exc:
        print(f"klp: config error: {exc}", file=sys.stderr)
        return 2
    stage_dirs = {"generate": "cohort", "train-detector": "detect", "train-classifier": "classify",
                  "reader-study": "reader_study"}
    try:
        with threadpool_limits(limits=threads):
            d = _stage_dir(cfg, stage_dirs.get(args.command, args.command))
            (d / "config.json").write_text(text)
            COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"klp: {exc}", file=sys.stderr)
        return 2
    except (StageError, FileNotFoundError, KeyError, ValueError, OSError) as exc:
        print(f"klp {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
