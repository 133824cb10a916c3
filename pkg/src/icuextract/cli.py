"""Command-line entry point: gensynth, extract, prep, eval, report."""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd

from . import benchprep, evaluation, synthgen
from .cohort import NegativeAge, read_patients, select_cohort, write_patients
from .ingest import IngestError, attach_stay_to_lab_events, load_source_dataset
from .interventions import UnknownInterventionName, build_intervention_grid, read_interventions, write_interventions
from .resources import (
    ConfigError,
    ResourceError,
    parse_bool,
    default_resource,
    load_config,
    load_item_map,
    load_variable_ranges,
)
from .timeseries import UnknownUnit, aggregate_hourly, filter_missingness, read_grid, summarize_missingness, write_grid

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4

ITEM_MAP_FILE = "itemid_to_variable_map.csv"
RANGES_FILE = "variable_ranges.csv"
EXTRACT_OUTPUTS = ("patients.csv", "vitals_labs.csv", "vitals_labs_mean.csv", "interventions.csv")
FIXED_TASKS = ("mort_icu", "mort_hosp", "los3", "los7")
DYNAMIC_TASKS = ("vent", "vaso")
REPORT_SECTIONS = (
    ("Ethnicity", "ethnicity"),
    ("Age", "age_bucket"),
    ("Insurance Type", "insurance"),
    ("Admission Type", "admission_type"),
    ("First Careunit", "first_careunit"),
)


class MissingTables(FileNotFoundError):
    pass


class StageError(Exception):
    def __init__(self, stage: str, code: int, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.code = code


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, benchprep.BadRatios, synthgen.BadParams)):
        return EXIT_CONFIG
    if isinstance(
        exc,
        (
            IngestError,
            ResourceError,
            NegativeAge,
            UnknownInterventionName,
            UnknownUnit,
            evaluation.DegenerateLabels,
            FileNotFoundError,
        ),
    ):
        return EXIT_DATA
    return EXIT_INTERNAL


class Timer:
    """Per-stage wall-clock record; exceptions are re-raised tagged with the stage name."""

    def __init__(self):
        self.seconds: dict[str, float] = {}

    @contextlib.contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, exit_code_for(exc), exc) from exc
        self.seconds[name] = round(time.perf_counter() - t0, 3)


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def _require(directory: Path, names) -> None:
    missing = [n for n in names if not (directory / n).is_file()]
    if missing:
        raise MissingTables(f"{directory}: missing {', '.join(missing)}")


def _resource_paths(resources_dir) -> dict[str, Path]:
    if resources_dir is None:
        return {ITEM_MAP_FILE: default_resource(ITEM_MAP_FILE), RANGES_FILE: default_resource(RANGES_FILE)}
    d = Path(resources_dir)
    return {ITEM_MAP_FILE: d / ITEM_MAP_FILE, RANGES_FILE: d / RANGES_FILE}


# ---------------------------------------------------------------- gensynth


def cmd_gensynth(args) -> dict:
    timer = Timer()
    with timer.stage("gensynth"):
        params = synthgen.GenParams(
            n_subjects=args.n_subjects,
            mortality_signal=args.mortality_signal,
            seed=args.seed,
        )
        out = Path(args.out_dir)
        truth = synthgen.generate_to(out, params, truth_dir=args.truth_dir or out)
    print(f"gensynth: wrote {out} ({len(truth.stays)} stays)")
    return {"stays": len(truth.stays)}


# ---------------------------------------------------------------- extract


def cmd_extract(args) -> dict:
    timer = Timer()
    out = Path(args.out_dir)
    with timer.stage("config"):
        group = None if args.group_by_level2 is None else parse_bool(args.group_by_level2)
        cfg = load_config(
            args.config,
            min_age=args.min_age,
            min_duration=args.min_duration,
            max_duration=args.max_duration,
            group_by_level2=group,
            min_percent=args.min_percent,
        )
        if args.threads < 1:
            raise ConfigError(f"--threads must be at least 1, got {args.threads}")
    with timer.stage("resources"):
        res_paths = _resource_paths(args.resources_dir)
        item_map = load_item_map(res_paths[ITEM_MAP_FILE])
        ranges = load_variable_ranges(res_paths[RANGES_FILE])
    with timer.stage("ingest"):
        ds = load_source_dataset(args.source_dir, threads=args.threads)
    with timer.stage("cohort"):
        cohort = select_cohort(ds, cfg)
    with timer.stage("attach_labs"):
        events, n_unattached = attach_stay_to_lab_events(ds.events, ds.icustays)
    with timer.stage("timeseries"):
        grid, report = aggregate_hourly(events, cohort, item_map, ranges, cfg, threads=args.threads)
        grid, dropped = filter_missingness(grid, cfg.min_percent)
    with timer.stage("interventions"):
        igrid = build_intervention_grid(ds.intervention_events, cohort)
    with timer.stage("write"):
        out.mkdir(parents=True, exist_ok=True)
        write_patients(cohort, out / "patients.csv")
        write_grid(grid, out / "vitals_labs.csv")
        write_grid(grid, out / "vitals_labs_mean.csv", stats=("mean",))
        write_interventions(igrid, out / "interventions.csv")

    manifest = {
        "command": "extract",
        "config": cfg.to_dict(),
        "config_hash": benchprep.config_hash(cfg.to_dict()),
        "inputs": dict(sorted(ds.digests.items())),
        "input_rows": ds.counts(),
        "resources": {name: file_digest(p) for name, p in res_paths.items()},
        "cohort_size": len(cohort),
        "exclusions": cohort.exclusions,
        "lab_events_unattached": int(n_unattached),
        "variables_kept": list(grid.variables),
        "variables_dropped": dropped,
        "outliers": report.to_dict(),
        "outputs": {name: file_digest(out / name) for name in EXTRACT_OUTPUTS},
        "runtime": {"threads": args.threads, "wall_clock_seconds": timer.seconds},
    }
    write_json(manifest, out / "manifest.json")
    print(
        f"extract: {len(cohort)} stays, {len(grid.variables)} variables kept, "
        f"{len(dropped)} dropped, {n_unattached} lab events unattached -> {out}"
    )
    return manifest


# ---------------------------------------------------------------- prep


def _sample_frame(samples: benchprep.SampleSet, dynamic: bool) -> pd.DataFrame:
    frame = samples.to_frame()
    if dynamic:
        sample_id = frame["icustay_id"].astype(str) + "_" + frame["t"].astype(str)
    else:
        sample_id = frame["icustay_id"].astype(str)
    frame.insert(0, "sample_id", sample_id)
    return frame


def cmd_prep(args) -> dict:
    timer = Timer()
    src = Path(args.extract_dir)
    out = Path(args.out_dir or args.extract_dir)
    with timer.stage("prep-load"):
        needed = ["patients.csv", "vitals_labs.csv"] + (["interventions.csv"] if args.task == "dynamic" else [])
        _require(src, needed)
        cohort = read_patients(src / "patients.csv")
        grid = read_grid(src / "vitals_labs.csv")
    with timer.stage("prep-split"):
        ratios = tuple(float(x) for x in args.ratios.split(","))
        split = benchprep.split_cohort(cohort.table["subject_id"], ratios, seed=args.seed)
        stats = benchprep.compute_train_stats(grid, split)
    sidecar = {
        "task": args.task,
        "seed": args.seed,
        "ratios": list(ratios),
        "split_assignment": {str(k): v for k, v in split.items()},
        "split_counts": split.value_counts().reindex(benchprep.SPLITS, fill_value=0).astype(int).to_dict(),
        "train_stats": {v: {"mean": float(r["mean"]), "std": float(r["std"])} for v, r in stats.iterrows()},
        "variables": list(grid.variables),
    }
    out.mkdir(parents=True, exist_ok=True)
    with timer.stage("prep-samples"):
        if args.task == "fixed":
            sentinel = benchprep.FIXED_HOURS + 1
            samples = benchprep.build_fixed_samples(grid, cohort, split, stats, sentinel=sentinel)
            path = out / "samples_fixed.csv"
            _sample_frame(samples, dynamic=False).to_csv(path, index=False, lineterminator="\n")
            n = len(samples)
            sidecar.update(sentinel=sentinel, hours=benchprep.FIXED_HOURS, min_hours=benchprep.FIXED_MIN_HOURS)
        else:
            sentinel = benchprep.WINDOW_HOURS + 1
            igrid = read_interventions(src / "interventions.csv")
            delta_stats = benchprep.dynamic_delta_stats(grid, cohort, split)
            vocab = benchprep.static_vocabulary(cohort)
            path = out / "samples_dynamic.csv"
            n = 0
            with open(path, "w", encoding="utf-8", newline="") as fh:
                for chunk in benchprep.iter_dynamic_samples(
                    grid, igrid, cohort, split, stats, args.target, delta_stats, sentinel, vocab=vocab
                ):
                    _sample_frame(chunk, dynamic=True).to_csv(fh, index=False, header=(n == 0), lineterminator="\n")
                    n += len(chunk)
            sidecar.update(
                target=args.target,
                sentinel=sentinel,
                window_hours=benchprep.WINDOW_HOURS,
                gap_hours=benchprep.GAP_HOURS,
                prediction_hours=benchprep.PREDICTION_HOURS,
                static_vocabulary=vocab,
                delta_stats={v: {"mean": float(r["mean"]), "std": float(r["std"])} for v, r in delta_stats.iterrows()},
            )
    sidecar["n_samples"] = n
    sidecar["config_hash"] = benchprep.config_hash(sidecar)
    write_json(sidecar, path.with_suffix(".json"))
    print(f"prep: {n} {args.task} samples -> {path}")
    return sidecar


# ---------------------------------------------------------------- eval


def feature_names(columns) -> list[str]:
    return [c for c in columns if "__" in c or c == "time_of_day"]


def cmd_eval(args) -> dict:
    timer = Timer()
    with timer.stage("eval-load"):
        path = Path(args.samples)
        if not path.is_file():
            raise MissingTables(f"{path}: samples file not found")
        frame = pd.read_csv(path, dtype={"sample_id": str})
        dynamic = args.task in DYNAMIC_TASKS
        label_col = f"label_{args.task}" if dynamic else args.task
        if label_col not in frame.columns:
            raise ConfigError(f"task {args.task!r} has no label column in {path}")
        test = frame.loc[frame["split"] == "test"]
    result: dict = {"task": args.task, "samples": str(path), "n_test": int(len(test))}
    with timer.stage("eval-score"):
        if args.predictions:
            preds = pd.read_csv(args.predictions, dtype={"id": str}).set_index("id")
            missing = test["sample_id"][~test["sample_id"].isin(preds.index)]
            if len(missing):
                raise ValueError(f"predictions lack {len(missing)} test ids, e.g. {missing.iloc[0]}")
            preds = preds.reindex(test["sample_id"])
            result["source"] = str(args.predictions)
        else:
            train = frame.loc[frame["split"] == "train"]
            cols = feature_names(frame.columns)
            kwargs = dict(l2=args.l2, epochs=args.epochs, lr=args.lr, seed=args.seed)
            if dynamic:
                models = evaluation.train_one_vs_rest(
                    train[cols].to_numpy(float), train[label_col].to_numpy(), benchprep.WINDOW_CLASSES, **kwargs
                )
                probs = evaluation.predict_one_vs_rest(models, test[cols].to_numpy(float))
                preds = pd.DataFrame(probs, columns=list(benchprep.WINDOW_CLASSES), index=test["sample_id"])
            else:
                model = evaluation.train_logreg(train[cols].to_numpy(float), train[label_col].to_numpy(), **kwargs)
                preds = pd.DataFrame({"score": model.predict_proba(test[cols].to_numpy(float))}, index=test["sample_id"])
            result["source"] = "baseline:logreg"
            result["baseline"] = kwargs
        if dynamic:
            classes = list(benchprep.WINDOW_CLASSES)
            probs = preds[classes].to_numpy(float)
            result["metrics"] = evaluation.evaluate_multiclass(probs, test[label_col].to_numpy(), classes)
        else:
            report = evaluation.evaluate_binary(preds["score"].to_numpy(float), test[label_col].to_numpy(), args.threshold)
            result["metrics"] = report.__dict__.copy()
            result["metrics_percent"] = report.as_percent()
    out = Path(args.out) if args.out else path.with_name(f"metrics_{args.task}.json")
    write_json(result, out)
    m = result["metrics"]
    headline = m.get("auroc", m.get("macro_auroc"))
    print(f"eval: {args.task} AUROC {headline:.4f} on {len(test)} test samples -> {out}")
    return result


# ---------------------------------------------------------------- report


def rounded_percentages(counts, decimals: int = 1) -> list[float]:
    """Percentages of ``counts`` rounded so they sum exactly to 100 (largest remainder)."""
    counts = np.asarray(counts, dtype=float)
    total = counts.sum()
    if total == 0:
        return [0.0] * len(counts)
    scale = 10**decimals
    raw = counts * 100.0 * scale / total
    floor = np.floor(raw).astype(int)
    short = 100 * scale - int(floor.sum())
    order = np.argsort(-(raw - floor), kind="mergesort")
    floor[order[:short]] += 1
    return [round(x / scale, decimals) for x in floor.tolist()]


def cohort_summary(cohort_table: pd.DataFrame) -> pd.DataFrame:
    """Gender cross-tab over the demographic sections with total counts and percentages."""
    table = cohort_table.assign(age_bucket=cohort_table["age"].map(benchprep.age_bucket))
    genders = sorted(table["gender"].astype(str).unique())
    rows = []
    for section, col in REPORT_SECTIONS:
        tab = pd.crosstab(table[col].astype(str), table["gender"].astype(str)).reindex(columns=genders, fill_value=0)
        if col == "age_bucket":
            tab = tab.reindex([b for b in benchprep.AGE_BUCKETS if b in tab.index])
        else:
            tab = tab.assign(_t=tab.sum(axis=1)).sort_values(["_t"], kind="mergesort").drop(columns="_t")
        totals = tab.sum(axis=1)
        for (cat, counts), total, pct in zip(tab.iterrows(), totals, rounded_percentages(totals)):
            rows.append({"section": section, "category": cat, **counts.to_dict(), "total": int(total), "total_pct": pct})
    g = table["gender"].astype(str).value_counts().reindex(genders, fill_value=0)
    rows.append({"section": "Total", "category": "", **g.to_dict(), "total": int(len(table)), "total_pct": 100.0})
    out = pd.DataFrame(rows, columns=["section", "category", *genders, "total", "total_pct"])
    return out


def render_summary(summary: pd.DataFrame) -> str:
    genders = [c for c in summary.columns if c not in ("section", "category", "total", "total_pct")]
    total_row = summary.iloc[-1]
    header = ["", "", *genders, "Total"]
    lines = []
    last = None
    for _, r in summary.iterrows():
        section = r["section"] if r["section"] != last else ""
        last = r["section"]
        if r["section"] == "Total":
            pcts = rounded_percentages([total_row[g] for g in genders])
            cells = [f"{int(r[g]):,} ({p}%)" for g, p in zip(genders, pcts)]
        else:
            cells = [f"{int(r[g]):,}" for g in genders]
        lines.append([section, str(r["category"]), *cells, f"{int(r['total']):,} ({r['total_pct']}%)"])
    widths = [max(len(row[i]) for row in [header, *lines]) for i in range(len(header))]
    fmt = lambda row: "  ".join(c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
    return "\n".join([fmt(header), *(fmt(row) for row in lines)]) + "\n"


def cmd_report(args) -> dict:
    timer = Timer()
    src = Path(args.extract_dir)
    out = Path(args.out_dir or args.extract_dir)
    with timer.stage("report"):
        _require(src, ["patients.csv", "vitals_labs.csv"])
        cohort = read_patients(src / "patients.csv")
        grid = read_grid(src / "vitals_labs.csv")
        summary = cohort_summary(cohort.table)
        presence = summarize_missingness(grid)
        out.mkdir(parents=True, exist_ok=True)
        summary.to_csv(out / "cohort_summary.csv", index=False, lineterminator="\n")
        (out / "cohort_summary.txt").write_text(render_summary(summary), encoding="utf-8")
        presence.to_csv(out / "missingness.csv", index=False, lineterminator="\n")
    print(render_summary(summary), end="")
    print(f"report: {len(cohort)} stays, {len(presence)} variables -> {out}")
    return {"summary": summary, "presence": presence}


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="icuextract", description="ICU cohort extraction and benchmark preparation.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gensynth", help="write a synthetic source directory with ground truth")
    g.add_argument("--out-dir", required=True)
    g.add_argument("--truth-dir")
    g.add_argument("--n-subjects", type=int, default=5000)
    g.add_argument("--mortality-signal", type=float, default=synthgen.GenParams.mortality_signal)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gensynth)

    e = sub.add_parser("extract", help="build patients, hourly vitals/labs and intervention tables")
    e.add_argument("--source-dir", required=True)
    e.add_argument("--resources-dir")
    e.add_argument("--out-dir", required=True)
    e.add_argument("--config")
    e.add_argument("--min-age", type=float)
    e.add_argument("--min-duration", type=float)
    e.add_argument("--max-duration", type=float)
    e.add_argument("--group-by-level2", metavar="BOOL")
    e.add_argument("--min-percent", type=float)
    e.add_argument("--threads", type=int, default=1)
    e.add_argument("--seed", type=int, default=0, help="accepted for symmetry; extraction draws no randomness")
    e.set_defaults(func=cmd_extract)

    pr = sub.add_parser("prep", help="build fixed-window or sliding-window samples")
    pr.add_argument("--extract-dir", required=True)
    pr.add_argument("--out-dir")
    pr.add_argument("--task", choices=("fixed", "dynamic"), default="fixed")
    pr.add_argument("--target", choices=DYNAMIC_TASKS, default="vent")
    pr.add_argument("--ratios", default="0.7,0.15,0.15")
    pr.add_argument("--seed", type=int, default=0)
    pr.set_defaults(func=cmd_prep)

    ev = sub.add_parser("eval", help="score predictions or the logistic baseline on the test split")
    ev.add_argument("--samples", required=True)
    ev.add_argument("--task", choices=FIXED_TASKS + DYNAMIC_TASKS, required=True)
    ev.add_argument("--baseline", choices=("logreg",), default="logreg")
    ev.add_argument("--predictions", help="CSV with columns id,score (or id plus one column per class)")
    ev.add_argument("--threshold", type=float, default=0.5)
    ev.add_argument("--l2", type=float, default=1e-2)
    ev.add_argument("--epochs", type=int, default=300)
    ev.add_argument("--lr", type=float, default=0.5)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--out")
    ev.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="cohort cross-tab and per-variable presence")
    r.add_argument("--extract-dir", required=True)
    r.add_argument("--out-dir")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except StageError as exc:
        print(f"icuextract {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except Exception as exc:  # failures outside a named stage
        print(f"icuextract {args.command}: [{args.command}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
