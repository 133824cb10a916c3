"""Full pipeline on a synthetic source: gensynth -> extract -> report -> prep -> eval.

Prints baseline metrics for the four fixed-window tasks and the two
intervention targets, as percentages with one decimal.

Usage: python3 scripts/run_synthetic_benchmark.py [--n-subjects 1500] [--seed 0] [--work-dir DIR]
"""

import argparse
import json
import tempfile
from pathlib import Path

from icuextract.cli import DYNAMIC_TASKS, FIXED_TASKS, main


def run(*argv: str) -> None:
    code = main(list(argv))
    if code:
        raise SystemExit(code)


def benchmark(work: Path, n_subjects: int, seed: int) -> dict:
    src, out, prep = work / "source", work / "extract", work / "samples"
    run("gensynth", "--out-dir", str(src), "--n-subjects", str(n_subjects), "--seed", str(seed))
    run("extract", "--source-dir", str(src), "--out-dir", str(out))
    run("report", "--extract-dir", str(out))
    run("prep", "--extract-dir", str(out), "--out-dir", str(prep), "--task", "fixed", "--seed", str(seed))
    rows = {}
    for task in FIXED_TASKS:
        run("eval", "--samples", str(prep / "samples_fixed.csv"), "--task", task)
        rows[task] = json.loads((prep / f"metrics_{task}.json").read_text())["metrics_percent"]
    for target in DYNAMIC_TASKS:
        d = prep / target
        run("prep", "--extract-dir", str(out), "--out-dir", str(d), "--task", "dynamic", "--target", target, "--seed", str(seed))
        run("eval", "--samples", str(d / "samples_dynamic.csv"), "--task", target)
        m = json.loads((d / f"metrics_{target}.json").read_text())["metrics"]
        rows[target] = {
            "auroc": round(100 * m["macro_auroc"], 1) if m["macro_auroc"] is not None else None,
            "auprc": round(100 * m["macro_auprc"], 1) if m["macro_auprc"] is not None else None,
            "accuracy": round(100 * m["accuracy"], 1),
            "f1": round(100 * m["macro_f1"], 1),
        }
    return rows


def main_() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n-subjects", type=int, default=1500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--work-dir")
    args = p.parse_args()
    if args.work_dir:
        rows = benchmark(Path(args.work_dir), args.n_subjects, args.seed)
    else:
        with tempfile.TemporaryDirectory() as tmp:
            rows = benchmark(Path(tmp), args.n_subjects, args.seed)
    print(f"\n{'task':<10}{'AUROC':>8}{'AUPRC':>8}{'Acc':>8}{'F1':>8}")
    for task, r in rows.items():
        print(f"{task:<10}" + "".join(f"{r[k]!s:>8}" for k in ("auroc", "auprc", "accuracy", "f1")))


if __name__ == "__main__":
    main_()
