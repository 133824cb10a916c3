"""Time `extract` on a synthetic source and confirm outputs do not depend on --threads.

Usage: python3 scripts/bench_extract.py [--n-subjects 5000] [--seed 3] [--threads 1 2 4]
"""

import argparse
import json
import tempfile
import time
from pathlib import Path

from icuextract.cli import EXTRACT_OUTPUTS, file_digest, main


def main_() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n-subjects", type=int, default=5000)
    p.add_argument("--seed", type=int, default=3)
    p.add_argument("--threads", type=int, nargs="+", default=[1, 2, 4])
    args = p.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        main(["gensynth", "--out-dir", str(tmp / "src"), "--n-subjects", str(args.n_subjects), "--seed", str(args.seed)])
        digests = {}
        for threads in args.threads:
            out = tmp / f"out{threads}"
            t0 = time.perf_counter()
            code = main(["extract", "--source-dir", str(tmp / "src"), "--out-dir", str(out), "--threads", str(threads)])
            elapsed = time.perf_counter() - t0
            stages = json.loads((out / "manifest.json").read_text())["runtime"]["wall_clock_seconds"]
            digests[threads] = tuple(file_digest(out / f) for f in EXTRACT_OUTPUTS)
            print(f"threads={threads}: exit {code}, {elapsed:.1f}s  " + " ".join(f"{k}={v}" for k, v in stages.items()))
        print("outputs identical across thread counts:", len(set(digests.values())) == 1)


if __name__ == "__main__":
    main_()
