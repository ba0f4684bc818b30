"""Run the desk-scale reference grid for every experiment and print the optima."""

import argparse
import json
from pathlib import Path

from seqsearch.cli import EXPERIMENTS, main


def run(out: Path, voxels: int, full: bool):
    for exp in EXPERIMENTS:
        argv = ["grid", "--exp", exp, "--voxels", str(voxels), "--out", str(out / exp)]
        if full:
            argv += ["--full", "--force"]
        if main(argv):
            raise SystemExit(f"grid failed for {exp}")
        o = json.loads((out / exp / "grid_summary.json").read_text())["optimum"]
        print(json.dumps({"experiment": exp, **o}), flush=True)


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out", nargs="?", default="runs/grids")
    ap.add_argument("--voxels", type=int, default=2000)
    ap.add_argument("--full", action="store_true", help="full-resolution grids (slow)")
    a = ap.parse_args()
    run(Path(a.out), a.voxels, a.full)
