"""Desk-scale E1 campaign: grid reference, ten searches and the category report.

Usage: python scripts/desk_campaign.py [OUT_DIR] [--seeds N] [--campaign-seed S]
"""

import argparse
import sys
from pathlib import Path

from seqsearch.cli import main


def run(out: Path, seeds: int, campaign_seed: int, exp: str) -> int:
    grid = out / "grid"
    steps = [
        ["grid", "--exp", exp, "--voxels", "2000", "--seed", "0", "--out", str(grid)],
        ["search", "--exp", exp, "--seeds", str(seeds), "--campaign-seed", str(campaign_seed),
         "--out", str(out / "campaign")],
        ["report", str(out / "campaign"), "--grid", str(grid / "grid_summary.json"), "--out", str(out / "report")],
    ]
    for argv in steps:
        print("$ seqsearch", " ".join(argv), flush=True)
        rc = main(argv)
        if rc:
            return rc
    return 0


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out", nargs="?", default="runs/desk_e1")
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--campaign-seed", type=int, default=0)
    ap.add_argument("--exp", default="E1")
    a = ap.parse_args()
    sys.exit(run(Path(a.out), a.seeds, a.campaign_seed, a.exp))
