"""
Desk-scale ablation
===================

Generates the synthetic benchmark, trains the five switch configurations
and prints a mIoU table.  One seed by default (a few minutes on one core);
pass ``--seeds 0,1,2,3,4`` for the full table.
"""

import argparse
import os
from pathlib import Path

from geot.benchmark import desk_config, ensure_desk_data
from geot.cli import run_ablation

ap = argparse.ArgumentParser()
ap.add_argument("--out", default="desk_ablation")
ap.add_argument("--seeds", default="0")
args = ap.parse_args()

out = Path(args.out)
data = ensure_desk_data(out / "data")
seeds = [int(s) for s in args.seeds.split(",")]
result = run_ablation(desk_config(data), seeds, out_dir=out, workers=int(os.environ.get("GEOT_THREADS", "0")))
result.write_csv(out / "ablation.csv")

# %%
table = result.table("miou")
print(f"{'config':12s} " + " ".join(f"seed{s:<5d}" for s in seeds) + "  mean")
for name in result.names:
    row = " ".join(f"{100 * table[name][s]:8.2f}" for s in seeds)
    print(f"{name:12s} {row}  {100 * result.mean(name):6.2f}")
