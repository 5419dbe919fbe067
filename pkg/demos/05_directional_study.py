"""
Directional study across seeds and backbones
============================================

The full study behind the acceptance suite: a 32-case phantom set, three
training seeds, two backbones, Stage-2 with MSE and with the fluence-aware
loss, a single-stage model and the naive mean predictor. It takes roughly a
quarter of an hour on one CPU core; ``--quick`` shrinks it for a smoke run.
"""

from __future__ import annotations

import argparse
from dataclasses import replace
from pathlib import Path

from fluencelab.models import configure_torch
from fluencelab.study import BASELINE, StudyConfig, run_study

parser = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
parser.add_argument("--quick", action="store_true", help="12 cases, one seed, two epochs per stage")
parser.add_argument("--out", type=Path, default=None, help="write metrics.csv and study.csv here")
args = parser.parse_args()

configure_torch(True)
config = StudyConfig()
if args.quick:
    config = replace(config, n_cases=12, seeds=(0,), stage1_epochs=2, stage2_epochs=2)
result = run_study(config, out_dir=args.out, log=print)

print(f"{'seed':>4} {'run':>20} {'energy %':>9} {'ssim':>7} {'mae':>7}")
for row in result.table():
    print(f"{row['seed']:>4} {row['run']:>20} {row['energy_err_pct']:9.2f} {row['ssim']:7.4f} {row['mae']:7.4f}")
for kind in config.backbones:
    wins = sum(result.mean(s, f"{kind}/far", "energy_err_pct") < result.mean(s, f"{kind}/mse", "energy_err_pct")
               for s in config.seeds)
    print(f"{kind}: fluence-aware loss beats MSE on energy error in {wins}/{len(config.seeds)} seeds")
print(f"naive baseline run id: {BASELINE}; total {result.seconds:.0f} s")
