"""
Two-stage fluence prediction
============================

Stage 1 predicts dose slice by slice from CT and contours. The predicted
dose is collapsed to one map, and Stage 2 turns it into one fluence map per
beam given the beam angle. Stage 2 is trained once with plain MSE and once
with the fluence-aware loss, on top of the same frozen Stage-1 model, and
both are scored against the per-pixel mean of the training fluences.
"""

from __future__ import annotations

import argparse

import numpy as np

from fluencelab import MemoryDataset, PhantomConfig, generate_dataset
from fluencelab.models import BackboneConfig, configure_torch
from fluencelab.training import (TrainConfig, evaluate_mean_baseline, evaluate_two_stage, train_stage1,
                                 train_stage2)

parser = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
parser.add_argument("--cases", type=int, default=16)
parser.add_argument("--epochs", type=int, default=6)
parser.add_argument("--backbone", default="conv_unet_s", choices=("conv_unet_s", "win_attn_s"))
args = parser.parse_args()

configure_torch(True)
cases, manifest = generate_dataset(PhantomConfig(), args.cases)
ds = MemoryDataset(cases, manifest)
backbone = BackboneConfig(kind=args.backbone, features=8)
test = ds.split("test")

stage1 = train_stage1(ds, TrainConfig(stage=1, epochs=args.epochs, lr=1e-3), backbone)
print(f"stage 1: best {stage1.selected_on} loss {stage1.best_loss:.5f} at epoch {stage1.best_epoch}")


def show(rows):
    means = {k: np.mean([r[k] for r in rows]) for k in ("mae", "energy_err_pct", "psnr_db", "ssim")}
    print(f"{rows[0]['run_id']:>14}: mae {means['mae']:.4f}  energy {means['energy_err_pct']:.2f} %  "
          f"psnr {means['psnr_db']:.2f} dB  ssim {means['ssim']:.4f}")


show(evaluate_mean_baseline(ds.split("train"), test, manifest))
for loss in ("mse", "far"):
    stage2 = train_stage2(ds, stage1.model, TrainConfig(stage=2, epochs=args.epochs, lr=1e-3, loss=loss), backbone)
    show(evaluate_two_stage(stage1.model, stage2.model, test, manifest, loss))
