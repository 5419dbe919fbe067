"""Directional study: FAR vs MSE, two-stage vs single-stage, across backbones.

One phantom dataset is shared by every training seed. Per seed and backbone
a Stage-1 dose model is trained once and reused by the Stage-2 variants; a
single-stage model (anatomy straight to fluence, MSE loss) and the naive
per-pixel mean-fluence predictor give the reference points. All runs are
scored on the test split.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import MemoryDataset
from .metrics import METRIC_COLUMNS, METRICS, write_csv
from .models import BackboneConfig
from .phantom import PhantomConfig, generate_dataset
from .training import (TrainConfig, evaluate_mean_baseline, evaluate_single_stage, evaluate_two_stage,
                       train_single_stage, train_stage1, train_stage2)

BASELINE = "mean_baseline"


@dataclass(frozen=True)
class StudyConfig:
    n_cases: int = 32
    phantom: PhantomConfig = PhantomConfig()
    seeds: tuple[int, ...] = (0, 1, 2)
    backbones: tuple[str, ...] = ("win_attn_s", "conv_unet_s")
    single_stage_backbone: str = "win_attn_s"
    features: int = 8
    levels: int = 2
    lr: float = 1e-3
    batch_size: int = 16
    stage1_epochs: int = 6
    stage2_epochs: int = 10

    def backbone(self, kind: str) -> BackboneConfig:
        return BackboneConfig(kind=kind, features=self.features, levels=self.levels)

    def train_config(self, stage: int, seed: int, loss: str = "mse") -> TrainConfig:
        epochs = self.stage1_epochs if stage == 1 else self.stage2_epochs
        return TrainConfig(stage=stage, lr=self.lr, batch_size=self.batch_size, epochs=epochs,
                           loss=loss, seed=seed)


@dataclass
class StudyResult:
    config: StudyConfig
    rows: list[dict] = field(default_factory=list)      # per-case rows, run_id = "s{seed}/{run}"
    seconds: float = 0.0

    def mean(self, seed: int, run: str, metric: str) -> float:
        vals = [r[metric] for r in self.rows if r["run_id"] == f"s{seed}/{run}"]
        if not vals:
            raise KeyError(f"no rows for seed {seed}, run {run!r}")
        return float(np.mean(vals))

    def runs(self) -> list[str]:
        return sorted({r["run_id"].split("/", 1)[1] for r in self.rows})

    def table(self) -> list[dict]:
        """One row per (seed, run) with the test-split means of every metric."""
        out = []
        for seed in self.config.seeds:
            for run in self.runs():
                out.append({"seed": seed, "run": run, **{m: self.mean(seed, run, m) for m in METRICS}})
        return out


def study_dataset(config: StudyConfig) -> MemoryDataset:
    cases, manifest = generate_dataset(config.phantom, config.n_cases)
    return MemoryDataset(cases, manifest)


def _tag(rows, seed):
    for r in rows:
        r["run_id"] = f"s{seed}/{r['run_id']}"
    return rows


def run_study(config: StudyConfig = StudyConfig(), dataset=None, out_dir=None, log=None) -> StudyResult:
    """Train and score every run of the study; optionally write CSVs to ``out_dir``."""
    start = time.perf_counter()
    dataset = dataset if dataset is not None else study_dataset(config)
    manifest = dataset.manifest
    test = dataset.split("test")
    if not test:
        raise ValueError("the study needs a non-empty test split")
    result = StudyResult(config)
    baseline = evaluate_mean_baseline(dataset.split("train"), test, manifest, BASELINE)
    for seed in config.seeds:
        result.rows += _tag([dict(r) for r in baseline], seed)
        for kind in config.backbones:
            backbone = config.backbone(kind)
            stage1 = train_stage1(dataset, config.train_config(1, seed), backbone).model
            for loss in ("mse", "far"):
                stage2 = train_stage2(dataset, stage1, config.train_config(2, seed, loss), backbone).model
                result.rows += _tag(evaluate_two_stage(stage1, stage2, test, manifest, f"{kind}/{loss}"), seed)
            if kind == config.single_stage_backbone:
                single = train_single_stage(dataset, config.train_config(2, seed, "mse"), backbone).model
                result.rows += _tag(evaluate_single_stage(single, test, manifest, f"{kind}/single"), seed)
        if log is not None:
            log(f"seed {seed} done after {time.perf_counter() - start:.0f} s")
    result.seconds = time.perf_counter() - start
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "metrics.csv", result.rows, METRIC_COLUMNS)
        write_csv(out / "study.csv", result.table(), ("seed", "run") + METRICS)
    return result
