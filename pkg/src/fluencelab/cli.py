"""Command-line entry point: ``fluencelab gen|train|eval|ablate|gradcheck``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or data
error. Commands that write into a directory refuse a non-empty target
unless ``--force`` is given.
"""

from __future__ import annotations

import argparse
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, format_config, load_config
from .data import Dataset, FormatError, write_dataset, write_pgm
from .losses import COMPONENTS, LossWeights, ScopeConfig, gradcheck, gradcheck_inputs, loss_gradient
from .metrics import METRIC_COLUMNS, SUMMARY_COLUMNS, summarize, write_csv
from .models import infer_plan, load_checkpoint
from .phantom import generate_dataset
from .training import (LOSS_KINDS, TrainingError, evaluate_cases, parse_variant, run_ablation,
                       train_stage1, train_stage2)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
GRADCHECK_COMPONENTS = COMPONENTS + ("far",)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _prepare_dir(path, force: bool) -> Path:
    path = Path(path)
    if path.exists() and not path.is_dir():
        raise UsageError(f"{path} exists and is not a directory")
    if path.is_dir() and any(path.iterdir()):
        if not force:
            raise UsageError(f"output directory {path} is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    return path


def _prepare_file(path, force: bool) -> Path:
    path = Path(path)
    if path.exists() and not force:
        raise UsageError(f"output file {path} exists (use --force to overwrite)")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _config(args) -> RunConfig:
    return load_config(args.config) if getattr(args, "config", None) else RunConfig()


def _checkpoint_dir(path) -> Path:
    p = Path(path)
    if (p / "checkpoint" / "checkpoint.txt").is_file():
        return p / "checkpoint"
    if (p / "checkpoint.txt").is_file():
        return p
    raise FileNotFoundError(f"no checkpoint found at {p}")


# ---------------------------------------------------------------------------
# commands

def cmd_gen(args) -> int:
    if args.cases < 1:
        raise UsageError("--cases must be >= 1")
    cfg = _config(args)
    phantom = cfg.phantom if args.seed is None else replace(cfg.phantom, seed=args.seed)
    out = _prepare_dir(args.out, args.force)
    cases, manifest = generate_dataset(phantom, args.cases)
    write_dataset(out, cases, manifest)
    (out / "config.txt").write_text(format_config(replace(cfg, phantom=phantom)), encoding="utf-8")
    sizes = {s: len(manifest.ids(s)) for s in ("train", "val", "test")}
    print(f"wrote {args.cases} cases to {out} (train/val/test = "
          f"{sizes['train']}/{sizes['val']}/{sizes['test']})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    train_cfg = cfg.stage_config(args.stage)
    if args.deterministic:
        train_cfg = replace(train_cfg, deterministic=True)
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    if args.stage == 2 and not train_cfg.teacher_dose and not args.stage1_ckpt:
        raise UsageError("stage 2 needs --stage1-ckpt (or train.teacher_dose = true)")
    dataset = Dataset(args.data)
    stage1 = None
    if args.stage == 2 and args.stage1_ckpt:
        stage1, _ = load_checkpoint(_checkpoint_dir(args.stage1_ckpt))
    out = _prepare_dir(args.out, args.force)
    if args.stage == 1:
        result = train_stage1(dataset, train_cfg, cfg.backbone, out)
    else:
        result = train_stage2(dataset, stage1, train_cfg, cfg.backbone, out)
    last = result.log[-1]
    print(f"stage {args.stage}: {train_cfg.epochs} epochs, best {result.selected_on} loss "
          f"{result.best_loss:.6g} at epoch {result.best_epoch} (last {last['split']} total {last['total']:.6g})")
    return EXIT_OK


def cmd_eval(args) -> int:
    dataset = Dataset(args.data)
    manifest = dataset.manifest
    cases = dataset.split(args.split)
    if not cases:
        raise TrainingError(f"split {args.split!r} is empty")
    if args.ground_truth:
        def predict_fn(case):
            return case.fluence
    else:
        if not (args.stage1_ckpt and args.stage2_ckpt):
            raise UsageError("eval needs --stage1-ckpt and --stage2-ckpt (or --ground-truth)")
        stage1, meta1 = load_checkpoint(_checkpoint_dir(args.stage1_ckpt))
        stage2, meta2 = load_checkpoint(_checkpoint_dir(args.stage2_ckpt))
        contours = meta1.get("contours", "combined")
        mode = meta2.get("stage2_input", "mean")

        def predict_fn(case):
            return infer_plan(stage1, stage2, case, mode=mode, contours=contours)

    out = _prepare_file(args.out, args.force)
    summary_path = out.with_name(out.stem + "_summary.csv")
    _prepare_file(summary_path, args.force)
    dump = _prepare_dir(args.dump_images, args.force) if args.dump_images else None
    preds = {}

    def recording(case):
        p = np.asarray(predict_fn(case))
        preds[case.case_id] = p
        return p

    rows = evaluate_cases(recording, cases, manifest, args.run_id)
    write_csv(out, rows, METRIC_COLUMNS)
    write_csv(summary_path, summarize(rows), SUMMARY_COLUMNS)
    if dump is not None:
        dump.mkdir(parents=True, exist_ok=True)
        for case in cases:
            for b in range(case.n_beams):
                write_pgm(dump / f"{case.case_id}_beam{b}_pred.pgm", preds[case.case_id][b], manifest.value_range)
                write_pgm(dump / f"{case.case_id}_beam{b}_target.pgm", case.fluence[b], manifest.value_range)
    print(f"evaluated {len(rows)} cases -> {out}")
    return EXIT_OK


def _split_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def cmd_ablate(args) -> int:
    variants = _split_list(args.variants)
    if not variants:
        raise UsageError("--variants is empty")
    for v in variants:
        try:
            parse_variant(v)
        except ValueError:
            raise UsageError(f"unknown variant token {v!r}; valid tokens: {', '.join(LOSS_KINDS)}, "
                             "each optionally followed by :B/B, :B/G, :G/B or :G/G") from None
    try:
        seeds = [int(s) for s in _split_list(args.seeds)]
    except ValueError:
        raise UsageError(f"--seeds must be a comma-separated list of integers, got {args.seeds!r}") from None
    if not seeds:
        raise UsageError("--seeds is empty")
    cfg = _config(args)
    dataset = Dataset(args.data)
    out = _prepare_dir(args.out, args.force)
    report = run_ablation(dataset, variants, seeds, cfg.stage_config(2), cfg.stage_config(1),
                          cfg.backbone, out)
    for row in report["table"]:
        print(f"{row['variant']:>18}  energy {row['energy_err_pct_mean']:.3f} +- {row['energy_err_pct_std']:.3f} %"
              f"  ssim {row['ssim_mean']:.4f} +- {row['ssim_std']:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    components = GRADCHECK_COMPONENTS if args.component == "all" else (args.component,)
    kwargs = {"weights": LossWeights(), "scope": ScopeConfig(args.corr_scope, args.energy_scope),
              "pixel_area": args.pixel_area}
    pred, target = gradcheck_inputs(args.seed, **kwargs)
    ok = True
    for comp in components:
        analytic = loss_gradient(comp, pred, target, **kwargs)
        if args.inject_fault:
            flat = analytic.reshape(-1)
            flat[int(np.argmax(np.abs(flat)))] *= -1.0
        res = gradcheck(comp, pred, target, analytic=analytic, **kwargs)
        status = "PASS" if res.passed else "FAIL"
        print(f"{comp:>7}: max relative error {res.max_rel_error:.3e} at index {res.worst_index}  {status}")
        ok &= res.passed
    return EXIT_OK if ok else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fluencelab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic phantom dataset")
    p.add_argument("--config", help="config file (phantom.* keys are used)")
    p.add_argument("--out", required=True)
    p.add_argument("--cases", type=int, required=True)
    p.add_argument("--seed", type=int, help="overrides phantom.seed")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train Stage 1 or Stage 2")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stage1-ckpt", help="Stage-1 run directory or checkpoint (Stage 2 only)")
    p.add_argument("--seed", type=int, help="overrides train.seed")
    p.add_argument("--deterministic", action="store_true", help="force deterministic kernels")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a two-stage model on one split")
    p.add_argument("--stage1-ckpt")
    p.add_argument("--stage2-ckpt")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", required=True, help="per-case metrics CSV; the summary goes next to it")
    p.add_argument("--dump-images", help="directory for 16-bit PGM prediction/target pairs")
    p.add_argument("--ground-truth", action="store_true", help="score the targets against themselves")
    p.add_argument("--run-id", default="two_stage")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="loss / scope ablation under shared seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--variants", required=True, help="comma list, e.g. mse,far,far:G/B")
    p.add_argument("--seeds", required=True, help="comma list of training seeds")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the loss gradients")
    p.add_argument("--component", choices=GRADCHECK_COMPONENTS + ("all",), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corr-scope", choices=("beamwise", "global"), default="beamwise")
    p.add_argument("--energy-scope", choices=("beamwise", "global"), default="beamwise")
    p.add_argument("--pixel-area", type=float, default=1.0)
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"fluencelab {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, FormatError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"fluencelab {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
