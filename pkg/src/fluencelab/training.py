"""Seeded two-stage training, evaluation and loss ablations.

Stage 1 regresses dose slices from ``[CT, contours]``; Stage 2 regresses one
fluence map per (case, beam) from ``[dose image, sin map, cos map]`` with a
frozen Stage-1 model supplying the dose image. Losses and their gradients
come from :mod:`fluencelab.losses` (numpy, float64) and are pushed back
through the torch model with ``pred.backward(grad)``; parameters are
updated by :func:`adam_step`.

Every number a run logs is fixed by (dataset, config, backbone) in
deterministic mode: the per-epoch shuffle is seeded by ``(seed, epoch)``
and models are evaluated one sample at a time.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .data import CaseRecord, write_kv
from .losses import LossBreakdown, LossWeights, ScopeConfig, far_terms, loss_gradient, stage1_mse
from .metrics import METRIC_COLUMNS, SIGNIFICANCE_COLUMNS, SUMMARY_COLUMNS, METRICS
from .metrics import case_metrics, significance, summarize, write_csv
from .models import (BackboneConfig, Regressor, anatomy_assemble, build_regressor, collapse_dose,
                     configure_torch, infer_plan, infer_single_stage, predict, predict_dose,
                     ptv_slices, save_checkpoint, stage1_inputs, stage2_assemble)

LOSS_KINDS = ("mse", "mse+energy", "mse+grad", "far")
STAGE2_INPUTS = ("mean", "slice")
LOG_COLUMNS = ("epoch", "split", "total", "mse", "grad", "corr", "energy")


class TrainingError(RuntimeError):
    """Raised when training diverges (non-finite loss) or has nothing to train on."""


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    """Per-parameter moment buffers and the shared step counter."""

    m: list
    v: list
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
        params = list(params)
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params],
                   0, beta1, beta2, eps)

    def check(self, params) -> None:
        if len(params) != len(self.m) or len(params) != len(self.v):
            raise ValueError("moment buffers do not match the parameter list")
        for p, m, v in zip(params, self.m, self.v):
            if p.shape != m.shape or p.shape != v.shape:
                raise ValueError(f"moment shape {tuple(m.shape)} != parameter shape {tuple(p.shape)}")


def adam_step(params, grads, state: AdamState, lr: float):
    """One bias-corrected Adam update, in place; returns ``params``.

    ``m <- b1 m + (1 - b1) g``, ``v <- b2 v + (1 - b2) g^2``,
    ``p <- p - lr * m_hat / (sqrt(v_hat) + eps)`` with
    ``m_hat = m / (1 - b1^t)`` and ``v_hat = v / (1 - b2^t)``.
    """
    params = list(params)
    grads = list(grads)
    if len(grads) != len(params):
        raise ValueError("need one gradient per parameter")
    state.check(params)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if g is None:
                g = torch.zeros_like(p)
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + state.eps))
    return params


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    lr: float = 1e-4
    batch_size: int = 16
    epochs: int = 50
    loss: str = "far"
    weights: LossWeights = LossWeights()
    scope: ScopeConfig = ScopeConfig()
    teacher_dose: bool = False
    seed: int = 0
    deterministic: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 0.0           # 0 disables clipping
    stage2_input: str = "mean"
    contours: str = "combined"

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if not (self.lr > 0 and self.batch_size > 0 and self.epochs > 0):
            raise ValueError("lr, batch_size and epochs must be positive")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.stage2_input not in STAGE2_INPUTS:
            raise ValueError(f"stage2_input must be one of {STAGE2_INPUTS}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            raise ValueError("Adam needs 0 <= beta < 1 and eps > 0")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0")
        w = self.effective_weights()
        if w.mse == w.grad == w.corr == w.energy == 0:
            raise ValueError("every loss weight is zero")
        if w.corr == 0 and self.scope.corr != "beamwise":
            raise ValueError(f"corr scope {self.scope.corr!r} set but loss {self.loss!r} has no corr term")
        if w.energy == 0 and self.scope.energy != "beamwise":
            raise ValueError(f"energy scope {self.scope.energy!r} set but loss {self.loss!r} has no energy term")

    def effective_weights(self) -> LossWeights:
        """Weights actually applied: terms outside the loss kind are zeroed."""
        w = self.weights
        if self.loss == "mse":
            return LossWeights(w.mse, 0.0, 0.0, 0.0)
        if self.loss == "mse+energy":
            return LossWeights(w.mse, 0.0, 0.0, w.energy)
        if self.loss == "mse+grad":
            return LossWeights(w.mse, w.grad, 0.0, 0.0)
        return w

    def echo(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            if isinstance(v, dict):
                out.update({f"{k}.{kk}": vv for kk, vv in v.items()})
            else:
                out[k] = v
        out.update({f"effective.{k}": v for k, v in asdict(self.effective_weights()).items()})
        out["scope.token"] = self.scope.token
        return out


def parse_variant(token: str) -> tuple[str, ScopeConfig]:
    """``far``, ``far:G/B``, ``mse+energy:B/G`` ... -> (loss kind, scope)."""
    loss, _, scope = token.strip().partition(":")
    if loss not in LOSS_KINDS:
        raise ValueError(f"unknown variant {token!r}; valid losses: {', '.join(LOSS_KINDS)} "
                         "with optional scope suffix :B/B, :B/G, :G/B or :G/G")
    sc = ScopeConfig.from_token(scope) if scope else ScopeConfig()
    return loss, sc


def variant_label(loss: str, scope: ScopeConfig) -> str:
    return loss if scope == ScopeConfig() else f"{loss}:{scope.token}"


# ---------------------------------------------------------------------------
# samples

def stage1_samples(cases, contours: str = "combined") -> tuple[np.ndarray, np.ndarray]:
    """Every axial slice of every case: inputs (N, C, H, W), dose targets (N, H, W)."""
    xs = [stage1_inputs(c, contours) for c in cases]
    ys = [c.dose for c in cases]
    return np.concatenate(xs).astype(np.float32), np.concatenate(ys).astype(np.float32)


def stage2_samples(cases, dose_volumes: dict, mode: str = "mean"):
    """Per (case, beam) inputs, fluence targets and case-id group labels.

    ``dose_volumes`` maps case id to a (D, H, W) dose (predicted or true).
    In ``slice`` mode each target slice forms its own sample, paired with
    the same per-beam fluence.
    """
    xs, ys, groups = [], [], []
    for c in cases:
        dose = dose_volumes[c.case_id]
        images = [collapse_dose(dose, c)] if mode == "mean" else [dose[z] for z in ptv_slices(c)]
        for b, theta in enumerate(c.angles):
            for img in images:
                xs.append(stage2_assemble(img, theta))
                ys.append(c.fluence[b])
                groups.append(c.case_id)
    return np.stack(xs), np.stack(ys).astype(np.float32), np.array(groups)


def single_stage_samples(cases):
    """``[CT, contours, sin, cos]`` per (case, beam) with fluence targets."""
    xs, ys, groups = [], [], []
    for c in cases:
        for b, theta in enumerate(c.angles):
            xs.append(anatomy_assemble(c, theta))
            ys.append(c.fluence[b])
            groups.append(c.case_id)
    return np.stack(xs), np.stack(ys).astype(np.float32), np.array(groups)


# ---------------------------------------------------------------------------
# generic fitting loop

@dataclass
class TrainResult:
    model: Regressor
    log: list[dict]
    best_epoch: int
    best_loss: float
    selected_on: str
    optimizer: AdamState = field(repr=False, default=None)


def _stage1_loss(pred, target, groups):
    value = stage1_mse(pred, target)
    return LossBreakdown(value, value, 0.0, 0.0, 0.0), loss_gradient("mse", pred, target)


def _fluence_loss(config: TrainConfig, pixel_area: float):
    weights = config.effective_weights()

    def fn(pred, target, groups):
        return far_terms(pred, target, weights, config.scope, pixel_area, groups)
    return fn


def _check_finite(terms: LossBreakdown, epoch: int) -> None:
    if not all(math.isfinite(v) for v in terms.as_dict().values()):
        raise TrainingError(f"non-finite loss at epoch {epoch}: {terms.as_dict()}")


def _evaluate_loss(model, x, y, groups, loss_fn, batch_size) -> dict:
    sums = dict.fromkeys(LOG_COLUMNS[2:], 0.0)
    pred = predict(model, x, batch_size).astype(np.float64)
    for i in range(0, len(x), batch_size):
        sl = slice(i, i + batch_size)
        terms, _ = loss_fn(pred[sl], y[sl], groups[sl])
        for k, v in terms.as_dict().items():
            sums[k] += v * len(pred[sl])
    return {k: v / len(x) for k, v in sums.items()}


def fit(model: Regressor, train, val, loss_fn, config: TrainConfig, run_dir=None,
        extra_meta: dict | None = None) -> TrainResult:
    """Minimise ``loss_fn`` over ``train = (x, y, groups)``; keep the best-validation weights.

    With an empty validation set the best training-epoch loss is used for
    selection instead. ``loss_fn(pred, target, groups)`` returns
    ``(LossBreakdown, d total / d pred)`` on float64 arrays.
    """
    x, y, groups = train
    if len(x) == 0:
        raise TrainingError("empty training split")
    configure_torch(config.deterministic)
    params = list(model.parameters())
    state = AdamState.zeros_like(params, config.beta1, config.beta2, config.adam_eps)
    log = []
    best = (math.inf, 0, None)
    selected_on = "val" if val is not None and len(val[0]) else "train"
    ckpt_dir = Path(run_dir) / "checkpoint" if run_dir is not None else None
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = np.random.default_rng([config.seed, epoch]).permutation(len(x))
        sums = dict.fromkeys(LOG_COLUMNS[2:], 0.0)
        for i in range(0, len(x), config.batch_size):
            idx = order[i:i + config.batch_size]
            xb = torch.from_numpy(np.ascontiguousarray(x[idx]))
            pred = model(xb)
            terms, grad = loss_fn(pred.detach().numpy()[:, 0].astype(np.float64), y[idx], groups[idx])
            _check_finite(terms, epoch)
            model.zero_grad(set_to_none=False)
            pred.backward(torch.from_numpy(grad[:, None].astype(np.float32)))
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
            adam_step(params, [p.grad for p in params], state, config.lr)
            for k, v in terms.as_dict().items():
                sums[k] += v * len(idx)
        row = {"epoch": epoch, "split": "train", **{k: v / len(x) for k, v in sums.items()}}
        log.append(row)
        score = row["total"]
        if selected_on == "val":
            vrow = {"epoch": epoch, "split": "val",
                    **_evaluate_loss(model, *val, loss_fn, config.batch_size)}
            if not math.isfinite(vrow["total"]):
                raise TrainingError(f"non-finite validation loss at epoch {epoch}")
            log.append(vrow)
            score = vrow["total"]
        if score < best[0]:
            best = (score, epoch, {k: v.detach().clone() for k, v in model.state_dict().items()})
            if ckpt_dir is not None:
                save_checkpoint(ckpt_dir, model, seed=config.seed, epoch=epoch, optimizer=state,
                                extra={"stage": config.stage, "selected_on": selected_on,
                                       **(extra_meta or {})})
    model.load_state_dict(best[2])
    model.eval()
    return TrainResult(model, log, best[1], best[0], selected_on, state)


# ---------------------------------------------------------------------------
# run directories

def parameter_hash(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in model.state_dict().items():
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _format(v):
    return repr(v) if isinstance(v, float) else str(v)


def write_log(path, log) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(LOG_COLUMNS) + "\n")
        for row in log:
            fh.write(",".join(_format(row[c]) for c in LOG_COLUMNS) + "\n")


def _start_run(run_dir, config: TrainConfig, backbone: BackboneConfig, extra: dict):
    if run_dir is None:
        return None
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    echo = config.echo()
    echo.update({f"backbone.{k}": v for k, v in asdict(backbone).items()})
    echo.update(extra)
    write_kv(run_dir / "config.txt", echo)
    return run_dir


def _finish_run(run_dir, result: TrainResult, config: TrainConfig, extra: dict) -> None:
    if run_dir is None:
        return
    write_log(run_dir / "log.csv", result.log)
    meta = config.echo()
    meta.update(extra)
    meta.update({"best_epoch": result.best_epoch, "best_loss": float(result.best_loss),
                 "selected_on": result.selected_on, "param_hash": parameter_hash(result.model)})
    write_kv(run_dir / "manifest.txt", meta)


# ---------------------------------------------------------------------------
# stages

def train_stage1(dataset, config: TrainConfig, backbone: BackboneConfig = BackboneConfig(),
                 run_dir=None) -> TrainResult:
    """Slice-wise dose regression with voxel MSE.

    The ``loss``, ``weights``, ``scope`` and ``teacher_dose`` fields are
    ignored here; Stage 1 always minimises the plain MSE.
    """
    if config.stage != 1:
        config = replace(config, stage=1)
    train_cases = dataset.split("train")
    if not train_cases:
        raise TrainingError("empty training split")
    x, y = stage1_samples(train_cases, config.contours)
    val_cases = dataset.split("val")
    val = None
    if val_cases:
        vx, vy = stage1_samples(val_cases, config.contours)
        val = (vx, vy, np.zeros(len(vx)))
    extra = {"n_train_samples": len(x), "contours": config.contours}
    run_dir = _start_run(run_dir, config, backbone, extra)
    model = build_regressor(x.shape[1], backbone, config.seed)
    extra_meta = {"contours": config.contours}
    result = fit(model, (x, y, np.zeros(len(x))), val, _stage1_loss, config, run_dir, extra_meta)
    _finish_run(run_dir, result, config, extra)
    return result


def stage2_dose_volumes(cases, stage1: Regressor | None, teacher_dose: bool,
                        contours: str = "combined") -> dict:
    if teacher_dose:
        return {c.case_id: c.dose for c in cases}
    if stage1 is None:
        raise ValueError("Stage 2 needs a Stage-1 model unless teacher_dose is set")
    return {c.case_id: predict_dose(stage1, c, contours) for c in cases}


def train_stage2(dataset, stage1: Regressor | None, config: TrainConfig,
                 backbone: BackboneConfig = BackboneConfig(), run_dir=None) -> TrainResult:
    """Per-beam fluence regression conditioned on the frozen Stage-1 dose.

    Global loss scopes pool the maps of one case inside a batch.
    """
    if config.stage != 2:
        config = replace(config, stage=2)
    train_cases = dataset.split("train")
    if not train_cases:
        raise TrainingError("empty training split")
    val_cases = dataset.split("val")
    stage1_hash = parameter_hash(stage1) if stage1 is not None else "none"
    doses = stage2_dose_volumes(train_cases + val_cases, stage1, config.teacher_dose, config.contours)
    train = stage2_samples(train_cases, doses, config.stage2_input)
    val = stage2_samples(val_cases, doses, config.stage2_input) if val_cases else None
    extra = {"n_train_samples": len(train[0]), "stage1_hash": stage1_hash}
    run_dir = _start_run(run_dir, config, backbone, extra)
    model = build_regressor(3, backbone, config.seed)
    loss_fn = _fluence_loss(config, dataset.manifest.pixel_area)
    result = fit(model, train, val, loss_fn, config, run_dir,
                 {"stage2_input": config.stage2_input, "loss": config.loss})
    if stage1 is not None and parameter_hash(stage1) != stage1_hash:
        raise TrainingError("Stage-1 parameters changed during Stage-2 training")
    _finish_run(run_dir, result, config, extra)
    return result


def train_single_stage(dataset, config: TrainConfig, backbone: BackboneConfig = BackboneConfig(),
                       run_dir=None) -> TrainResult:
    """Anatomy -> fluence directly (no dose prior), same loss machinery as Stage 2."""
    if config.stage != 2:
        config = replace(config, stage=2)
    train_cases = dataset.split("train")
    if not train_cases:
        raise TrainingError("empty training split")
    val_cases = dataset.split("val")
    train = single_stage_samples(train_cases)
    val = single_stage_samples(val_cases) if val_cases else None
    extra = {"n_train_samples": len(train[0]), "single_stage": True}
    run_dir = _start_run(run_dir, config, backbone, extra)
    model = build_regressor(train[0].shape[1], backbone, config.seed)
    result = fit(model, train, val, _fluence_loss(config, dataset.manifest.pixel_area), config, run_dir,
                 {"single_stage": 1})
    _finish_run(run_dir, result, config, extra)
    return result


# ---------------------------------------------------------------------------
# evaluation

def mean_fluence_baseline(cases) -> np.ndarray:
    """Per-pixel mean over every fluence map of ``cases``, (H, W)."""
    maps = np.concatenate([c.fluence for c in cases])
    return maps.mean(axis=0)


def evaluate_cases(predict_fn, cases, manifest, run_id: str) -> list[dict]:
    """Metric rows (``METRIC_COLUMNS``) for ``predict_fn(case) -> (B, H, W)``."""
    rows = []
    for case in sorted(cases, key=lambda c: c.case_id):
        pred = np.asarray(predict_fn(case), dtype=np.float64)
        m = case_metrics(pred, case.fluence, manifest.value_range, manifest.pixel_area)
        rows.append({"run_id": run_id, "case_id": case.case_id, **m})
    return rows


def evaluate_two_stage(stage1, stage2, cases, manifest, run_id: str, mode: str = "mean",
                       contours: str = "combined") -> list[dict]:
    return evaluate_cases(lambda c: infer_plan(stage1, stage2, c, mode=mode, contours=contours),
                          cases, manifest, run_id)


def evaluate_single_stage(model, cases, manifest, run_id: str) -> list[dict]:
    return evaluate_cases(lambda c: infer_single_stage(model, c), cases, manifest, run_id)


def evaluate_mean_baseline(train_cases, cases, manifest, run_id: str = "mean_baseline") -> list[dict]:
    mean_map = mean_fluence_baseline(train_cases)
    return evaluate_cases(lambda c: np.broadcast_to(mean_map, c.fluence.shape), cases, manifest, run_id)


def ground_truth_rows(cases, manifest, run_id: str = "ground_truth") -> list[dict]:
    return evaluate_cases(lambda c: c.fluence, cases, manifest, run_id)


# ---------------------------------------------------------------------------
# ablation

def ablation_table(rows) -> list[dict]:
    """One row per variant: mean and std of every metric over (seed, case)."""
    summary = summarize(rows)
    table = {}
    for s in summary:
        row = table.setdefault(s["run_id"], {"variant": s["run_id"], "n": s["n"]})
        row[f"{s['metric']}_mean"] = s["mean"]
        row[f"{s['metric']}_std"] = s["std"]
    return [table[k] for k in sorted(table)]


TABLE_COLUMNS = ("variant", "n") + tuple(f"{m}_{s}" for m in METRICS for s in ("mean", "std"))


def run_ablation(dataset, variants, seeds, base: TrainConfig, stage1_config: TrainConfig | None = None,
                 backbone: BackboneConfig = BackboneConfig(), out_dir=None,
                 split: str = "test") -> dict:
    """Train and evaluate each loss variant under shared seeds.

    Per seed one Stage-1 model is trained and reused by every variant, so
    variants differ only in the Stage-2 loss. Rows pool (seed, case) pairs
    with ``case_id`` written as ``s<seed>/<case>``; significance is tested
    against the ``mse`` variant when it is in the list.
    """
    parsed = [parse_variant(v) for v in variants]
    if not parsed:
        raise ValueError("no variants requested")
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("no seeds requested")
    stage1_config = stage1_config or replace(base, stage=1)
    out_dir = Path(out_dir) if out_dir is not None else None
    eval_cases = dataset.split(split)
    if not eval_cases:
        raise TrainingError(f"empty {split!r} split")
    rows = []
    for seed in seeds:
        s1_dir = out_dir / f"seed{seed}" / "stage1" if out_dir else None
        stage1 = train_stage1(dataset, replace(stage1_config, seed=seed), backbone, s1_dir).model
        for loss, scope in parsed:
            label = variant_label(loss, scope)
            cfg = replace(base, stage=2, seed=seed, loss=loss, scope=scope)
            run_dir = out_dir / f"seed{seed}" / label.replace("/", "").replace(":", "_") if out_dir else None
            model = train_stage2(dataset, stage1, cfg, backbone, run_dir).model

            def pred_fn(c, model=model):
                return infer_plan(stage1, model, c, mode=base.stage2_input, contours=base.contours)
            for r in evaluate_cases(pred_fn, eval_cases, dataset.manifest, label):
                r["case_id"] = f"s{seed}/{r['case_id']}"
                rows.append(r)
    labels = {variant_label(*p) for p in parsed}
    sig = significance(rows, baseline="mse") if "mse" in labels and len(labels) > 1 else []
    report = {"rows": rows, "summary": summarize(rows), "table": ablation_table(rows), "significance": sig}
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_csv(out_dir / "metrics.csv", rows, METRIC_COLUMNS)
        write_csv(out_dir / "summary.csv", report["summary"], SUMMARY_COLUMNS)
        write_csv(out_dir / "table.csv", report["table"], TABLE_COLUMNS)
        write_csv(out_dir / "significance.csv", sig, SIGNIFICANCE_COLUMNS)
    return report
