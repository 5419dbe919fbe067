"""Acceptance suite: one test per criterion, each reporting a single PASS/FAIL line."""

from __future__ import annotations

import hashlib
import itertools
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy.stats import rankdata

from fluencelab.cli import main
from fluencelab.losses import (LossWeights, ScopeConfig, corr_loss, energy_loss, far_loss, gradcheck,
                               gradcheck_inputs, grad_loss, mse_loss)
from fluencelab.metrics import energy_error_percent, mae, psnr, ssim, wilcoxon_signed_rank
from fluencelab.models import (BackboneConfig, build_regressor, configure_torch, load_checkpoint,
                               save_checkpoint, stage2_assemble, stage2_forward)
from fluencelab.study import BASELINE, StudyConfig, run_study

SCOPES = [ScopeConfig.from_token(t) for t in ("B/B", "B/G", "G/B", "G/G")]


@pytest.fixture
def report(capsys):
    def _report(number: int, title: str, ok: bool, detail: str = "") -> None:
        with capsys.disabled():
            print(f"\n[criterion {number:2d}] {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({detail})" if detail else ""))
        assert ok, f"criterion {number} failed: {detail}"
    return _report


def _rel(a: float, b: float) -> float:
    return abs(a - b) / max(abs(b), 1e-12)


# ---------------------------------------------------------------------------
# scalar-loop loss oracles

def _oracle_mse(p, t):
    b, h, w = p.shape
    s = 0.0
    for k in range(b):
        for i in range(h):
            for j in range(w):
                s += (p[k, i, j] - t[k, i, j]) ** 2
    return s / (b * h * w)


def _oracle_grad(p, t):
    b, h, w = p.shape
    s = 0.0
    for k in range(b):
        for i in range(h):
            for j in range(w - 1):
                s += abs((p[k, i, j + 1] - p[k, i, j]) - (t[k, i, j + 1] - t[k, i, j]))
        for i in range(h - 1):
            for j in range(w):
                s += abs((p[k, i + 1, j] - p[k, i, j]) - (t[k, i + 1, j] - t[k, i, j]))
    return s / (b * h * w)


def _oracle_pearson(x, y, eps=1e-8):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    cov = sum((a - mx) * (c - my) for a, c in zip(x, y)) / n
    sx = math.sqrt(sum((a - mx) ** 2 for a in x) / n)
    sy = math.sqrt(sum((c - my) ** 2 for c in y) / n)
    return cov / ((sx + eps) * (sy + eps))


def _oracle_corr(p, t, scope):
    if scope == "global":
        return 1 - _oracle_pearson(list(p.ravel()), list(t.ravel()))
    return sum(1 - _oracle_pearson(list(p[k].ravel()), list(t[k].ravel())) for k in range(p.shape[0])) / p.shape[0]


def _oracle_energy(p, t, area, scope):
    devs = []
    for k in range(p.shape[0]):
        ep = sum(float(v) * area for v in p[k].ravel())
        et = sum(float(v) * area for v in t[k].ravel())
        devs.append(ep - et)
    if scope == "global":
        return abs(sum(devs))
    return sum(abs(d) for d in devs) / len(devs)


def test_criterion_01_loss_oracles(report):
    start = time.perf_counter()
    worst = 0.0
    weights = LossWeights(1.0, 0.5, 0.3, 0.2)
    decomposition_ok = True
    for seed in range(50):
        rng = np.random.default_rng(seed)
        t = rng.uniform(0, 1, (3, 8, 8))
        p = rng.uniform(0, 1, (3, 8, 8))
        area = 6.25
        worst = max(worst, _rel(mse_loss(p, t), _oracle_mse(p, t)), _rel(grad_loss(p, t), _oracle_grad(p, t)))
        for scope in ("beamwise", "global"):
            worst = max(worst, _rel(corr_loss(p, t, scope), _oracle_corr(p, t, scope)),
                        _rel(energy_loss(p, t, area, scope), _oracle_energy(p, t, area, scope)))
        br = far_loss(p, t, weights, ScopeConfig(), area)
        combined = 1.0 * br.mse + 0.5 * br.grad + 0.3 * br.corr + 0.2 * br.energy
        decomposition_ok &= _rel(br.total, combined) < 1e-12
    elapsed = time.perf_counter() - start
    report(1, "loss formulas match scalar-loop oracles",
           worst < 1e-6 and decomposition_ok and elapsed < 5.0,
           f"max rel err {worst:.2e}, weighted sum identity {decomposition_ok}, {elapsed:.2f} s")


def test_criterion_02_gradcheck(report):
    start = time.perf_counter()
    kw = dict(weights=LossWeights(1.0, 0.5, 0.3, 0.2), scope=ScopeConfig(), pixel_area=6.25)
    results = []
    for seed in range(3):
        p, t = gradcheck_inputs(seed, shape=(2, 8, 8), **kw)
        for comp in ("mse", "grad", "corr", "energy", "far"):
            results.append(gradcheck(comp, p, t, tol=1e-4, **kw))
    elapsed = time.perf_counter() - start
    worst = max(results, key=lambda r: r.max_rel_error)
    report(2, "analytic gradients match central differences",
           all(r.passed for r in results) and elapsed < 30.0,
           f"worst {worst.component} rel err {worst.max_rel_error:.2e}, {elapsed:.2f} s")


def test_criterion_03_scope_collapse(report):
    exact = True
    for seed in range(20):
        rng = np.random.default_rng(seed)
        p, t = rng.uniform(0, 1, (2, 1, 8, 8))
        values = {(corr_loss(p, t, s.corr), energy_loss(p, t, 6.25, s.energy)) for s in SCOPES}
        fars = {far_loss(p, t, LossWeights(), s, 6.25).total for s in SCOPES}
        exact &= len(values) == 1 and len(fars) == 1
    p = np.zeros((2, 2, 2)); p[0, 0, 0] = 5.0; p[1, 0, 0] = -5.0
    t = np.zeros((2, 2, 2))
    beamwise, global_ = energy_loss(p, t, 1.0, "beamwise"), energy_loss(p, t, 1.0, "global")
    report(3, "single-beam scope collapse and two-beam cancellation",
           exact and beamwise == 5.0 and global_ == 0.0,
           f"B=1 identical {exact}, B=2 beamwise {beamwise} global {global_}")


# ---------------------------------------------------------------------------
# metric and statistics oracles

def _oracle_ssim(x, y, value_range, size=11, sigma=1.5):
    c = (size - 1) / 2
    g = [[math.exp(-((i - c) ** 2 + (j - c) ** 2) / (2 * sigma ** 2)) for j in range(size)] for i in range(size)]
    total = sum(map(sum, g))
    g = [[v / total for v in row] for row in g]
    c1, c2 = (0.01 * value_range) ** 2, (0.03 * value_range) ** 2
    vals = []
    for r in range(x.shape[0] - size + 1):
        for s in range(x.shape[1] - size + 1):
            mx = my = xx = yy = xy = 0.0
            for i in range(size):
                for j in range(size):
                    a, b, w = x[r + i, s + j], y[r + i, s + j], g[i][j]
                    mx += w * a; my += w * b
                    xx += w * a * a; yy += w * b * b; xy += w * a * b
            vx, vy, cxy = xx - mx * mx, yy - my * my, xy - mx * my
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return sum(vals) / len(vals)


def test_criterion_04_metric_oracles(report):
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        t = rng.uniform(0, 1, (16, 16))
        p = np.clip(t + rng.normal(0, 0.1, (16, 16)), 0, None)
        brute_mae = sum(abs(a - b) for a, b in zip(p.ravel(), t.ravel())) / 256
        brute_mse = sum((a - b) ** 2 for a, b in zip(p.ravel(), t.ravel())) / 256
        brute_psnr = 10 * math.log10(1.0 / brute_mse)
        worst = max(worst, abs(mae(p, t) - brute_mae), abs(psnr(p, t, 1.0) - brute_psnr),
                    abs(ssim(p, t, 1.0) - _oracle_ssim(p, t, 1.0)))
    x = np.random.default_rng(9).uniform(0, 1, (16, 16))
    self_ssim = ssim(x, x, 1.0)
    twenty = psnr(x + 0.1, x, 1.0)
    scale_err = max(abs(energy_error_percent(k * (x + 0.05), k * x) - energy_error_percent(x + 0.05, x))
                    for k in (0.01, 3.0, 1e4))
    ok = worst < 1e-6 and abs(self_ssim - 1.0) < 1e-12 and abs(twenty - 20.0) < 1e-9 and scale_err < 1e-9
    report(4, "metrics match brute-force references",
           ok, f"max abs err {worst:.2e}, ssim(x,x) {self_ssim:.12f}, psnr {twenty:.9f} dB, scale drift {scale_err:.1e}")


def _enumerated_p(a, b):
    d = np.asarray(a, float) - np.asarray(b, float)
    d = d[d != 0]
    if d.size == 0:
        return 0.0, 1.0
    ranks = rankdata(np.abs(d))
    observed = float(ranks[d > 0].sum())
    stats = [sum(r for r, s in zip(ranks, signs) if s) for signs in itertools.product((0, 1), repeat=d.size)]
    lo = sum(s <= observed + 1e-9 for s in stats) / len(stats)
    hi = sum(s >= observed - 1e-9 for s in stats) / len(stats)
    return observed, min(1.0, 2 * min(lo, hi))


def test_criterion_05_wilcoxon(report):
    worst = 0.0
    for seed in range(60):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 11))
        a = np.round(rng.normal(0, 1, n), 1)
        b = np.round(rng.normal(0, 1, n), 1)
        if seed % 3 == 0:
            b[: n // 3] = a[: n // 3]                      # zero differences
        w, p = wilcoxon_signed_rank(a, b)
        w_ref, p_ref = _enumerated_p(a, b)
        worst = max(worst, abs(p - p_ref), abs(w - w_ref))
    _, p123 = wilcoxon_signed_rank([1.0, 2.0, 3.0], [0.0, 0.0, 0.0])
    report(5, "exact Wilcoxon p matches sign enumeration", worst < 1e-12 and abs(p123 - 0.25) < 1e-12,
           f"max abs err {worst:.1e}, p([1,2,3]) = {p123}")


# ---------------------------------------------------------------------------
# model contracts

def test_criterion_06_model_contracts(report, tmp_path):
    configure_torch(True)
    checks = {}
    for kind in ("conv_unet_s", "win_attn_s"):
        cfg = BackboneConfig(kind=kind, features=8)
        model = build_regressor(3, cfg, seed=0)
        gen = torch.Generator().manual_seed(1)
        x = torch.randn(100, 3, 32, 32, generator=gen) * 3
        with torch.no_grad():
            y = torch.cat([model(x[i:i + 25]) for i in range(0, 100, 25)])
            alone = model(x[7:8])
            mixed = model(x[5:12])
        checks[f"{kind} non-negative"] = bool(y.min() >= 0)
        checks[f"{kind} shape"] = tuple(y.shape) == (100, 1, 32, 32)
        checks[f"{kind} batch independence"] = torch.equal(alone[0], mixed[2])
        save_checkpoint(tmp_path / kind, model)
        loaded, _ = load_checkpoint(tmp_path / kind)
        with torch.no_grad():
            checks[f"{kind} checkpoint"] = torch.equal(loaded(x[:4]), model(x[:4])) and all(
                torch.equal(a, b) for a, b in zip(model.state_dict().values(), loaded.state_dict().values()))
    model = build_regressor(3, BackboneConfig(kind="win_attn_s", features=8), seed=0)
    img = np.random.default_rng(0).uniform(0, 1, (32, 32))
    differ = int(np.count_nonzero(stage2_forward(model, stage2_assemble(img, 0.0))
                                  != stage2_forward(model, stage2_assemble(img, 90.0))))
    checks["theta sensitivity"] = differ >= 1
    failed = [k for k, v in checks.items() if not v]
    report(6, "model contracts", not failed, f"{len(checks)} checks, {differ} pixels differ at 0 vs 90 deg"
           + (f", failed: {failed}" if failed else ""))


# ---------------------------------------------------------------------------
# CLI determinism

def _tree_hash(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_criterion_07_cli_determinism(report, tmp_path):
    # default phantom and backbone; two epochs per stage keep the check affordable
    cfg = tmp_path / "short.txt"
    cfg.write_text("train.epochs = 2\n")
    same = {}
    for run in ("a", "b"):
        d = tmp_path / run
        assert main(["gen", "--out", str(d / "data"), "--cases", "16"]) == 0
        assert main(["train", "--stage", "1", "--config", str(cfg), "--deterministic",
                     "--data", str(d / "data"), "--out", str(d / "s1")]) == 0
        assert main(["train", "--stage", "2", "--config", str(cfg), "--deterministic", "--data", str(d / "data"),
                     "--out", str(d / "s2"), "--stage1-ckpt", str(d / "s1")]) == 0
        assert main(["eval", "--stage1-ckpt", str(d / "s1"), "--stage2-ckpt", str(d / "s2"),
                     "--data", str(d / "data"), "--out", str(d / "eval" / "metrics.csv"),
                     "--dump-images", str(d / "eval" / "images")]) == 0
    for part in ("data", "s1", "s2", "eval"):
        same[part] = _tree_hash(tmp_path / "a" / part) == _tree_hash(tmp_path / "b" / part)
    report(7, "gen / train --deterministic / eval are byte-identical across runs", all(same.values()),
           ", ".join(f"{k} {'same' if v else 'DIFFERENT'}" for k, v in same.items()))


# ---------------------------------------------------------------------------
# directional study

STUDY = StudyConfig()
BUDGET_SECONDS = 20 * 60


@pytest.fixture(scope="module")
def study(tmp_path_factory):
    configure_torch(True)
    return run_study(STUDY, out_dir=tmp_path_factory.mktemp("study"))


def _energy(study, seed, run):
    return study.mean(seed, run, "energy_err_pct")


def _fmt(study, runs):
    return "; ".join(f"s{s}: " + ", ".join(f"{r.split('/')[-1]} {_energy(study, s, r):.2f}" for r in runs)
                     for s in STUDY.seeds)


def test_criterion_08_far_beats_mse(report, study):
    kind = "win_attn_s"
    far_wins = sum(_energy(study, s, f"{kind}/far") < _energy(study, s, f"{kind}/mse") for s in STUDY.seeds)
    beat_naive = sum(_energy(study, s, f"{kind}/far") < _energy(study, s, BASELINE)
                     and _energy(study, s, f"{kind}/mse") < _energy(study, s, BASELINE) for s in STUDY.seeds)
    ok = far_wins >= 2 and beat_naive == 3 and study.seconds <= BUDGET_SECONDS
    report(8, "FAR lowers test energy error vs MSE (window-attention backbone)", ok,
           f"FAR < MSE in {far_wins}/3, both < naive in {beat_naive}/3, study {study.seconds:.0f} s; energy % "
           + _fmt(study, [f"{kind}/far", f"{kind}/mse", BASELINE]))


def test_criterion_09_two_stage_vs_single_stage(report, study):
    kind = STUDY.single_stage_backbone
    two = [study.mean(s, f"{kind}/mse", "ssim") for s in STUDY.seeds]
    one = [study.mean(s, f"{kind}/single", "ssim") for s in STUDY.seeds]
    wins = sum(a >= b for a, b in zip(two, one))
    report(9, "two-stage SSIM >= single-stage SSIM", wins >= 2,
           f"{wins}/3 seeds; two-stage " + ", ".join(f"{v:.4f}" for v in two)
           + " vs single-stage " + ", ".join(f"{v:.4f}" for v in one))


def test_criterion_10_backbone_agnostic(report, study):
    counts = {kind: sum(_energy(study, s, f"{kind}/far") < _energy(study, s, f"{kind}/mse") for s in STUDY.seeds)
              for kind in STUDY.backbones}
    report(10, "FAR-vs-MSE ordering holds for every backbone", all(c >= 2 for c in counts.values()),
           ", ".join(f"{k} FAR < MSE in {c}/3" for k, c in counts.items()) + "; energy % "
           + _fmt(study, [f"conv_unet_s/far", f"conv_unet_s/mse"]))
