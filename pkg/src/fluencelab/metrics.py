"""Evaluation metrics and the Wilcoxon signed-rank test.

Per-case metrics pool every beam of the case: MAE and PSNR over all pixels
of the (B, H, W) stack, SSIM as the mean over all fully-valid windows of
all beams, Energy Error as the mean beam-wise relative deviation.
"""

from __future__ import annotations

import csv
import itertools
import math
from collections import defaultdict

import numpy as np

METRIC_COLUMNS = ("run_id", "case_id", "mae", "energy_err_pct", "psnr_db", "ssim")
SUMMARY_COLUMNS = ("run_id", "metric", "mean", "std", "n")
SIGNIFICANCE_COLUMNS = ("run_a", "run_b", "metric", "w_stat", "p_value")
METRICS = METRIC_COLUMNS[2:]
EXACT_MAX_N = 25


def _pair(pred, target):
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    return p, t


def mae(pred, target) -> float:
    p, t = _pair(pred, target)
    return float(np.mean(np.abs(p - t)))


def psnr(pred, target, value_range: float) -> float:
    """PSNR in dB; ``inf`` for identical inputs."""
    p, t = _pair(pred, target)
    mse = float(np.mean((p - t) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(value_range ** 2 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_map(x, y, value_range, window):
    k = window.shape[0]
    c1 = (0.01 * value_range) ** 2
    c2 = (0.03 * value_range) ** 2
    xs = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(-2, -1))
    ys = np.lib.stride_tricks.sliding_window_view(y, (k, k), axis=(-2, -1))

    def wmean(a):
        return np.einsum("...ij,ij->...", a, window)

    mx, my = wmean(xs), wmean(ys)
    vx = wmean(xs * xs) - mx * mx
    vy = wmean(ys * ys) - my * my
    cxy = wmean(xs * ys) - mx * my
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))


def ssim(pred, target, value_range: float, window_size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over fully-valid Gaussian windows (no padding).

    Accepts one map or a (B, H, W) stack; each side must be at least the
    window size.
    """
    p, t = _pair(pred, target)
    if min(p.shape[-2:]) < window_size:
        raise ValueError(f"images smaller than the {window_size}x{window_size} window")
    return float(np.mean(_ssim_map(p, t, value_range, gaussian_window(window_size, sigma))))


def energy_error_percent(pred, target, pixel_area: float = 1.0) -> float:
    """Mean over beams of ``|E_pred - E_true| / E_true``, in percent."""
    p, t = _pair(pred, target)
    if p.ndim == 2:
        p, t = p[None], t[None]
    e_pred = pixel_area * p.sum(axis=(1, 2))
    e_true = pixel_area * t.sum(axis=(1, 2))
    if np.any(e_true <= 0):
        raise ValueError("every target beam needs positive total energy")
    return float(100.0 * np.mean(np.abs(e_pred - e_true) / e_true))


def case_metrics(pred, target, value_range: float, pixel_area: float = 1.0) -> dict[str, float]:
    return {
        "mae": mae(pred, target),
        "energy_err_pct": energy_error_percent(pred, target, pixel_area),
        "psnr_db": psnr(pred, target, value_range),
        "ssim": ssim(pred, target, value_range),
    }


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank

def _ranks(values):
    """Average ranks (1-based) with ties sharing the mean rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sv = values[order]
    i = 0
    while i < len(sv):
        j = i
        while j + 1 < len(sv) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def _exact_two_sided(ranks, w_plus):
    # ranks are integers or half-integers; count sign patterns on doubled ranks
    doubled = np.rint(2 * ranks).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    counts /= counts.sum()
    w2 = int(round(2 * w_plus))
    lower = counts[: w2 + 1].sum()
    upper = counts[w2:].sum()
    return min(1.0, 2.0 * float(min(lower, upper)))


def wilcoxon_signed_rank(a, b) -> tuple[float, float]:
    """Paired two-sided Wilcoxon test; returns ``(W+, p)``.

    Zero differences are dropped and tied magnitudes share average ranks.
    The p-value is exact for up to 25 non-zero pairs and uses the
    tie-corrected normal approximation beyond. If every difference is zero
    the result is ``(0.0, 1.0)``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 1:
        raise ValueError("need two equal-length, non-empty 1-D samples")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        return 0.0, 1.0
    ranks = _ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= EXACT_MAX_N:
        return w_plus, float(_exact_two_sided(ranks, w_plus))
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    mean = n * (n + 1) / 4
    var = n * (n + 1) * (2 * n + 1) / 24 - np.sum(tie_counts ** 3 - tie_counts) / 48
    if var <= 0:
        return w_plus, 1.0
    z = (w_plus - mean) / math.sqrt(var)
    return w_plus, min(1.0, math.erfc(abs(z) / math.sqrt(2)))


# ---------------------------------------------------------------------------
# reports

def summarize(rows) -> list[dict]:
    """Mean and sample std (n - 1) per run and metric; std is 0 when n = 1."""
    by_run = defaultdict(list)
    for r in rows:
        by_run[r["run_id"]].append(r)
    out = []
    for run_id in sorted(by_run):
        for metric in METRICS:
            vals = np.array([float(r[metric]) for r in by_run[run_id]])
            std = float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0
            out.append({"run_id": run_id, "metric": metric, "mean": float(np.mean(vals)),
                        "std": std, "n": int(vals.size)})
    return out


def significance(rows, baseline: str | None = None) -> list[dict]:
    """Pairwise Wilcoxon tests between runs, paired by ``case_id``.

    With ``baseline`` set, every other run is compared against it only.
    """
    table = defaultdict(dict)
    for r in rows:
        table[r["run_id"]][r["case_id"]] = r
    runs = sorted(table)
    if baseline is not None:
        pairs = [(baseline, r) for r in runs if r != baseline]
    else:
        pairs = list(itertools.combinations(runs, 2))
    out = []
    for run_a, run_b in pairs:
        cases = sorted(set(table[run_a]) & set(table[run_b]))
        for metric in METRICS:
            va = [float(table[run_a][c][metric]) for c in cases]
            vb = [float(table[run_b][c][metric]) for c in cases]
            if not cases or not all(map(math.isfinite, va + vb)):
                w, p = 0.0, 1.0 if va == vb else math.nan
            else:
                w, p = wilcoxon_signed_rank(va, vb)
            out.append({"run_a": run_a, "run_b": run_b, "metric": metric, "w_stat": w, "p_value": p})
    return out


def aggregate_report(rows, baseline: str | None = None) -> tuple[list[dict], list[dict]]:
    return summarize(rows), significance(rows, baseline)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, rows, columns) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for r in rows:
            writer.writerow([_fmt(r[c]) for c in columns])


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
