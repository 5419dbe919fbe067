"""Fluence-aware regression loss and its components, with exact gradients.

All terms take beam stacks shaped (B, H, W) (a single (H, W) map counts as
B = 1) and accumulate in float64. Every ``*_loss`` has a matching analytic
gradient with respect to ``pred``; :func:`loss_gradient` dispatches by name.

Scopes: ``beamwise`` evaluates correlation / energy per map and averages
over maps; ``global`` pools the maps of one plan. ``groups`` labels which
maps belong to the same plan; by default the whole stack is one plan.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PEARSON_EPS = 1e-8
SCOPES = ("beamwise", "global")
COMPONENTS = ("mse", "grad", "corr", "energy")


@dataclass(frozen=True)
class LossWeights:
    mse: float = 1.0
    grad: float = 0.5
    corr: float = 0.3
    energy: float = 0.2

    def __post_init__(self):
        if min(self.as_tuple()) < 0:
            raise ValueError(f"loss weights must be non-negative, got {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.mse, self.grad, self.corr, self.energy)


@dataclass(frozen=True)
class ScopeConfig:
    corr: str = "beamwise"
    energy: str = "beamwise"

    def __post_init__(self):
        for s in (self.corr, self.energy):
            if s not in SCOPES:
                raise ValueError(f"scope must be one of {SCOPES}, got {s!r}")

    @property
    def token(self) -> str:
        return f"{self.corr[0].upper()}/{self.energy[0].upper()}"

    @classmethod
    def from_token(cls, token: str) -> ScopeConfig:
        names = {"B": "beamwise", "G": "global"}
        try:
            c, e = token.upper().split("/")
            return cls(names[c], names[e])
        except (ValueError, KeyError):
            raise ValueError(f"scope token must look like 'B/G', got {token!r}") from None


@dataclass
class LossBreakdown:
    total: float
    mse: float
    grad: float
    corr: float
    energy: float
    energy_deviations: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    def as_dict(self) -> dict[str, float]:
        return {"total": self.total, "mse": self.mse, "grad": self.grad,
                "corr": self.corr, "energy": self.energy}


def _stacks(pred, target):
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs target {t.shape}")
    if p.ndim == 2:
        p, t = p[None], t[None]
    if p.ndim != 3:
        raise ValueError(f"expected (B, H, W) stacks, got {p.shape}")
    return p, t


def _group_index(groups, n_beams):
    if groups is None:
        return np.zeros(n_beams, dtype=np.int64), 1
    _, idx = np.unique(np.asarray(groups), return_inverse=True)
    if idx.shape != (n_beams,):
        raise ValueError("need one group label per beam")
    return idx, int(idx.max()) + 1


# ---------------------------------------------------------------------------
# component kernels: each returns (value, d value / d pred)

def _mse(p, t):
    n = p.size
    r = p - t
    return float(np.sum(r * r) / n), 2.0 * r / n


def _grad(p, t):
    b, h, w = p.shape
    if h < 2 or w < 2:
        raise ValueError("gradient loss needs H, W >= 2")
    n = b * h * w
    ex = np.diff(p, axis=2) - np.diff(t, axis=2)
    ey = np.diff(p, axis=1) - np.diff(t, axis=1)
    value = (np.abs(ex).sum() + np.abs(ey).sum()) / n
    sx, sy = np.sign(ex), np.sign(ey)
    g = np.zeros_like(p)
    g[:, :, 1:] += sx
    g[:, :, :-1] -= sx
    g[:, 1:, :] += sy
    g[:, :-1, :] -= sy
    return float(value), g / n


def _pearson(p, t):
    """Pearson correlation of two flat vectors and its gradient in ``p``."""
    n = p.size
    pc = p - p.mean()
    tc = t - t.mean()
    cov = np.dot(pc, tc) / n
    sp = np.sqrt(np.dot(pc, pc) / n)
    st = np.sqrt(np.dot(tc, tc) / n)
    dp, dt = sp + PEARSON_EPS, st + PEARSON_EPS
    rho = cov / (dp * dt)
    dsp = pc / (n * sp) if sp > 0 else np.zeros_like(pc)
    drho = tc / (n * dp * dt) - cov * dsp / (dp * dp * dt)
    return float(rho), drho


def _corr(p, t, scope, groups):
    b = p.shape[0]
    g = np.zeros_like(p)
    if scope == "beamwise":
        total = 0.0
        for k in range(b):
            rho, drho = _pearson(p[k].ravel(), t[k].ravel())
            total += 1.0 - rho
            g[k] = -drho.reshape(p.shape[1:]) / b
        return total / b, g
    idx, n_groups = _group_index(groups, b)
    total = 0.0
    for k in range(n_groups):
        sel = idx == k
        rho, drho = _pearson(p[sel].ravel(), t[sel].ravel())
        total += 1.0 - rho
        g[sel] = -drho.reshape(p[sel].shape) / n_groups
    return total / n_groups, g


def _energy(p, t, pixel_area, scope, groups):
    if not pixel_area > 0:
        raise ValueError("pixel_area must be > 0")
    b = p.shape[0]
    dev = pixel_area * (p.sum(axis=(1, 2)) - t.sum(axis=(1, 2)))
    if scope == "beamwise":
        value = np.abs(dev).sum() / b
        g = np.broadcast_to((np.sign(dev) * pixel_area / b)[:, None, None], p.shape)
        return float(value), np.array(g), dev
    idx, n_groups = _group_index(groups, b)
    plan_dev = np.bincount(idx, weights=dev, minlength=n_groups)
    value = np.abs(plan_dev).sum() / n_groups
    per_beam = np.sign(plan_dev)[idx] * pixel_area / n_groups
    g = np.broadcast_to(per_beam[:, None, None], p.shape)
    return float(value), np.array(g), dev


# ---------------------------------------------------------------------------
# public API

def mse_loss(pred, target) -> float:
    """Mean squared error over all beams and pixels."""
    return _mse(*_stacks(pred, target))[0]


def stage1_mse(pred, target) -> float:
    """Voxel-wise MSE of a predicted dose slice; the B = 1 case of :func:`mse_loss`."""
    return mse_loss(pred, target)


def grad_loss(pred, target) -> float:
    """L1 mismatch of forward differences along both axes, over B*H*W."""
    return _grad(*_stacks(pred, target))[0]


def corr_loss(pred, target, scope: str = "beamwise", groups=None) -> float:
    """One minus the Pearson correlation, per map or per plan."""
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}")
    p, t = _stacks(pred, target)
    return _corr(p, t, scope, groups)[0]


def energy_loss(pred, target, pixel_area: float = 1.0, scope: str = "beamwise", groups=None) -> float:
    """Absolute deviation of integrated fluence (sum times pixel area)."""
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}")
    p, t = _stacks(pred, target)
    return _energy(p, t, pixel_area, scope, groups)[0]


def far_terms(pred, target, weights: LossWeights = LossWeights(), scope: ScopeConfig = ScopeConfig(),
              pixel_area: float = 1.0, groups=None) -> tuple[LossBreakdown, np.ndarray]:
    """Weighted FAR loss and its gradient in one pass.

    Terms with zero weight are still reported in the breakdown.
    """
    p, t = _stacks(pred, target)
    mse, g_mse = _mse(p, t)
    grad, g_grad = _grad(p, t)
    corr, g_corr = _corr(p, t, scope.corr, groups)
    energy, g_energy, dev = _energy(p, t, pixel_area, scope.energy, groups)
    a, b, c, d = weights.as_tuple()
    total = a * mse + b * grad + c * corr + d * energy
    g = a * g_mse + b * g_grad + c * g_corr + d * g_energy
    shape = np.shape(pred)
    return LossBreakdown(total, mse, grad, corr, energy, dev), g.reshape(shape)


def far_loss(pred, target, weights: LossWeights = LossWeights(), scope: ScopeConfig = ScopeConfig(),
             pixel_area: float = 1.0, groups=None) -> LossBreakdown:
    return far_terms(pred, target, weights, scope, pixel_area, groups)[0]


def loss_gradient(component: str, pred, target, *, weights: LossWeights = LossWeights(),
                  scope: ScopeConfig = ScopeConfig(), pixel_area: float = 1.0, groups=None) -> np.ndarray:
    """Exact d(loss)/d(pred) for ``mse``, ``grad``, ``corr``, ``energy`` or ``far``.

    L1 kinks use subgradient 0.
    """
    p, t = _stacks(pred, target)
    if component == "mse":
        g = _mse(p, t)[1]
    elif component == "grad":
        g = _grad(p, t)[1]
    elif component == "corr":
        g = _corr(p, t, scope.corr, groups)[1]
    elif component == "energy":
        g = _energy(p, t, pixel_area, scope.energy, groups)[1]
    elif component == "far":
        return far_terms(pred, target, weights, scope, pixel_area, groups)[1]
    else:
        raise ValueError(f"unknown loss component {component!r}")
    return g.reshape(np.shape(pred))


def loss_value(component: str, pred, target, *, weights: LossWeights = LossWeights(),
               scope: ScopeConfig = ScopeConfig(), pixel_area: float = 1.0, groups=None) -> float:
    if component == "mse":
        return mse_loss(pred, target)
    if component == "grad":
        return grad_loss(pred, target)
    if component == "corr":
        return corr_loss(pred, target, scope.corr, groups)
    if component == "energy":
        return energy_loss(pred, target, pixel_area, scope.energy, groups)
    if component == "far":
        return far_loss(pred, target, weights, scope, pixel_area, groups).total
    raise ValueError(f"unknown loss component {component!r}")


# ---------------------------------------------------------------------------
# finite-difference verification

@dataclass
class GradcheckResult:
    component: str
    max_rel_error: float
    worst_index: tuple[int, ...]
    passed: bool


def gradcheck_inputs(seed: int, shape=(2, 8, 8), h: float = 1e-3, **loss_kwargs):
    """Seeded (pred, target) pair on which central differences are conclusive.

    Two kinds of draw are rejected and redrawn. A difference straddling a
    kink of ``|x|`` measures a chord, so any gradient residual or energy
    deviation within ``4 h`` of zero is refused. And a relative comparison
    is meaningless where the true derivative is itself near zero: the
    O(h^2) truncation term then dominates, so draws where a ``corr`` or
    ``far`` gradient entry is below ``1e-3`` of its largest entry are
    refused too. ``loss_kwargs`` are forwarded to :func:`loss_gradient`.
    """
    rng = np.random.default_rng(seed)
    n_pix = shape[1] * shape[2]
    while True:
        target = rng.uniform(0.0, 1.0, size=shape)
        pred = target + rng.normal(0.0, 0.3, size=shape)
        ex = np.diff(pred, axis=2) - np.diff(target, axis=2)
        ey = np.diff(pred, axis=1) - np.diff(target, axis=1)
        dev = (pred - target).sum(axis=(1, 2))
        if (np.abs(ex).min() <= 4 * h or np.abs(ey).min() <= 4 * h
                or np.abs(dev).min() <= 4 * h * n_pix or abs(dev.sum()) <= 4 * h * n_pix):
            continue
        smooth = [loss_gradient(c, pred, target, **loss_kwargs) for c in ("corr", "far")]
        smooth.append(loss_gradient("corr", pred, target, scope=ScopeConfig("global", "global")))
        if all(np.abs(g).min() > 1e-3 * np.abs(g).max() for g in smooth):
            return pred, target


def gradcheck(component: str, pred, target, h: float = 1e-3, tol: float = 1e-4,
              analytic=None, **kwargs) -> GradcheckResult:
    """Compare the analytic gradient with central differences, elementwise.

    The relative error of an entry is ``|a - n| / max(|a|, |n|, floor)``
    with ``floor = 1e-7 * max|a|``: entries that are exactly zero (e.g. L1
    signs cancelling at a corner) only see difference round-off, which sits
    far below that floor. ``analytic`` may be supplied to check an external
    gradient.
    """
    pred = np.asarray(pred, dtype=np.float64)
    a = loss_gradient(component, pred, target, **kwargs) if analytic is None else np.asarray(analytic)
    num = np.zeros_like(pred)
    work = pred.copy()
    for i in np.ndindex(pred.shape):
        x0 = work[i]
        work[i] = x0 + h
        up = loss_value(component, work, target, **kwargs)
        work[i] = x0 - h
        down = loss_value(component, work, target, **kwargs)
        work[i] = x0
        num[i] = (up - down) / (2 * h)
    floor = 1e-7 * np.abs(a).max()
    scale = np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
    rel = np.where(scale > 0, np.abs(a - num) / np.where(scale > 0, scale, 1.0), 0.0)
    worst = tuple(int(k) for k in np.unravel_index(np.argmax(rel), rel.shape))
    max_rel = float(rel[worst])
    return GradcheckResult(component, max_rel, worst, max_rel < tol)
