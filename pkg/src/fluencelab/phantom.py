"""Synthetic prostate-like IMRT cases with analytic fluence and dose.

Each case is an elliptical body holding an ellipsoidal target (PTV) and one
to three cylindrical organs at risk (OARs) pressed against it. Beam fluence
is the BEV footprint of the margin-expanded target, dimmed where the beam
also crosses an OAR, plus a little smooth modulation noise. Dose is the
attenuated back-projection of all beams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import CaseRecord, DatasetManifest, make_splits
from .geometry import back_project, bev_project, normalize_angle, rotate_adjoint, slice_bands


@dataclass(frozen=True)
class PhantomConfig:
    shape: tuple[int, int, int] = (8, 64, 64)
    spacing: tuple[float, float, float] = (3.0, 2.5, 2.5)
    n_beams: int = 9
    start_angle: float = 0.0
    body_axes: tuple[float, float] = (20.0, 29.0)        # semi-axis range, pixels
    body_offset: float = 2.0
    ptv_axes: tuple[float, float] = (5.0, 9.0)
    ptv_offset: float = 4.0
    ptv_z_extent: float = 0.75                          # fraction of D covered
    oar_count: tuple[int, int] = (1, 3)
    oar_axes: tuple[float, float] = (3.0, 7.0)
    ptv_margin: int = 2
    oar_sparing: float = 0.5
    noise_amplitude: float = 0.05
    noise_sigma: float = 3.0
    ct_noise: float = 0.03
    mu: float = 0.02
    base_intensity: float = 50.0
    seed: int = 0

    def __post_init__(self):
        if self.n_beams < 1:
            raise ValueError("need at least one beam")
        if not 0 <= self.oar_sparing < 1:
            raise ValueError("oar_sparing must lie in [0, 1)")
        if not self.mu > 0:
            raise ValueError("mu must be > 0")
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ValueError(f"bad grid {self.shape}")
        if self.shape[1] < self.shape[0]:
            raise ValueError("H must be >= D so every slice owns a BEV row band")
        for name in ("body_axes", "ptv_axes", "oar_axes", "oar_count"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} range {lo, hi} is degenerate")
        if self.ptv_margin < 0 or self.noise_amplitude < 0 or self.noise_sigma < 0:
            raise ValueError("margin and noise settings must be non-negative")
        if not 0 < self.ptv_z_extent <= 1:
            raise ValueError("ptv_z_extent must lie in (0, 1]")
        if self.base_intensity <= 0:
            raise ValueError("base_intensity must be > 0")

    @property
    def angles(self) -> tuple[float, ...]:
        step = 360.0 / self.n_beams
        return tuple(normalize_angle(self.start_angle + b * step) for b in range(self.n_beams))

    @property
    def pixel_area(self) -> float:
        return float(self.spacing[1] * self.spacing[2])


def _ellipse(h, w, cy, cx, ay, ax, rot=0.0) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(rot), math.sin(rot)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def _smooth_noise(rng, shape, sigma) -> np.ndarray:
    """Unit-std Gaussian-filtered white noise."""
    field = rng.standard_normal(shape)
    if np.any(np.asarray(sigma) > 0):
        field = ndimage.gaussian_filter(field, sigma, mode="wrap")
    std = field.std()
    return field / std if std > 0 else field


def _disk(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius ** 2


def bev_aperture(mask: np.ndarray, theta: float, min_path: float = 0.5) -> np.ndarray:
    """Boolean BEV footprint of a (D, H, W) mask.

    A BEV pixel is open when the beam ray through it crosses at least
    ``min_path`` voxels of the mask in its slice. Thresholding the path
    length, rather than testing for any non-zero contribution, keeps the
    footprint size stable under rotation despite interpolation spill.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == 2:
        mask = mask[None]
    d, h, _ = mask.shape
    path = rotate_adjoint(mask, theta).sum(axis=1)    # (D, W) path length in voxels
    return (path >= min_path)[slice_bands(d, h)]


def fluence_ground_truth(masks: dict[str, np.ndarray], theta: float, config: PhantomConfig,
                         rng: np.random.Generator | None = None) -> np.ndarray:
    """Fluence map for one beam.

    The aperture is the :func:`bev_aperture` of the PTV grown by ``ptv_margin``.
    Inside it the intensity is ``base * (1 - sparing * overlap)`` plus smooth
    noise (clamped at 0), where ``overlap`` is the OAR footprint normalised
    to a peak of 1. Outside the aperture the map is exactly 0.
    """
    ptv = np.asarray(masks["ptv"]) > 0
    if not ptv.any():
        return np.zeros(ptv.shape[1:])
    if config.ptv_margin > 0:
        foot = _disk(config.ptv_margin)[None]
        ptv = ndimage.binary_dilation(ptv, structure=foot)
    aperture = bev_aperture(ptv, theta)

    oars = [np.asarray(m) > 0 for k, m in masks.items() if k not in ("body", "ptv")]
    overlap = np.zeros(aperture.shape)
    if oars:
        oar_proj = bev_project(np.logical_or.reduce(oars).astype(np.float64), theta)
        peak = oar_proj.max()
        if peak > 0:
            overlap = np.clip(oar_proj / peak, 0.0, 1.0)

    intensity = config.base_intensity * (1.0 - config.oar_sparing * overlap)
    if rng is not None and config.noise_amplitude > 0:
        noise = _smooth_noise(rng, aperture.shape, config.noise_sigma)
        intensity = intensity + config.noise_amplitude * config.base_intensity * noise
    return np.where(aperture, np.maximum(intensity, 0.0), 0.0)


def dose_ground_truth(fluence, angles, config: PhantomConfig) -> np.ndarray:
    """Sum of attenuated back-projections of every beam, shape (D, H, W)."""
    fluence = np.asarray(fluence)
    if len(fluence) != len(angles):
        raise ValueError(f"{len(fluence)} fluence maps for {len(angles)} angles")
    dose = np.zeros(config.shape)
    for f, theta in zip(fluence, angles):
        dose += back_project(f, theta, config.mu, config.shape[0])
    return np.maximum(dose, 0.0)


def _anatomy(config: PhantomConfig, rng: np.random.Generator):
    d, h, w = config.shape
    cy, cx = (h - 1) / 2, (w - 1) / 2
    by = cy + rng.uniform(-config.body_offset, config.body_offset)
    bx = cx + rng.uniform(-config.body_offset, config.body_offset)
    lo, hi = config.body_axes
    body_ay = rng.uniform(lo, (lo + hi) / 2)
    body_ax = rng.uniform((lo + hi) / 2, hi)
    body2d = _ellipse(h, w, by, bx, body_ay, body_ax)

    py = by + rng.uniform(-config.ptv_offset, config.ptv_offset)
    px = bx + rng.uniform(-config.ptv_offset, config.ptv_offset)
    ptv_ay, ptv_ax = rng.uniform(*config.ptv_axes, size=2)
    ptv_rot = rng.uniform(0, math.pi)
    zc = (d - 1) / 2
    rz = max(config.ptv_z_extent * d / 2, 0.5)
    ptv = np.zeros(config.shape, dtype=bool)
    for z in range(d):
        t = 1.0 - ((z - zc) / rz) ** 2
        if t > 0:
            k = math.sqrt(t)
            ptv[z] = _ellipse(h, w, py, px, ptv_ay * k, ptv_ax * k, ptv_rot) & body2d

    n_oar = int(rng.integers(config.oar_count[0], config.oar_count[1] + 1))
    phis = rng.uniform(0, 2 * math.pi) + np.arange(n_oar) * 2 * math.pi / n_oar
    ptv_any = ptv.any(axis=0)
    oars = []
    for phi in phis:
        ay, ax = rng.uniform(*config.oar_axes, size=2)
        reach = max(ptv_ay, ptv_ax) + config.ptv_margin + max(ay, ax) * 0.8 + 1.0
        oy, ox = py - reach * math.cos(phi), px + reach * math.sin(phi)
        oar2d = _ellipse(h, w, oy, ox, ay, ax, rng.uniform(0, math.pi)) & body2d & ~ptv_any
        oars.append(np.broadcast_to(oar2d, config.shape).copy())

    body = np.broadcast_to(body2d, config.shape).copy()
    masks = {"body": body, "ptv": ptv}
    for k, m in enumerate(oars):
        masks[f"oar{k}"] = m
    return {k: v.astype(np.float32) for k, v in masks.items()}


def _ct(masks, config: PhantomConfig, rng) -> np.ndarray:
    ct = 0.35 * masks["body"]
    for k, m in masks.items():
        if k.startswith("oar"):
            ct = np.where(m > 0, 0.55, ct)
    ct = np.where(masks["ptv"] > 0, 0.45, ct)
    if config.ct_noise > 0:
        ct = ct + config.ct_noise * _smooth_noise(rng, config.shape, (0, 1.5, 1.5)) * masks["body"]
    return np.clip(ct, 0.0, 1.0).astype(np.float32)


def generate_case(config: PhantomConfig, case_index: int) -> CaseRecord:
    """Deterministic in ``(config.seed, case_index)``; values are unscaled."""
    root = np.random.SeedSequence([config.seed, case_index])
    anat_seq, ct_seq, beam_seq = root.spawn(3)
    masks = _anatomy(config, np.random.default_rng(anat_seq))
    ct = _ct(masks, config, np.random.default_rng(ct_seq))
    angles = config.angles
    beam_rngs = [np.random.default_rng(s) for s in beam_seq.spawn(len(angles))]
    fluence = np.stack([fluence_ground_truth(masks, a, config, r) for a, r in zip(angles, beam_rngs)])
    dose = dose_ground_truth(fluence, angles, config)
    return CaseRecord(
        case_id=f"case_{case_index:03d}",
        ct=ct,
        masks=masks,
        dose=dose.astype(np.float32),
        fluence=fluence.astype(np.float32),
        angles=angles,
        spacing=tuple(float(s) for s in config.spacing),
    )


def nearest_rank_percentile(values: np.ndarray, q: float) -> float:
    """Nearest-rank percentile on the sorted, flattened values."""
    flat = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if flat.size == 0:
        raise ValueError("empty population")
    rank = max(1, math.ceil(q / 100.0 * flat.size))
    return float(flat[rank - 1])


def finalize_scaling(cases, pixel_area: float, seed: int = 0,
                     split_ratios=(0.7, 0.1, 0.2)) -> tuple[list[CaseRecord], DatasetManifest]:
    """Pick one global divisor each for dose and fluence.

    The divisors put the population 99th percentile at 1.0; ``value_range``
    is the largest scaled fluence value. Returns the rescaled cases together
    with a manifest that also carries the split assignment.
    """
    cases = list(cases)
    dose_scale = nearest_rank_percentile(np.concatenate([c.dose.ravel() for c in cases]), 99)
    fluence_scale = nearest_rank_percentile(np.concatenate([c.fluence.ravel() for c in cases]), 99)
    if dose_scale <= 0 or fluence_scale <= 0:
        raise ValueError("99th percentile is zero; phantom fields are too sparse to scale")
    scaled = [c.scaled(dose_scale, fluence_scale) for c in cases]
    value_range = float(max(c.fluence.max() for c in scaled))
    manifest = DatasetManifest(
        n_cases=len(cases),
        seed=seed,
        dose_scale=dose_scale,
        fluence_scale=fluence_scale,
        pixel_area=pixel_area,
        value_range=value_range,
        split_ratios=tuple(split_ratios),
        splits=make_splits([c.case_id for c in cases], split_ratios, seed),
    )
    return scaled, manifest


def generate_dataset(config: PhantomConfig, n_cases: int,
                     split_ratios=(0.7, 0.1, 0.2)) -> tuple[list[CaseRecord], DatasetManifest]:
    if n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    cases = [generate_case(config, i) for i in range(n_cases)]
    return finalize_scaling(cases, config.pixel_area, config.seed, split_ratios)
