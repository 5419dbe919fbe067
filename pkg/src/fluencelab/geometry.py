"""Gantry-angle encoding and the rotation / projection operators.

Conventions: arrays are indexed ``[row, col]`` with rows running down the
image. A beam at gantry angle 0 travels towards row 0 ("up"); angles grow
clockwise, so at 90 degrees the beam travels towards the last column. In the
beam frame the beam always travels up and enters through the bottom row,
which is where attenuation depth starts at 0.

The beam's-eye-view (BEV) plane is H x W: columns are the lateral offset
across the beam, rows are the axial position, with each of the D slices
owning a contiguous band of ``H / D`` rows.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
import scipy.sparse as sp


def normalize_angle(theta: float) -> float:
    """Wrap an angle in degrees into [0, 360)."""
    a = math.fmod(float(theta), 360.0)
    if a < 0:
        a += 360.0
    return 0.0 if a >= 360.0 else a


def angle_maps(theta: float, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Constant ``sin(theta)`` and ``cos(theta)`` maps of shape (H, W)."""
    if height < 1 or width < 1:
        raise ValueError("map size must be positive")
    rad = math.radians(normalize_angle(theta))
    return (np.full((height, width), math.sin(rad)),
            np.full((height, width), math.cos(rad)))


@lru_cache(maxsize=256)
def rotation_matrix(height: int, width: int, theta: float) -> sp.csr_matrix:
    """Sparse (HW x HW) operator rotating an image clockwise by ``theta``.

    Pull-style bilinear resampling about the image centre; samples falling
    outside the source grid read 0.
    """
    rad = math.radians(theta)
    c, s = math.cos(rad), math.sin(rad)
    ci, cj = (height - 1) / 2.0, (width - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    x = jj - cj
    y = ci - ii
    # inverse (counter-clockwise) map from output pixel to source position
    src_col = x * c - y * s + cj
    src_row = ci - (x * s + y * c)
    r0 = np.floor(src_row)
    c0 = np.floor(src_col)
    fr = src_row - r0
    fc = src_col - c0
    rows, cols, vals = [], [], []
    out_idx = np.arange(height * width).reshape(height, width)
    for dr, dc, w in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                      (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        rr = (r0 + dr).astype(np.int64)
        cc = (c0 + dc).astype(np.int64)
        ok = (rr >= 0) & (rr < height) & (cc >= 0) & (cc < width) & (w > 0)
        rows.append(out_idx[ok])
        cols.append(rr[ok] * width + cc[ok])
        vals.append(w[ok])
    mat = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(height * width, height * width),
    )
    mat.sum_duplicates()
    return mat


def _apply(img: np.ndarray, theta: float, adjoint: bool) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[-2:]
    theta = normalize_angle(theta)
    if theta == 0.0:
        return img.copy()
    mat = rotation_matrix(h, w, theta)
    if adjoint:
        mat = mat.T.tocsr()
    flat = img.reshape(-1, h * w)
    return np.asarray(mat @ flat.T).T.reshape(img.shape)


def rotate_slice(img: np.ndarray, theta: float) -> np.ndarray:
    """Rotate an image (or a stack of images) clockwise by ``theta`` degrees.

    Rotating by 0 returns an exact copy.
    """
    return _apply(img, theta, adjoint=False)


def rotate_adjoint(img: np.ndarray, theta: float) -> np.ndarray:
    """Transpose of :func:`rotate_slice`: a mass-preserving push rotation by ``-theta``."""
    return _apply(img, theta, adjoint=True)


def slice_bands(n_slices: int, height: int) -> np.ndarray:
    """Slice index owning each BEV row (``floor(row * D / H)``)."""
    if height < n_slices:
        raise ValueError(f"BEV height {height} cannot hold {n_slices} slice bands")
    return (np.arange(height) * n_slices) // height


def bev_project(vol: np.ndarray, theta: float) -> np.ndarray:
    """Beam's-eye-view projection of a (D, H, W) volume, or a single slice.

    Each slice is taken into the beam frame, summed along the beam axis and
    its lateral profile spread over the slice's row band. The operator is
    linear and conserves total mass for content inside the rotation disk.
    """
    vol = np.asarray(vol, dtype=np.float64)
    if vol.ndim == 2:
        vol = vol[None]
    d, h, w = vol.shape
    beam_frame = rotate_adjoint(vol, theta)
    profiles = beam_frame.sum(axis=1)                 # (D, W)
    band = slice_bands(d, h)
    counts = np.bincount(band, minlength=d).astype(np.float64)
    return profiles[band] / counts[band][:, None]


def back_project(fluence: np.ndarray, theta: float, mu: float, n_slices: int) -> np.ndarray:
    """Deposit a BEV fluence map into a (D, H, W) volume.

    Rows of each slice band are summed into a lateral profile, broadcast
    along the beam with attenuation ``exp(-mu * depth)`` (depth in pixels from
    the entry row) and rotated into the patient frame.
    """
    fluence = np.asarray(fluence, dtype=np.float64)
    if mu < 0:
        raise ValueError("attenuation must be non-negative")
    h, w = fluence.shape
    band = slice_bands(n_slices, h)
    profiles = np.zeros((n_slices, w))
    np.add.at(profiles, band, fluence)
    depth = np.arange(h)[::-1].astype(np.float64)     # bottom row is the entry edge
    atten = np.exp(-mu * depth)
    beam_frame = profiles[:, None, :] * atten[None, :, None]
    return rotate_slice(beam_frame, theta)
