"""Backbone-agnostic dose and fluence regressors.

A regressor is ``backbone -> 1x1 conv -> ReLU``. Two small backbones share
one contract (``(N, C_in, H, W) -> (N, features, H, W)``):

* ``conv_unet_s``: plain U-Net with 3x3 convolutions, max-pool down,
  nearest-neighbour up and skip connections.
* ``win_attn_s``: Swin-style encoder (window attention, alternating cyclic
  shifts, patch merging) with a convolutional U-Net decoder.

Every normalization is per sample (GroupNorm / LayerNorm), so a sample's
output never depends on the rest of its batch.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import CaseRecord, read_kv, read_tensor, write_kv, write_tensor
from .geometry import angle_maps

BACKBONES = ("conv_unet_s", "win_attn_s")
CONTOUR_WEIGHTS = {"body": 0.25, "ptv": 1.0, "oar": 0.5}
HEAD_BIAS = 0.01


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "win_attn_s"
    features: int = 16
    levels: int = 2
    window: int = 4
    heads: int = 2
    head_depth: int = 1

    def __post_init__(self):
        if self.kind not in BACKBONES:
            raise ValueError(f"backbone kind must be one of {BACKBONES}, got {self.kind!r}")
        if self.features < 1 or self.levels < 0 or self.window < 1 or self.heads < 1:
            raise ValueError("backbone sizes must be positive")
        if self.head_depth < 1:
            raise ValueError("head_depth must be >= 1")
        if self.kind == "win_attn_s" and self.features % self.heads:
            raise ValueError("features must be divisible by heads")

    def check_input(self, height: int, width: int) -> None:
        step = 2 ** self.levels
        if height % step or width % step:
            raise ValueError(f"H, W = {height}, {width} must be divisible by 2**levels = {step}")
        if self.kind == "win_attn_s":
            for lvl in range(1, self.levels + 1):
                if (height >> lvl) % self.window or (width >> lvl) % self.window:
                    raise ValueError(
                        f"level-{lvl} grid {height >> lvl}x{width >> lvl} not divisible by window {self.window}")


def _groups(channels: int) -> int:
    return math.gcd(channels, 4)


class ConvBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)

    def forward(self, x):
        x = F.gelu(self.norm1(self.conv1(x)))
        return F.gelu(self.norm2(self.conv2(x)))


class ConvUNetS(nn.Module):
    def __init__(self, in_channels: int, cfg: BackboneConfig):
        super().__init__()
        f = cfg.features
        chans = [f * 2 ** lvl for lvl in range(cfg.levels + 1)]
        self.enc = nn.ModuleList([ConvBlock(in_channels, chans[0])])
        self.enc.extend(ConvBlock(chans[i - 1], chans[i]) for i in range(1, len(chans)))
        self.dec = nn.ModuleList(ConvBlock(chans[i] + chans[i - 1], chans[i - 1])
                                 for i in range(len(chans) - 1, 0, -1))
        self.out_channels = chans[0]

    def forward(self, x):
        skips = []
        for i, block in enumerate(self.enc):
            if i:
                x = F.max_pool2d(x, 2)
            x = block(x)
            skips.append(x)
        skips.pop()
        for block in self.dec:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = block(torch.cat([x, skips.pop()], dim=1))
        return x


class WindowAttentionBlock(nn.Module):
    """Pre-norm window self-attention plus feed-forward, on (N, H, W, C) tokens.

    With ``shift`` the window grid is rolled by half a window (cyclic wrap,
    no masking). Set ``keep_attention`` to keep the last softmax weights in
    ``last_attention`` with shape (N * windows, heads, w*w, w*w).
    """

    def __init__(self, dim: int, window: int, heads: int, shift: bool):
        super().__init__()
        self.dim, self.window, self.heads = dim, window, heads
        self.shift = window // 2 if shift else 0
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.rel_bias = nn.Parameter(torch.zeros(heads, (2 * window - 1) ** 2))
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, 2 * dim)
        self.fc2 = nn.Linear(2 * dim, dim)
        coords = torch.stack(torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij")).flatten(1)
        rel = coords[:, :, None] - coords[:, None, :] + window - 1
        self.register_buffer("rel_index", rel[0] * (2 * window - 1) + rel[1], persistent=False)
        self.keep_attention = False
        self.last_attention = None

    def attend(self, x):
        n, h, w, c = x.shape
        ws, nh = self.window, self.heads
        if self.shift:
            x = torch.roll(x, (-self.shift, -self.shift), dims=(1, 2))
        win = x.view(n, h // ws, ws, w // ws, ws, c).permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, c)
        qkv = self.qkv(win).view(win.shape[0], ws * ws, 3, nh, c // nh).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.transpose(-2, -1)) * (c // nh) ** -0.5 + self.rel_bias[:, self.rel_index]
        attn = scores.softmax(dim=-1)
        if self.keep_attention:
            self.last_attention = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(-1, ws * ws, c)
        out = self.proj(out)
        out = out.view(n, h // ws, w // ws, ws, ws, c).permute(0, 1, 3, 2, 4, 5).reshape(n, h, w, c)
        if self.shift:
            out = torch.roll(out, (self.shift, self.shift), dims=(1, 2))
        return out

    def forward(self, x):
        x = x + self.attend(self.norm1(x))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


def win_attn_block(features: torch.Tensor, block: WindowAttentionBlock) -> torch.Tensor:
    """Apply a window-attention block to channels-first (N, C, H, W) features."""
    return block(features.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class WinAttnS(nn.Module):
    """Conv stem at full resolution, then per level a 2x2 patch merge and a
    (plain, shifted) pair of window-attention blocks; conv decoder with skips."""

    def __init__(self, in_channels: int, cfg: BackboneConfig):
        super().__init__()
        f = cfg.features
        chans = [f * 2 ** lvl for lvl in range(cfg.levels + 1)]
        self.stem = ConvBlock(in_channels, chans[0])
        self.merge = nn.ModuleList(nn.Conv2d(chans[i], chans[i + 1], 2, stride=2)
                                   for i in range(len(chans) - 1))
        self.stages = nn.ModuleList(
            nn.ModuleList([WindowAttentionBlock(c, cfg.window, cfg.heads, shift=False),
                           WindowAttentionBlock(c, cfg.window, cfg.heads, shift=True)])
            for c in chans[1:])
        self.dec = nn.ModuleList(ConvBlock(chans[i] + chans[i - 1], chans[i - 1])
                                 for i in range(len(chans) - 1, 0, -1))
        self.out_channels = chans[0]

    def forward(self, x):
        x = self.stem(x)
        skips = [x]
        for merge, blocks in zip(self.merge, self.stages):
            t = merge(x).permute(0, 2, 3, 1)
            for blk in blocks:
                t = blk(t)
            x = t.permute(0, 3, 1, 2).contiguous()
            skips.append(x)
        skips.pop()
        for block in self.dec:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = block(torch.cat([x, skips.pop()], dim=1))
        return x


class Regressor(nn.Module):
    """Backbone followed by a 1x1-conv (or MLP) head and ReLU; output (N, 1, H, W) >= 0."""

    def __init__(self, in_channels: int, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.in_channels = in_channels
        backbone_cls = ConvUNetS if cfg.kind == "conv_unet_s" else WinAttnS
        self.backbone = backbone_cls(in_channels, cfg)
        f = self.backbone.out_channels
        layers = []
        for _ in range(cfg.head_depth - 1):
            layers += [nn.Conv2d(f, f, 1), nn.GELU()]
        layers.append(nn.Conv2d(f, 1, 1))
        self.head = nn.Sequential(*layers)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"expected (N, {self.in_channels}, H, W) input, got {tuple(x.shape)}")
        self.cfg.check_input(x.shape[-2], x.shape[-1])
        # one sample at a time: results never depend on batch composition
        return torch.cat([self.forward_one(x[i:i + 1]) for i in range(x.shape[0])])

    def forward_one(self, x):
        return F.relu(self.head(self.backbone(x)))

    @property
    def head_out(self) -> nn.Conv2d:
        return self.head[-1]


def init_parameters(model: nn.Module, seed: int) -> None:
    """Seeded uniform fan-in init: weights U(+-sqrt(3 / fan_in)), zero biases.

    Norm scales start at 1 and the output head bias at ``HEAD_BIAS``.
    """
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("rel_bias"):
                p.zero_()
            elif p.dim() >= 2:
                bound = math.sqrt(3.0 / p[0].numel())
                p.copy_(torch.rand(p.shape, generator=gen, dtype=p.dtype) * 2 * bound - bound)
            elif "norm" in name and name.endswith("weight"):
                p.fill_(1.0)
            else:
                p.zero_()
        if isinstance(model, Regressor):
            model.head_out.bias.fill_(HEAD_BIAS)


def build_regressor(in_channels: int, cfg: BackboneConfig, seed: int = 0) -> Regressor:
    model = Regressor(in_channels, cfg)
    init_parameters(model, seed)
    return model


def configure_torch(deterministic: bool = True) -> None:
    """Pin thread count (``FLUENCELAB_THREADS``) and deterministic kernels."""
    threads = os.environ.get("FLUENCELAB_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    torch.use_deterministic_algorithms(deterministic)


# ---------------------------------------------------------------------------
# input assembly

def contour_channel(case: CaseRecord) -> np.ndarray:
    """Weighted sum of binary masks, (D, H, W)."""
    out = CONTOUR_WEIGHTS["body"] * case.masks["body"] + CONTOUR_WEIGHTS["ptv"] * case.masks["ptv"]
    for name in case.oar_names:
        out = out + CONTOUR_WEIGHTS["oar"] * case.masks[name]
    return out.astype(np.float32)


def stage1_inputs(case: CaseRecord, contours: str = "combined") -> np.ndarray:
    """Per-slice Stage-1 inputs, (D, C, H, W).

    ``combined`` gives ``[CT, weighted contours]`` (C = 2); ``expanded``
    gives CT followed by one channel per mask (C = 1 + K).
    """
    if contours == "combined":
        chans = [case.ct, contour_channel(case)]
    elif contours == "expanded":
        chans = [case.ct] + [case.masks[k] for k in case.masks]
    else:
        raise ValueError(f"unknown contour mode {contours!r}")
    return np.stack(chans, axis=1).astype(np.float32)


def ptv_slices(case: CaseRecord) -> np.ndarray:
    idx = np.flatnonzero(case.masks["ptv"].reshape(case.shape[0], -1).any(axis=1))
    return idx if idx.size else np.arange(case.shape[0])


def collapse_dose(dose: np.ndarray, case: CaseRecord) -> np.ndarray:
    """Mean of a (D, H, W) dose over the slices that contain target, (H, W)."""
    return np.asarray(dose, dtype=np.float32)[ptv_slices(case)].mean(axis=0)


def stage2_assemble(dose_image: np.ndarray, theta: float) -> np.ndarray:
    """``[dose, sin map, cos map]``, (3, H, W)."""
    dose_image = np.asarray(dose_image, dtype=np.float32)
    if dose_image.ndim == 3:
        dose_image = dose_image[0]
    m_sin, m_cos = angle_maps(theta, *dose_image.shape)
    return np.stack([dose_image, m_sin.astype(np.float32), m_cos.astype(np.float32)])


def anatomy_assemble(case: CaseRecord, theta: float) -> np.ndarray:
    """Single-stage input ``[CT, contours, sin map, cos map]`` over target slices, (4, H, W)."""
    sl = ptv_slices(case)
    ct = case.ct[sl].mean(axis=0)
    contours = contour_channel(case)[sl].mean(axis=0)
    m_sin, m_cos = angle_maps(theta, *ct.shape)
    return np.stack([ct, contours, m_sin, m_cos]).astype(np.float32)


def predict(model: nn.Module, x: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Forward a (N, C, H, W) float32 array in batches; returns (N, H, W)."""
    model.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            outs.append(model(torch.from_numpy(np.ascontiguousarray(x[i:i + batch_size]))).numpy()[:, 0])
    return np.concatenate(outs) if outs else np.zeros((0,) + x.shape[2:], np.float32)


def stage1_forward(model: Regressor, x: np.ndarray) -> np.ndarray:
    """Dose slice(s) from (2, H, W) or (N, 2, H, W) input."""
    x = np.asarray(x, dtype=np.float32)
    single = x.ndim == 3
    out = predict(model, x[None] if single else x)
    return out[0] if single else out


stage2_forward = stage1_forward


def predict_dose(stage1: Regressor, case: CaseRecord, contours: str = "combined") -> np.ndarray:
    return predict(stage1, stage1_inputs(case, contours))


def infer_plan(stage1: Regressor, stage2: Regressor, case: CaseRecord, angles=None,
               mode: str = "mean", contours: str = "combined") -> np.ndarray:
    """Predict one fluence map per beam angle, (B, H, W), in ``angles`` order.

    ``mode="mean"`` feeds Stage 2 the target-slice mean of the predicted
    dose; ``mode="slice"`` runs Stage 2 on every target slice and averages.
    """
    angles = case.angles if angles is None else tuple(angles)
    dose = predict_dose(stage1, case, contours)
    if mode == "mean":
        img = collapse_dose(dose, case)
        return predict(stage2, np.stack([stage2_assemble(img, a) for a in angles]))
    if mode == "slice":
        sl = ptv_slices(case)
        maps = []
        for a in angles:
            maps.append(predict(stage2, np.stack([stage2_assemble(dose[z], a) for z in sl])).mean(axis=0))
        return np.stack(maps)
    raise ValueError(f"unknown stage-2 mode {mode!r}")


def infer_single_stage(model: Regressor, case: CaseRecord, angles=None) -> np.ndarray:
    angles = case.angles if angles is None else tuple(angles)
    return predict(model, np.stack([anatomy_assemble(case, a) for a in angles]))


# ---------------------------------------------------------------------------
# checkpoints

def _coerce(text: str, typ):
    if typ in (int, "int"):
        return int(text)
    if typ in (float, "float"):
        return float(text)
    return text


def save_checkpoint(directory, model: Regressor, *, seed: int = 0, epoch: int = 0,
                    optimizer=None, extra: dict | None = None) -> None:
    """Write parameters (and optional Adam moments) as ``FLT1`` tensors.

    ``index.txt`` lists ``name = dims``; ``checkpoint.txt`` echoes the
    backbone config, input channels, seed, epoch and ``extra`` keys.
    """
    d = Path(directory)
    (d / "params").mkdir(parents=True, exist_ok=True)
    index = {}
    for name, p in model.state_dict().items():
        write_tensor(d / "params" / f"{name}.flt", p.detach().cpu().numpy())
        index[name] = list(p.shape) or ["scalar"]
    write_kv(d / "index.txt", {k: ", ".join(map(str, v)) for k, v in index.items()})
    meta = {f"backbone.{k}": v for k, v in asdict(model.cfg).items()}
    meta.update({"in_channels": model.in_channels, "seed": seed, "epoch": epoch})
    if optimizer is not None:
        (d / "optim").mkdir(exist_ok=True)
        meta["optim.step"] = optimizer.step_count
        for i, (m, v) in enumerate(zip(optimizer.m, optimizer.v)):
            write_tensor(d / "optim" / f"m_{i:03d}.flt", m.numpy())
            write_tensor(d / "optim" / f"v_{i:03d}.flt", v.numpy())
    for k, v in (extra or {}).items():
        meta[k] = v
    write_kv(d / "checkpoint.txt", meta)


def load_checkpoint(directory) -> tuple[Regressor, dict]:
    """Rebuild a regressor from :func:`save_checkpoint` output; returns (model, meta)."""
    d = Path(directory)
    if not (d / "checkpoint.txt").is_file():
        raise FileNotFoundError(f"no checkpoint at {d}")
    meta = read_kv(d / "checkpoint.txt")
    types = {f.name: f.type for f in fields(BackboneConfig)}
    cfg = BackboneConfig(**{k: _coerce(meta[f"backbone.{k}"], types[k]) for k in types})
    model = Regressor(int(meta["in_channels"]), cfg)
    state = {}
    for name in read_kv(d / "index.txt"):
        state[name] = torch.from_numpy(read_tensor(d / "params" / f"{name}.flt").copy())
    model.load_state_dict(state)
    return model, meta


def load_optimizer_moments(directory, n_params: int) -> tuple[list, list, int]:
    d = Path(directory)
    meta = read_kv(d / "checkpoint.txt")
    m = [torch.from_numpy(read_tensor(d / "optim" / f"m_{i:03d}.flt").copy()) for i in range(n_params)]
    v = [torch.from_numpy(read_tensor(d / "optim" / f"v_{i:03d}.flt").copy()) for i in range(n_params)]
    return m, v, int(meta["optim.step"])
