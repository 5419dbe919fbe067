"""On-disk dataset format, case records and train/val/test splitting.

Tensors are stored in a tiny binary container (``FLT1``)::

    b"FLT1" | u32 rank | rank x u32 dims | f32 payload (row-major)

all little-endian. A dataset root holds one directory per case plus a
``manifest.txt`` of ``key = value`` lines.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"FLT1"
SPLITS = ("train", "val", "test")


class FormatError(ValueError):
    """Raised for malformed tensor, header or manifest files."""


def write_tensor(path, values, dims=None) -> None:
    """Write ``values`` as an ``FLT1`` tensor.

    If ``dims`` is given, ``values`` is treated as a flat buffer that must
    hold exactly ``prod(dims)`` elements.
    """
    arr = np.asarray(values, dtype="<f4")
    if dims is not None:
        dims = [int(d) for d in dims]
        if math.prod(dims) != arr.size:
            raise ValueError(f"dims {dims} need {math.prod(dims)} values, got {arr.size}")
        arr = arr.reshape(dims)
    header = MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_tensor(path) -> np.ndarray:
    """Read an ``FLT1`` tensor; returns a float32 array with the stored shape."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header")
    (rank,) = struct.unpack_from("<I", raw, 4)
    head = 8 + 4 * rank
    if len(raw) < head:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    n = math.prod(dims)
    if len(raw) - head != 4 * n:
        raise FormatError(f"{path}: payload holds {len(raw) - head} bytes, dims {dims} need {4 * n}")
    return np.frombuffer(raw, dtype="<f4", offset=head).reshape(dims).astype(np.float32)


# ---------------------------------------------------------------------------
# key = value text files

def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ", ".join(format_value(x) for x in v)
    return str(v)


def write_kv(path, items: dict) -> None:
    lines = [f"{k} = {format_value(v)}" for k, v in items.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_kv(path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise FormatError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(s) for s in text.split(",") if s.strip())


# ---------------------------------------------------------------------------
# records

@dataclass(frozen=True, eq=False)
class CaseRecord:
    """One patient: CT, contour masks, dose volume and per-beam fluence.

    ``ct``, each mask and ``dose`` are (D, H, W) float32 arrays; ``fluence``
    is (B, H, W) with one map per entry of ``angles`` (degrees).
    """

    case_id: str
    ct: np.ndarray
    masks: dict[str, np.ndarray]
    dose: np.ndarray
    fluence: np.ndarray
    angles: tuple[float, ...]
    spacing: tuple[float, float, float] = (3.0, 2.5, 2.5)

    def __post_init__(self):
        shape = self.ct.shape
        if len(shape) != 3 or min(shape) < 1:
            raise ValueError(f"ct must be a non-empty (D, H, W) volume, got {shape}")
        if self.dose.shape != shape:
            raise ValueError("dose shape differs from ct")
        if "body" not in self.masks or "ptv" not in self.masks:
            raise ValueError("masks need at least 'body' and 'ptv'")
        if len(self.masks) < 3:
            raise ValueError("at least one OAR mask is required")
        for name, m in self.masks.items():
            if m.shape != shape:
                raise ValueError(f"mask {name!r} shape differs from ct")
            if not np.all((m == 0) | (m == 1)):
                raise ValueError(f"mask {name!r} is not binary")
        if np.any(self.masks["ptv"] > self.masks["body"]):
            raise ValueError("ptv mask leaks outside body mask")
        if self.fluence.ndim != 3 or self.fluence.shape[1:] != shape[1:]:
            raise ValueError("fluence must be (B, H, W) on the ct grid")
        if self.fluence.shape[0] != len(self.angles) or not self.angles:
            raise ValueError("need one angle per fluence map and B >= 1")
        if np.any(self.dose < 0) or np.any(self.fluence < 0):
            raise ValueError("dose and fluence must be non-negative")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.ct.shape

    @property
    def n_beams(self) -> int:
        return len(self.angles)

    @property
    def oar_names(self) -> list[str]:
        return [k for k in self.masks if k not in ("body", "ptv")]

    def scaled(self, dose_scale: float, fluence_scale: float) -> CaseRecord:
        return CaseRecord(
            self.case_id, self.ct, self.masks,
            (self.dose / dose_scale).astype(np.float32),
            (self.fluence / fluence_scale).astype(np.float32),
            self.angles, self.spacing,
        )


def save_case(case: CaseRecord, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_tensor(d / "ct.flt", case.ct)
    for name, m in case.masks.items():
        write_tensor(d / f"mask_{name}.flt", m)
    write_tensor(d / "dose.flt", case.dose)
    for b, f in enumerate(case.fluence):
        write_tensor(d / f"fluence_{b}.flt", f)
    write_kv(d / "case.txt", {
        "case_id": case.case_id,
        "angles": [float(a) for a in case.angles],
        "masks": ", ".join(case.masks),
        "spacing": [float(s) for s in case.spacing],
    })


def load_case(directory) -> CaseRecord:
    d = Path(directory)
    head = read_kv(d / "case.txt")
    angles = parse_floats(head["angles"])
    names = [s.strip() for s in head["masks"].split(",")]
    return CaseRecord(
        case_id=head["case_id"],
        ct=read_tensor(d / "ct.flt"),
        masks={n: read_tensor(d / f"mask_{n}.flt") for n in names},
        dose=read_tensor(d / "dose.flt"),
        fluence=np.stack([read_tensor(d / f"fluence_{b}.flt") for b in range(len(angles))]),
        angles=angles,
        spacing=parse_floats(head["spacing"]),
    )


# ---------------------------------------------------------------------------
# manifest and splits

def make_splits(case_ids, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> dict[str, str]:
    """Seeded shuffle, then contiguous train/val/test partition.

    Validation and test get ``floor(n * ratio)`` cases each; the remainder
    goes to train.
    """
    case_ids = list(case_ids)
    if not case_ids:
        raise ValueError("no cases to split")
    if len(set(case_ids)) != len(case_ids):
        raise ValueError("duplicate case ids")
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be 3 non-negative numbers summing to 1, got {ratios}")
    n = len(case_ids)
    n_val = math.floor(n * ratios[1] + 1e-9)
    n_test = math.floor(n * ratios[2] + 1e-9)
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [case_ids[i] for i in order]
    n_train = n - n_val - n_test
    assignment = {}
    for i, cid in enumerate(shuffled):
        assignment[cid] = "train" if i < n_train else "val" if i < n_train + n_val else "test"
    return {cid: assignment[cid] for cid in case_ids}


@dataclass
class DatasetManifest:
    n_cases: int
    seed: int
    dose_scale: float
    fluence_scale: float
    pixel_area: float
    value_range: float
    split_ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    splits: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("dose_scale", "fluence_scale", "pixel_area", "value_range"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ValueError("split ratios must sum to 1")
        bad = set(self.splits.values()) - set(SPLITS)
        if bad:
            raise ValueError(f"unknown split names {bad}")

    def ids(self, split: str) -> list[str]:
        return sorted(cid for cid, s in self.splits.items() if s == split)

    def save(self, path) -> None:
        items = {
            "n_cases": self.n_cases,
            "seed": self.seed,
            "dose_scale": float(self.dose_scale),
            "fluence_scale": float(self.fluence_scale),
            "pixel_area": float(self.pixel_area),
            "value_range": float(self.value_range),
            "split_ratios": [float(r) for r in self.split_ratios],
        }
        for cid in sorted(self.splits):
            items[f"split.{cid}"] = self.splits[cid]
        write_kv(path, items)

    @classmethod
    def load(cls, path) -> DatasetManifest:
        kv = read_kv(path)
        splits = {k[6:]: v for k, v in kv.items() if k.startswith("split.")}
        known = {"n_cases", "seed", "dose_scale", "fluence_scale", "pixel_area",
                 "value_range", "split_ratios"}
        extra = set(kv) - known - {f"split.{c}" for c in splits}
        if extra:
            raise FormatError(f"{path}: unknown manifest keys {sorted(extra)}")
        try:
            return cls(
                n_cases=int(kv["n_cases"]),
                seed=int(kv["seed"]),
                dose_scale=float(kv["dose_scale"]),
                fluence_scale=float(kv["fluence_scale"]),
                pixel_area=float(kv["pixel_area"]),
                value_range=float(kv["value_range"]),
                split_ratios=parse_floats(kv["split_ratios"]),
                splits=splits,
            )
        except KeyError as exc:
            raise FormatError(f"{path}: missing key {exc}") from None


class Dataset:
    """A dataset root on disk: manifest plus lazily loaded cases."""

    def __init__(self, root):
        self.root = Path(root)
        self.manifest = DatasetManifest.load(self.root / "manifest.txt")
        self._cache: dict[str, CaseRecord] = {}

    def case(self, case_id: str) -> CaseRecord:
        if case_id not in self._cache:
            self._cache[case_id] = load_case(self.root / case_id)
        return self._cache[case_id]

    def split(self, name: str) -> list[CaseRecord]:
        return [self.case(cid) for cid in self.manifest.ids(name)]


def write_dataset(root, cases, manifest: DatasetManifest) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for case in cases:
        save_case(case, root / case.case_id)
    manifest.save(root / "manifest.txt")


class MemoryDataset:
    """In-memory stand-in for :class:`Dataset` (same ``manifest``/``case``/``split``)."""

    def __init__(self, cases, manifest: DatasetManifest):
        self.manifest = manifest
        self._cases = {c.case_id: c for c in cases}
        missing = set(manifest.splits) - set(self._cases)
        if missing:
            raise ValueError(f"manifest names unknown cases {sorted(missing)}")

    def case(self, case_id: str) -> CaseRecord:
        return self._cases[case_id]

    def split(self, name: str) -> list[CaseRecord]:
        return [self._cases[cid] for cid in self.manifest.ids(name)]


# ---------------------------------------------------------------------------
# 16-bit binary PGM images

PGM_MAX = 65535


def write_pgm(path, image, value_range: float) -> None:
    """Write a 2-D map as binary 16-bit PGM, mapping ``[0, value_range]`` to ``[0, 65535]``.

    Values outside the range are clipped.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {img.shape}")
    if not value_range > 0:
        raise ValueError("value_range must be > 0")
    q = np.rint(np.clip(img / value_range, 0.0, 1.0) * PGM_MAX).astype(">u2")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{PGM_MAX}\n".encode("ascii"))
        fh.write(q.tobytes())


def read_pgm(path, value_range: float = 1.0) -> np.ndarray:
    """Read a binary PGM written by :func:`write_pgm`; returns values scaled back by ``value_range``."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    dtype = ">u2" if maxval > 255 else "u1"
    n = w * h * np.dtype(dtype).itemsize
    if len(raw) - pos != n:
        raise FormatError(f"{path}: expected {n} pixel bytes, found {len(raw) - pos}")
    q = np.frombuffer(raw, dtype=dtype, offset=pos).reshape(h, w)
    return q.astype(np.float64) / maxval * value_range
