"""
Synthetic phantom plans
=======================

Each case is an elliptical body with a target (PTV) and a few organs at
risk. Per beam the ground-truth fluence is open over the target's
footprint, dimmed where organs at risk lie in the beam, plus smooth noise.
The dose is the attenuated back-projection of all beams. A dataset is
written as FLT1 tensors with a plain-text manifest and read back unchanged.
"""

from __future__ import annotations

import argparse
import tempfile
from pathlib import Path

import numpy as np

from fluencelab.data import Dataset, read_pgm, write_dataset, write_pgm
from fluencelab.phantom import PhantomConfig, generate_dataset

parser = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
parser.add_argument("--cases", type=int, default=8)
parser.add_argument("--out", type=Path, default=None, help="keep the dataset here (default: temp dir)")
args = parser.parse_args()

cases, manifest = generate_dataset(PhantomConfig(), args.cases)
print(f"{len(cases)} cases, split sizes", {s: len(manifest.ids(s)) for s in ("train", "val", "test")})
print(f"dose scale {manifest.dose_scale:.1f}, fluence scale {manifest.fluence_scale:.2f}, "
      f"value range {manifest.value_range:.3f}")

case = cases[0]
print(f"{case.case_id}: angles {list(case.angles)}, organs at risk {list(case.oar_names)}")
for b in range(3):
    f = case.fluence[b]
    print(f"  beam {b}: open pixels {int((f > 0).sum())}, energy {f.sum() * manifest.pixel_area:.1f}")

with tempfile.TemporaryDirectory() as tmp:
    root = args.out or Path(tmp) / "data"
    write_dataset(root, cases, manifest)
    again = Dataset(root).case(case.case_id)
    print("reloaded bit-identical:", np.array_equal(again.fluence, case.fluence) and np.array_equal(again.dose, case.dose))
    write_pgm(Path(tmp) / "beam0.pgm", case.fluence[0], manifest.value_range)
    back = read_pgm(Path(tmp) / "beam0.pgm", manifest.value_range)
    print(f"16-bit PGM round trip error {np.abs(back - case.fluence[0]).max():.2e} "
          f"(bound {0.5 * manifest.value_range / 65535:.2e})")
