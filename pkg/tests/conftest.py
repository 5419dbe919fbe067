from __future__ import annotations

import numpy as np
import pytest

from fluencelab.data import MemoryDataset
from fluencelab.phantom import PhantomConfig, generate_dataset


@pytest.fixture(scope="session")
def small_dataset():
    """Six default-geometry cases on a 4x32x32 grid; fast enough for training tests."""
    cfg = PhantomConfig(shape=(4, 32, 32), body_axes=(10.0, 14.0), ptv_axes=(3.0, 5.0),
                        ptv_offset=2.0, oar_axes=(2.0, 4.0), n_beams=3, seed=3)
    cases, manifest = generate_dataset(cfg, 6, split_ratios=(0.5, 0.2, 0.3))
    return MemoryDataset(cases, manifest)


@pytest.fixture(scope="session")
def default_cases():
    """The default 16-case phantom set (8x64x64, nine beams)."""
    return generate_dataset(PhantomConfig(), 16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
