"""Two-stage (dose prior -> beam fluence) regression on synthetic IMRT phantoms."""

from .data import CaseRecord, Dataset, DatasetManifest, MemoryDataset
from .losses import LossBreakdown, LossWeights, ScopeConfig, far_loss, far_terms
from .models import BackboneConfig, Regressor, build_regressor, infer_plan
from .phantom import PhantomConfig, generate_dataset

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig", "CaseRecord", "Dataset", "DatasetManifest", "LossBreakdown",
    "LossWeights", "MemoryDataset", "PhantomConfig", "Regressor", "ScopeConfig",
    "build_regressor", "far_loss", "far_terms", "generate_dataset", "infer_plan",
]
