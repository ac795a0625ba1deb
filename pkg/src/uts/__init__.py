"""Unit-based tissue segmentation: tile classification, mask refinement and metrics."""

from .estimators import LViTClassifier
from .lvit import AblationConfig, init_params, lvit_forward
from .metrics import complexity_report, macro_metrics, tissue_ratios
from .refine import SegmentationRefiner, refine_pipeline
from .synth import generate_dataset
from .tiling import partition
from .train import TrainConfig, cross_validate, train_epochs

__version__ = "0.1.0"

__all__ = [
    "AblationConfig", "LViTClassifier", "SegmentationRefiner", "TrainConfig",
    "complexity_report", "cross_validate", "generate_dataset", "init_params", "lvit_forward",
    "macro_metrics", "partition", "refine_pipeline", "tissue_ratios", "train_epochs",
]
