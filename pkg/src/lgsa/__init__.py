"""Dense object counting with locally grouped, scale-guided attention.

A two-branch (low/high resolution) hourglass keypoint detector whose skip
connections exchange features through attention filtered by a learnable
heatmap, built on a small float64 reverse-mode tensor engine.
"""

from .config import TrainConfig
from .losses import LossConfig, total_loss
from .metrics import Detection, EvalReport, average_precision, count_metrics, decode, iou
from .network import HourglassConfig, LGSANet
from .synth import generate_dataset, load_dataset, save_dataset
from .targets import Annotation, Box, make_targets

__all__ = [
    "Annotation",
    "Box",
    "Detection",
    "EvalReport",
    "HourglassConfig",
    "LGSANet",
    "LossConfig",
    "TrainConfig",
    "average_precision",
    "count_metrics",
    "decode",
    "generate_dataset",
    "iou",
    "load_dataset",
    "make_targets",
    "save_dataset",
    "total_loss",
]

__version__ = "0.1.0"
