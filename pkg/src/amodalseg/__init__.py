"""Amodal instance segmentation toolkit: box-prompted amodal masks, synthetic occlusion data, filters and AP/AR."""

__version__ = "0.1.0"

from .masks import AmodalInstance, BinaryMask, BoundingBox, mask_iou, occlusion_rate, tight_bbox  # noqa: E402
from .losses import LossConfig, dice_loss, focal_loss, iou_loss, total_loss  # noqa: E402
from .model import AmodalPredictor, PredictorConfig  # noqa: E402
from .pipeline import DetectionRecord, AmodalResult, refine_confidence, run_inference  # noqa: E402
from .evaluation import EvalConfig, average_precision, evaluate_run  # noqa: E402

__all__ = [
    "AmodalInstance", "AmodalPredictor", "AmodalResult", "BinaryMask", "BoundingBox", "DetectionRecord",
    "EvalConfig", "LossConfig", "PredictorConfig", "average_precision", "dice_loss", "evaluate_run",
    "focal_loss", "iou_loss", "mask_iou", "occlusion_rate", "refine_confidence", "run_inference",
    "tight_bbox", "total_loss",
]
