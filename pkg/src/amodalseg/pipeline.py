"""Inference: turn front-end detector boxes into amodal masks with refined scores.

Each detection box is used as a prompt. The decoder returns a mask and an
IoU estimate, and the ranking score becomes ``score_front * iou_estimate``.
"""

from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

import jsonschema
import numpy as np
import torch

from .manifest import SchemaError, canonical_json
from .masks import AMODAL, MODAL, BinaryMask, BoundingBox, as_mask
from .model import AmodalPredictor, PredictorConfig
from .training import Checkpoint, load_checkpoint

DETECTION_SCHEMA = {
    "type": "object",
    "required": ["image_id", "bbox", "score"],
    "properties": {
        "image_id": {"type": ["integer", "string"]},
        "bbox": {
            "type": "array",
            "minItems": 4,
            "maxItems": 4,
            "items": {"type": "number"},
        },
        "score": {"type": "number", "minimum": 0, "maximum": 1},
        "category": {"type": ["integer", "string", "null"]},
        "box_kind": {"enum": [MODAL, AMODAL]},
    },
}


class CheckpointMismatch(ValueError):
    """The checkpoint cannot be loaded into the requested model configuration."""


class ClampWarning(UserWarning):
    """A detection box extended past its image and was clipped."""


def refine_confidence(score_front: float, iou_estimate: float) -> float:
    """Ranking score of an amodal result: front-end score times predicted IoU."""
    for name, v in (("score_front", score_front), ("iou_estimate", iou_estimate)):
        if not (0.0 <= v <= 1.0):
            raise ValueError(f"{name} must lie in [0, 1], got {v}")
    return float(score_front) * float(iou_estimate)


@dataclass(frozen=True)
class DetectionRecord:
    image_id: object
    box: BoundingBox
    score_front: float
    category: object = None
    modal_mask: Optional[BinaryMask] = None

    def __post_init__(self):
        if not (0.0 <= self.score_front <= 1.0):
            raise ValueError(f"score_front must lie in [0, 1], got {self.score_front}")


@dataclass(frozen=True)
class AmodalResult:
    detection: DetectionRecord
    amodal_mask: BinaryMask
    iou_estimate: float
    score_refined: float
    degenerate: bool = False

    def to_dict(self) -> dict:
        det = self.detection
        return {
            "image_id": det.image_id,
            "bbox": det.box.as_list(),
            "box_kind": det.box.kind,
            "score": det.score_front,
            "category": det.category,
            "segmentation": self.amodal_mask.to_rle(),
            "iou_estimate": self.iou_estimate,
            "score_refined": self.score_refined,
            "degenerate": self.degenerate,
        }


class ResultList(list):
    """Results in input order; ``ranked`` is the score-descending view."""

    @property
    def ranked(self) -> list:
        # sorted() is stable, so equal refined scores keep input order
        return sorted(self, key=lambda r: -r.score_refined)


def ranked_indices(scores: Sequence[float]) -> list:
    """Stable descending argsort."""
    return sorted(range(len(scores)), key=lambda i: -scores[i])


# --------------------------------------------------------------------------
# detection files


def _read_records(path: Path) -> tuple:
    """``(is_json_lines, [(position, record)])``."""
    text = path.read_text()
    if text.lstrip().startswith("["):
        try:
            return False, list(enumerate(json.loads(text)))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append((lineno, json.loads(line)))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: line {lineno} is not valid JSON ({exc})", [f"line {lineno}: {exc}"]) from exc
    return True, records


def ingest_detections(
    path: Union[str, Path],
    image_sizes: Optional[Mapping[object, tuple]] = None,
) -> list:
    """Read and validate a detection file (JSON array or JSON lines).

    ``image_sizes`` maps image id to ``(width, height)``. When given, boxes
    are clamped to their image (with a :class:`ClampWarning`) and unknown
    image ids are rejected.
    """
    path = Path(path)
    is_lines, entries = _read_records(path)
    where = (lambda k: f"line {k}") if is_lines else (lambda k: f"record {k}")
    validator = jsonschema.Draft7Validator(DETECTION_SCHEMA)
    problems = []
    out = []
    for k, rec in entries:
        errs = sorted(validator.iter_errors(rec), key=lambda e: list(map(str, e.absolute_path)))
        if errs:
            for e in errs:
                field_path = "/".join(map(str, e.absolute_path)) or "<record>"
                problems.append(f"{where(k)}: {field_path}: {e.message}")
            continue
        x, y, w, h = rec["bbox"]
        if w < 0 or h < 0 or not all(math.isfinite(v) for v in rec["bbox"]):
            problems.append(f"{where(k)}: bbox: width and height must be finite and non-negative")
            continue
        box = BoundingBox(x, y, w, h, rec.get("box_kind", MODAL))
        if image_sizes is not None:
            if rec["image_id"] not in image_sizes:
                problems.append(f"{where(k)}: image_id {rec['image_id']!r} unknown")
                continue
            iw, ih = image_sizes[rec["image_id"]]
            clamped = box.clamp(iw, ih)
            if clamped != box:
                warnings.warn(f"{path.name} {where(k)}: box {box.as_list()} clamped to {clamped.as_list()}",
                              ClampWarning, stacklevel=2)
                box = clamped
        out.append(DetectionRecord(rec["image_id"], box, float(rec["score"]), rec.get("category")))
    if problems:
        raise SchemaError(f"{path}: {len(problems)} invalid detection records; first: {problems[0]}", problems)
    return out


def write_results(results: Iterable[AmodalResult], path: Union[str, Path]) -> None:
    Path(path).write_text(canonical_json([r.to_dict() for r in results]))


# --------------------------------------------------------------------------
# inference


def resolve_model(checkpoint, model_config: Optional[PredictorConfig] = None) -> AmodalPredictor:
    """Accept a model, a :class:`Checkpoint`, or a checkpoint path."""
    if isinstance(checkpoint, AmodalPredictor):
        model = checkpoint
        if model_config is not None and model.cfg.to_dict() != model_config.to_dict():
            raise CheckpointMismatch("model configuration differs from the requested one")
        return model
    if isinstance(checkpoint, (str, Path)):
        checkpoint = load_checkpoint(checkpoint)
    if not isinstance(checkpoint, Checkpoint):
        raise TypeError(f"cannot build a model from {type(checkpoint).__name__}")
    if model_config is not None:
        theirs = PredictorConfig.from_dict(checkpoint.model_config).to_dict()
        ours = model_config.to_dict()
        diff = sorted(k for k in ours if k != "trainable_parts" and ours[k] != theirs.get(k))
        if diff:
            raise CheckpointMismatch(f"checkpoint config differs on {diff}")
    try:
        return checkpoint.build_model()
    except RuntimeError as exc:
        raise CheckpointMismatch(f"checkpoint parameters do not fit its config: {exc}") from exc


def run_inference(
    image,
    detections: Sequence[DetectionRecord],
    checkpoint,
    model_config: Optional[PredictorConfig] = None,
    mask_threshold: float = 0.5,
) -> ResultList:
    """One :class:`AmodalResult` per detection, in input order.

    Boxes that have no area inside the image yield an empty mask flagged
    ``degenerate`` with an IoU estimate (and refined score) of 0.
    """
    model = resolve_model(checkpoint, model_config)
    arr = np.asarray(image)
    h, w = arr.shape[:2]
    results = ResultList()
    for det in detections:
        clamped = det.box.clamp(w, h)
        if clamped.is_degenerate:
            empty = BinaryMask.zeros(h, w)
            results.append(AmodalResult(det, empty, 0.0, 0.0, degenerate=True))
            continue
        pred = model.predict(arr, clamped)
        prob = torch.sigmoid(pred.mask_logits)
        mask = as_mask((prob > mask_threshold).numpy())
        iou_est = min(max(float(pred.iou_estimate), 0.0), 1.0)
        results.append(AmodalResult(det, mask, iou_est, refine_confidence(det.score_front, iou_est)))
    return results


def run_batch(
    detections: Sequence[DetectionRecord],
    load_image: Callable[[object], np.ndarray],
    checkpoint,
    model_config: Optional[PredictorConfig] = None,
    workers: int = 1,
    mask_threshold: float = 0.5,
) -> ResultList:
    """Run inference image by image and merge in input order.

    Images are independent, so ``workers > 1`` runs them on a thread pool
    sharing one read-only model.
    """
    model = resolve_model(checkpoint, model_config)
    model.eval()
    groups: dict = {}
    for k, det in enumerate(detections):
        groups.setdefault(det.image_id, []).append(k)

    def one(image_id):
        idx = groups[image_id]
        return idx, run_inference(load_image(image_id), [detections[k] for k in idx], model,
                                  mask_threshold=mask_threshold)

    slots: list = [None] * len(detections)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(one, groups))
    else:
        parts = [one(i) for i in groups]
    for idx, res in parts:
        for k, r in zip(idx, res):
            slots[k] = r
    return ResultList(slots)
