"""Static PNG overlays: visible part in one tint, hidden remainder in another."""

from __future__ import annotations

from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from PIL import Image, ImageDraw

from .manifest import DatasetManifest
from .masks import AmodalInstance, BinaryMask, BoundingBox, as_mask

VISIBLE_TINT = (40, 200, 80)
HIDDEN_TINT = (230, 60, 200)
BOX_COLOR = (255, 220, 0)


class MissingImages(FileNotFoundError):
    def __init__(self, missing: list):
        super().__init__(f"{len(missing)} image(s) could not be read: {missing[:5]}")
        self.missing = missing


def region_masks(inst: AmodalInstance) -> tuple:
    """``(visible, hidden)`` dense masks; they partition the amodal mask."""
    amodal = inst.amodal_mask.dense
    visible = inst.modal_mask.dense
    return visible, amodal & ~visible


def _blend(canvas: np.ndarray, mask: np.ndarray, color, alpha: float) -> None:
    if mask.any():
        c = np.asarray(color, dtype=np.float64)
        canvas[mask] = (1 - alpha) * canvas[mask] + alpha * c


def overlay(
    image: np.ndarray,
    instances: Iterable[AmodalInstance] = (),
    boxes: Iterable[BoundingBox] = (),
    amodal_only: Sequence = (),
    alpha: float = 0.5,
) -> np.ndarray:
    """Tint each instance's visible and hidden regions and outline its amodal box.

    ``amodal_only`` holds masks with no visible/hidden split (predictions),
    which get the hidden tint in full. ``boxes`` are drawn as extra outlines.
    """
    canvas = np.asarray(image, dtype=np.float64)[..., :3].copy()
    outlines = list(boxes)
    for inst in instances:
        visible, hidden = region_masks(inst)
        _blend(canvas, visible, VISIBLE_TINT, alpha)
        _blend(canvas, hidden, HIDDEN_TINT, alpha)
        if inst.amodal_mask.area():
            outlines.append(inst.amodal_box)
    for m in amodal_only:
        _blend(canvas, as_mask(m).dense, HIDDEN_TINT, alpha)
    out = Image.fromarray(np.clip(np.rint(canvas), 0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(out)
    for b in outlines:
        if not b.is_degenerate:
            draw.rectangle([b.x, b.y, b.x1 - 1, b.y1 - 1], outline=BOX_COLOR)
    return np.asarray(out)


def save_png(array: np.ndarray, path: Union[str, Path]) -> None:
    # no timestamp or text chunks, so equal arrays give equal bytes
    Image.fromarray(array).save(path, format="PNG", optimize=False)


def render_manifest(
    manifest: DatasetManifest,
    load_image: Callable[[object], np.ndarray],
    out_dir: Union[str, Path],
    alpha: float = 0.5,
    limit: int = 0,
) -> list:
    """One overlay per image that has annotations. Returns the written paths."""
    out_dir = Path(out_dir)
    groups = manifest.by_image()
    todo = [img for img in manifest.images if groups.get(img.id)]
    if limit:
        todo = todo[:limit]
    loaded, missing = {}, []
    for img in todo:
        try:
            loaded[img.id] = load_image(img)
        except (FileNotFoundError, OSError) as exc:
            missing.append(f"{img.id}: {exc}")
    if missing:
        raise MissingImages(missing)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for img in todo:
        path = out_dir / f"{img.id}.png"
        save_png(overlay(loaded[img.id], groups[img.id], alpha=alpha), path)
        written.append(path)
    return written


def render_results(
    results: Sequence[dict],
    load_image: Callable[[object], np.ndarray],
    out_dir: Union[str, Path],
    alpha: float = 0.5,
    limit: int = 0,
    min_score: Optional[float] = None,
) -> list:
    """Overlays for a result file: predicted amodal masks plus prompt boxes."""
    out_dir = Path(out_dir)
    groups: dict = {}
    for rec in results:
        if min_score is not None and rec.get("score_refined", rec.get("score", 0.0)) < min_score:
            continue
        groups.setdefault(rec["image_id"], []).append(rec)
    ids = list(groups)
    if limit:
        ids = ids[:limit]
    loaded, missing = {}, []
    for image_id in ids:
        try:
            loaded[image_id] = load_image(image_id)
        except (FileNotFoundError, OSError, KeyError) as exc:
            missing.append(f"{image_id}: {exc}")
    if missing:
        raise MissingImages(missing)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for image_id in ids:
        recs = groups[image_id]
        masks = [BinaryMask.from_rle(r["segmentation"]) for r in recs]
        boxes = [BoundingBox(*r["bbox"], r.get("box_kind", "modal")) for r in recs]
        path = out_dir / f"{image_id}.png"
        save_png(overlay(loaded[image_id], boxes=boxes, amodal_only=masks, alpha=alpha), path)
        written.append(path)
    return written
