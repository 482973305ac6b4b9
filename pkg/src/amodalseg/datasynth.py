"""Synthetic occlusion: paste complete objects over each other at a controlled overlap.

Pipeline per pair: pick a complete target and a complete occluder, rescale the
occluder to the target's size (aspect ratio kept), slide it from a disjoint
start towards the target's center until the hidden fraction of the target
matches the requested occlusion rate, paste it, and emit both the original
(unoccluded) and the synthesized (occluded) annotation.

The toy shape corpus at the bottom (rectangles and ellipses on noisy
canvases) is what the tests and demos train on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from PIL import Image

from .manifest import DatasetManifest, ImageInfo
from .masks import (
    ORIGIN_SYNTH_OCCLUDED,
    ORIGIN_SYNTH_UNOCCLUDED,
    AmodalInstance,
    BinaryMask,
    BoundingBox,
    MaskError,
    as_mask,
    mask_iou,
    occlusion_rate,
    subtract,
    tight_bbox,
)


class InfeasiblePlacement(ValueError):
    """The requested occlusion rate cannot be reached; ``max_attainable`` is the best found."""

    def __init__(self, message: str, max_attainable: float):
        super().__init__(message)
        self.max_attainable = max_attainable


@dataclass(frozen=True)
class CompleteObject:
    crop: np.ndarray  # h x w x 3 uint8
    mask: np.ndarray  # h x w bool, touches every side of the crop
    source_id: Union[int, str, None] = None
    category: Optional[str] = None

    @property
    def size(self) -> tuple:
        return self.mask.shape

    @property
    def long_side(self) -> int:
        return max(self.mask.shape)


@dataclass(frozen=True)
class SynthesisConfig:
    target_ror_range: tuple = (0.15, 0.60)
    scale_jitter: tuple = (0.8, 1.2)
    placement_tolerance: float = 0.02
    seed: int = 0
    max_attempts: int = 5
    # chance that the original scene also holds an unannotated shape behind the target
    clutter_probability: float = 0.0

    def __post_init__(self):
        if not 0 <= self.clutter_probability <= 1:
            raise ValueError("clutter_probability must lie in [0, 1]")
        lo, hi = self.target_ror_range
        if not 0 < lo <= hi < 1:
            raise ValueError("target_ror_range must be an ordered interval inside (0, 1)")
        a, b = self.scale_jitter
        if not 0 < a <= b:
            raise ValueError("scale_jitter must be an ordered positive interval")
        if self.placement_tolerance <= 0:
            raise ValueError("placement_tolerance must be positive")


@dataclass(frozen=True)
class Placement:
    offset: tuple  # (x, y) of the occluder crop's top-left corner on the canvas
    achieved_ror: float
    requested_ror: float
    t: float  # position along the start -> target-center segment


@dataclass
class SynthesizedSample:
    image: np.ndarray
    target: AmodalInstance
    occluder: AmodalInstance
    offset: tuple
    pasted: BinaryMask


# --------------------------------------------------------------------------
# complete-object collection


def _predict_mask(predictor, image, box: BoundingBox) -> BinaryMask:
    if hasattr(predictor, "predict"):
        pred = predictor.predict(image, box)
        return BinaryMask(pred.mask().cpu().numpy())
    return as_mask(predictor(image, box))


def collect_complete(
    instances: Sequence[AmodalInstance],
    images: dict,
    predictor: Union[Callable, object],
    iou_threshold: float = 0.9,
) -> list:
    """Keep instances whose predicted amodal mask agrees with their visible mask.

    ``predictor`` is either an :class:`~amodalseg.model.AmodalPredictor` or a
    callable ``(image, box) -> mask``. The visible box is used as the prompt.
    Kept objects are cropped to their visible tight box.
    """
    out = []
    for inst in instances:
        if inst.modal_mask.area() == 0:
            raise MaskError(f"instance {inst.id!r} has no visible mask")
        image = images[inst.image_id]
        box = tight_bbox(inst.modal_mask)
        pred = _predict_mask(predictor, image, box)
        if mask_iou(pred, inst.modal_mask) >= iou_threshold:
            x0, y0, x1, y1 = (int(v) for v in box.xyxy())
            out.append(
                CompleteObject(
                    np.ascontiguousarray(image[y0:y1, x0:x1]),
                    inst.modal_mask.dense[y0:y1, x0:x1].copy(),
                    inst.id,
                    inst.category,
                )
            )
    return out


# --------------------------------------------------------------------------
# size normalization


def _coverage_map(n_out: int, n_in: int) -> np.ndarray:
    """Boolean ``(n_out, n_in)``: output cell i overlaps input cell j (uniform stretch)."""
    scale = n_in / n_out
    starts = np.arange(n_out) * scale
    ends = starts + scale
    j = np.arange(n_in)
    return (j[None, :] + 1 > starts[:, None] + 1e-9) & (j[None, :] < ends[:, None] - 1e-9)


def resize_mask(mask: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resample a binary mask: an output pixel is set when its footprint touches a set input pixel.

    Border rows/columns map to border rows/columns, so a mask touching every
    side of its grid still does after resizing.
    """
    mask = np.asarray(mask, dtype=bool)
    rows = _coverage_map(height, mask.shape[0]).astype(np.int32)
    cols = _coverage_map(width, mask.shape[1]).astype(np.int32)
    return (rows @ mask.astype(np.int32) @ cols.T) > 0


def normalize_size(
    occluder: CompleteObject,
    target: CompleteObject,
    scale_jitter: tuple = (0.8, 1.2),
    rng: Optional[np.random.Generator] = None,
) -> CompleteObject:
    """Rescale ``occluder`` so its long side is ``s`` times the target's, keeping its aspect ratio."""
    for name, obj in (("occluder", occluder), ("target", target)):
        if obj.long_side <= 1 or not obj.mask.any():
            raise ValueError(f"{name} is degenerate ({obj.size})")
    lo, hi = scale_jitter
    s = lo if lo == hi else float((rng or np.random.default_rng()).uniform(lo, hi))
    h, w = occluder.size
    factor = target.long_side * s / max(h, w)
    new_h = max(1, int(round(h * factor)))
    new_w = max(1, int(round(w * factor)))
    mask = resize_mask(occluder.mask, new_h, new_w)
    crop = np.asarray(Image.fromarray(occluder.crop).resize((new_w, new_h), Image.BILINEAR))
    return CompleteObject(crop, mask, occluder.source_id, occluder.category)


# --------------------------------------------------------------------------
# placement


def _overlap(target: np.ndarray, occ: np.ndarray, ox: int, oy: int) -> int:
    H, W = target.shape
    h, w = occ.shape
    x0, y0 = max(ox, 0), max(oy, 0)
    x1, y1 = min(ox + w, W), min(oy + h, H)
    if x1 <= x0 or y1 <= y0:
        return 0
    return int(np.count_nonzero(target[y0:y1, x0:x1] & occ[y0 - oy:y1 - oy, x0 - ox:x1 - ox]))


def occluded_fraction(target_amodal: np.ndarray, occluder_mask: np.ndarray, offset: tuple) -> float:
    """Share of the target hidden by the occluder placed with its top-left at ``offset``."""
    target_amodal = np.asarray(target_amodal, dtype=bool)
    area = np.count_nonzero(target_amodal)
    if area == 0:
        raise MaskError("empty target mask")
    return _overlap(target_amodal, np.asarray(occluder_mask, dtype=bool), *offset) / area


def default_start(target_box: BoundingBox, occluder_shape: tuple, rng: np.random.Generator) -> tuple:
    """A center for the occluder whose box cannot touch the target's, in a random direction."""
    angle = rng.uniform(0, 2 * math.pi)
    h, w = occluder_shape
    reach = math.hypot(target_box.w, target_box.h) / 2 + math.hypot(w, h) / 2 + 1
    cx, cy = target_box.center
    return (cx + reach * math.cos(angle), cy + reach * math.sin(angle))


def place_occluder(
    target_amodal,
    occluder_mask: np.ndarray,
    desired_ror: float,
    tolerance: float = 0.02,
    start: Optional[tuple] = None,
    rng: Optional[np.random.Generator] = None,
    window: int = 2,
) -> Placement:
    """Bisect the occluder's center along the segment from ``start`` to the target's box center.

    The occlusion rate grows as the occluder approaches the target center, so
    bisection brackets the requested rate; a small integer-offset window around
    the bisection point then picks the closest achievable rate. If that misses
    the tolerance, the offset nearest the bisection point among all offsets
    within tolerance is used. ``start`` (an occluder center) defaults to a
    random disjoint position.
    """
    target = as_mask(target_amodal).dense
    occ = np.asarray(occluder_mask, dtype=bool)
    if not 0 <= desired_ror < 1:
        raise ValueError("desired_ror must lie in [0, 1)")
    area = np.count_nonzero(target)
    if area == 0:
        raise MaskError("empty target mask")
    tbox = tight_bbox(target)
    if start is None:
        start = default_start(tbox, occ.shape, rng or np.random.default_rng())
    h, w = occ.shape
    sx, sy = start
    tx, ty = tbox.center

    def offset_at(t: float) -> tuple:
        cx = sx + t * (tx - sx)
        cy = sy + t * (ty - sy)
        return (int(math.floor(cx - w / 2 + 0.5)), int(math.floor(cy - h / 2 + 0.5)))

    def ror(off) -> float:
        return _overlap(target, occ, *off) / area

    def refine(off) -> tuple:
        best = None
        for dy in range(-window, window + 1):
            for dx in range(-window, window + 1):
                cand = (off[0] + dx, off[1] + dy)
                r = ror(cand)
                key = (abs(r - desired_ror), abs(dx) + abs(dy), dy, dx)
                if best is None or key < best[0]:
                    best = (key, cand, r)
        return best[1], best[2]

    end_off, max_ror = refine(offset_at(1.0))
    if desired_ror > max_ror + tolerance:
        max_ror = float(overlap_map(target, occ).max()) / area
        if desired_ror > max_ror + tolerance:
            raise InfeasiblePlacement(
                f"requested occlusion {desired_ror:.3f} exceeds attainable {max_ror:.3f}", max_ror
            )

    seg_len = math.hypot(tx - sx, ty - sy)
    lo, hi = 0.0, 1.0
    while (hi - lo) * seg_len > 0.25:
        mid = 0.5 * (lo + hi)
        if ror(offset_at(mid)) < desired_ror:
            lo = mid
        else:
            hi = mid
    t = 0.5 * (lo + hi)
    off, achieved = refine(offset_at(t))
    if abs(achieved - desired_ror) > tolerance:
        off, achieved, max_ror = _nearest_within(target, occ, desired_ror, tolerance, off)
    return Placement(off, achieved, desired_ror, t)


def overlap_map(target: np.ndarray, occ: np.ndarray) -> np.ndarray:
    """Overlap pixel counts for every offset; entry ``[oy + h - 1, ox + w - 1]`` is offset ``(ox, oy)``."""
    H, W = target.shape
    h, w = occ.shape
    shape = (H + h - 1, W + w - 1)
    spec = np.fft.rfft2(target.astype(np.float64), shape) * np.fft.rfft2(occ[::-1, ::-1].astype(np.float64), shape)
    return np.rint(np.fft.irfft2(spec, shape)).astype(np.int64)


def _nearest_within(target: np.ndarray, occ: np.ndarray, desired: float, tolerance: float, near: tuple) -> tuple:
    """Offset within ``tolerance`` of ``desired`` closest to ``near``; ``(offset, ror, max_ror)``."""
    area = np.count_nonzero(target)
    h, w = occ.shape
    rates = overlap_map(target, occ) / area
    oy, ox = np.nonzero(np.abs(rates - desired) <= tolerance)
    max_ror = float(rates.max())
    if oy.size == 0:
        closest = float(rates.flat[np.argmin(np.abs(rates - desired))])
        raise InfeasiblePlacement(
            f"no integer placement within {tolerance} of {desired:.3f} (closest {closest:.3f})", max_ror
        )
    xs, ys = ox - (w - 1), oy - (h - 1)
    k = np.lexsort((xs, ys, (xs - near[0]) ** 2 + (ys - near[1]) ** 2))[0]
    return (int(xs[k]), int(ys[k])), float(rates[oy[k], ox[k]]), max_ror


# --------------------------------------------------------------------------
# compositing and dual annotation


def paste_mask(occluder_mask: np.ndarray, offset: tuple, height: int, width: int) -> BinaryMask:
    """The occluder mask clipped onto an ``height x width`` canvas."""
    canvas = np.zeros((height, width), dtype=bool)
    ox, oy = offset
    h, w = occluder_mask.shape
    x0, y0 = max(ox, 0), max(oy, 0)
    x1, y1 = min(ox + w, width), min(oy + h, height)
    if x1 > x0 and y1 > y0:
        canvas[y0:y1, x0:x1] = occluder_mask[y0 - oy:y1 - oy, x0 - ox:x1 - ox]
    return BinaryMask(canvas)


def composite(
    base_image: np.ndarray,
    target: AmodalInstance,
    occluder: CompleteObject,
    offset: tuple,
) -> SynthesizedSample:
    """Paste ``occluder`` over ``base_image``; the target keeps its amodal mask and loses visibility."""
    H, W = base_image.shape[:2]
    pasted = paste_mask(occluder.mask, offset, H, W)
    if pasted.area() == 0:
        raise ValueError(f"offset {offset} puts the occluder entirely outside the {W}x{H} canvas")
    image = np.array(base_image, copy=True)
    ox, oy = offset
    h, w = occluder.mask.shape
    x0, y0 = max(ox, 0), max(oy, 0)
    x1, y1 = min(ox + w, W), min(oy + h, H)
    region = occluder.mask[y0 - oy:y1 - oy, x0 - ox:x1 - ox]
    image[y0:y1, x0:x1][region] = occluder.crop[y0 - oy:y1 - oy, x0 - ox:x1 - ox][region]

    modal = subtract(target.modal_mask, pasted)
    occluded_target = AmodalInstance(
        target.image_id, modal, target.amodal_mask, target.category, ORIGIN_SYNTH_OCCLUDED, target.id
    )
    occluder_inst = AmodalInstance(
        target.image_id, pasted, pasted, occluder.category, ORIGIN_SYNTH_UNOCCLUDED
    )
    return SynthesizedSample(image, occluded_target, occluder_inst, tuple(offset), pasted)


def dual_emit(original: AmodalInstance, synthesized: AmodalInstance, pair_key: str,
              original_image_id=None, synthesized_image_id=None) -> tuple:
    """The unoccluded original and its occluded counterpart, linked by ``pair_key``."""
    first = AmodalInstance(
        original.image_id if original_image_id is None else original_image_id,
        original.amodal_mask, original.amodal_mask, original.category,
        ORIGIN_SYNTH_UNOCCLUDED, pair_key=pair_key,
    )
    second = AmodalInstance(
        synthesized.image_id if synthesized_image_id is None else synthesized_image_id,
        synthesized.modal_mask, synthesized.amodal_mask, synthesized.category,
        ORIGIN_SYNTH_OCCLUDED, pair_key=pair_key,
    )
    return first, second


# --------------------------------------------------------------------------
# toy shape corpus

SHAPE_KINDS = ("rectangle", "ellipse")


def noise_canvas(height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    base = rng.integers(40, 200, size=3)
    noise = rng.normal(0, 12, size=(height, width, 3))
    return np.clip(base + noise, 0, 255).astype(np.uint8)


def shape_mask(kind: str, height: int, width: int) -> np.ndarray:
    if kind == "rectangle":
        return np.ones((height, width), dtype=bool)
    if kind == "ellipse":
        yy = (np.arange(height) + 0.5 - height / 2) / (height / 2)
        xx = (np.arange(width) + 0.5 - width / 2) / (width / 2)
        m = yy[:, None] ** 2 + xx[None, :] ** 2 <= 1.0
        # guarantee the mask touches all four sides
        m[height // 2, :] = True
        m[:, width // 2] = True
        return m
    raise ValueError(f"unknown shape kind {kind!r}")


def random_shape_object(
    rng: np.random.Generator,
    long_range: tuple = (16, 30),
    aspect_range: tuple = (0.5, 1.0),
    color=None,
    source_id=None,
) -> CompleteObject:
    kind = SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))]
    long_side = int(rng.integers(long_range[0], long_range[1] + 1))
    short = max(2, int(round(long_side * rng.uniform(*aspect_range))))
    h, w = (long_side, short) if rng.random() < 0.5 else (short, long_side)
    mask = shape_mask(kind, h, w)
    if color is None:
        color = rng.integers(0, 256, size=3)
    color = np.asarray(color, dtype=float)
    shade = np.linspace(-25, 25, h)[:, None, None] * rng.choice([-1.0, 1.0])
    crop = np.clip(color + shade + rng.normal(0, 4, size=(h, w, 3)), 0, 255).astype(np.uint8)
    crop[~mask] = 0
    return CompleteObject(crop, mask, source_id, kind)


def _distinct_color(rng: np.random.Generator, avoid: Sequence[np.ndarray], min_dist: float = 90.0) -> np.ndarray:
    for _ in range(100):
        c = rng.integers(0, 256, size=3)
        if all(np.abs(c - np.asarray(a)).sum() >= min_dist for a in avoid):
            return c
    return c


def _paste_object(canvas: np.ndarray, obj: CompleteObject, x: int, y: int) -> None:
    h, w = obj.mask.shape
    canvas[y:y + h, x:x + w][obj.mask] = obj.crop[obj.mask]


@dataclass
class PairOutcome:
    index: int
    requested_ror: Optional[float]
    achieved_ror: Optional[float] = None
    skipped: bool = False
    reason: Optional[str] = None
    max_attainable: Optional[float] = None


@dataclass
class ShapeCorpus:
    """A synthesized toy corpus held in memory."""

    manifest: DatasetManifest
    images: dict  # image_id -> H x W x 3 uint8
    report: list  # PairOutcome per requested pair
    occluders: dict = field(default_factory=dict)  # synthesized image_id -> occluder AmodalInstance
    background: dict = field(default_factory=dict)  # synthesized image_id -> occluded target AmodalInstance

    def report_dict(self) -> dict:
        done = [p for p in self.report if not p.skipped]
        return {
            "pairs_requested": len(self.report),
            "pairs_synthesized": len(done),
            "pairs_skipped": [
                {"index": p.index, "requested_ror": p.requested_ror, "reason": p.reason,
                 "max_attainable": p.max_attainable}
                for p in self.report if p.skipped
            ],
            "samples": [
                {"index": p.index, "requested_ror": p.requested_ror, "achieved_ror": p.achieved_ror}
                for p in done
            ],
        }


def _paste_clutter(canvas: np.ndarray, rng: np.random.Generator, object_range: tuple,
                   target: CompleteObject, tx: int, ty: int) -> None:
    """Paint a shape whose box overlaps the target's box; the target is pasted over it afterwards."""
    size = canvas.shape[0]
    target_color = target.crop[target.mask].mean(axis=0)
    obj = random_shape_object(rng, object_range, color=_distinct_color(rng, [target_color]))
    dh, dw = obj.mask.shape
    th, tw = target.mask.shape
    x = int(np.clip(rng.integers(tx - dw + 1, tx + tw), 0, size - dw))
    y = int(np.clip(rng.integers(ty - dh + 1, ty + th), 0, size - dh))
    _paste_object(canvas, obj, x, y)


def synthesize_pair(
    index: int,
    cfg: SynthesisConfig,
    image_size: int = 64,
    dual: bool = True,
    object_range: tuple = (16, 30),
):
    """Build one (original, occluded) pair on a fresh canvas; seeds derive from ``(cfg.seed, index)``."""
    rng = np.random.default_rng([cfg.seed, index])
    background = noise_canvas(image_size, image_size, rng)
    target_obj = random_shape_object(rng, object_range, color=_distinct_color(rng, []), source_id=f"t{index}")
    th, tw = target_obj.mask.shape
    tx = int(rng.integers(0, image_size - tw + 1))
    ty = int(rng.integers(0, image_size - th + 1))
    original_image = background.copy()
    if cfg.clutter_probability > 0 and rng.random() < cfg.clutter_probability:
        _paste_clutter(original_image, rng, object_range, target_obj, tx, ty)
    _paste_object(original_image, target_obj, tx, ty)
    amodal = np.zeros((image_size, image_size), dtype=bool)
    amodal[ty:ty + th, tx:tx + tw] = target_obj.mask
    target = AmodalInstance(2 * index, amodal, amodal, target_obj.category, ORIGIN_SYNTH_UNOCCLUDED)

    desired = float(rng.uniform(*cfg.target_ror_range))
    outcome = PairOutcome(index, desired)
    target_color = target_obj.crop[target_obj.mask].mean(axis=0)
    best_max = 0.0
    for _ in range(cfg.max_attempts):
        occ_raw = random_shape_object(rng, object_range, color=_distinct_color(rng, [target_color]))
        occ = normalize_size(occ_raw, target_obj, cfg.scale_jitter, rng)
        start = default_start(target.amodal_box, occ.mask.shape, rng)
        try:
            placement = place_occluder(amodal, occ.mask, desired, cfg.placement_tolerance, start=start)
        except InfeasiblePlacement as exc:
            best_max = max(best_max, exc.max_attainable)
            continue
        sample = composite(original_image, target, occ, placement.offset)
        outcome.achieved_ror = occlusion_rate(sample.target)
        pair_key = f"pair-{cfg.seed}-{index}"
        if dual:
            entries = dual_emit(target, sample.target, pair_key, 2 * index, 2 * index + 1)
        else:
            entries = (dual_emit(target, sample.target, pair_key, 2 * index, 2 * index + 1)[1],)
        occluder_inst = AmodalInstance(2 * index + 1, sample.occluder.modal_mask, sample.occluder.amodal_mask,
                                       sample.occluder.category, ORIGIN_SYNTH_UNOCCLUDED, pair_key=pair_key)
        return outcome, original_image, sample.image, entries, occluder_inst
    outcome.skipped = True
    outcome.reason = "infeasible"
    outcome.max_attainable = best_max
    return outcome, None, None, (), None


def build_shape_corpus(
    n_pairs: int,
    cfg: SynthesisConfig = SynthesisConfig(),
    image_size: int = 64,
    dual: bool = True,
    name: str = "shapes",
    split: str = "train",
    start_index: int = 0,
    object_range: tuple = (16, 30),
) -> ShapeCorpus:
    """Synthesize ``n_pairs`` target/occluder pairs into a manifest.

    With ``dual`` each pair contributes the original image (target unoccluded)
    and the synthesized image (target occluded), one annotation each. Pairs
    whose requested rate cannot be met are skipped and listed in the report.
    """
    images_info, annotations, images, report = [], [], {}, []
    occluders, backgrounds = {}, {}
    next_id = 1
    for index in range(start_index, start_index + n_pairs):
        outcome, orig_img, synth_img, entries, occluder_inst = synthesize_pair(index, cfg, image_size, dual, object_range)
        report.append(outcome)
        if outcome.skipped:
            continue
        for inst in entries:
            img = orig_img if inst.origin == ORIGIN_SYNTH_UNOCCLUDED else synth_img
            images[inst.image_id] = img
            images_info.append(ImageInfo(inst.image_id, image_size, image_size, f"images/{inst.image_id:06d}.png"))
            inst.id = next_id
            next_id += 1
            annotations.append(inst)
            if inst.origin == ORIGIN_SYNTH_OCCLUDED:
                backgrounds[inst.image_id] = inst
        occluders[occluder_inst.image_id] = occluder_inst
    manifest = DatasetManifest(images_info, annotations, name, split,
                               {"dual_annotation": dual, "seed": cfg.seed})
    return ShapeCorpus(manifest, images, report, occluders, backgrounds)
