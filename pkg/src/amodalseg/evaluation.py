"""Mask AP/AR in the COCO style, class-agnostic by default.

Per image, detections are ranked by score and greedily matched to the
unmatched ground truth of highest IoU (ties go to the lower GT index).
Precision is interpolated at 101 recall points ``0, 0.01, ..., 1``. Recall
thresholds are compared in exact integer arithmetic (``100 * tp >= k * n_gt``)
so a recall of exactly ``k/100`` always counts.

:func:`oracle_ap` re-derives the same numbers by brute force and exists only to
cross-check :func:`average_precision`.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .manifest import DatasetManifest, SchemaError
from .masks import BinaryMask, MaskError, as_mask

DEFAULT_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
N_RECALL_POINTS = 101
ORACLE_MAX_PER_IMAGE = 20


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple = DEFAULT_IOU_THRESHOLDS
    max_detections: int = 100
    class_agnostic: bool = True

    def __post_init__(self):
        t = tuple(float(x) for x in self.iou_thresholds)
        if not t:
            raise ValueError("need at least one IoU threshold")
        if any(not 0 < x <= 1 for x in t) or any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("IoU thresholds must be strictly increasing in (0, 1]")
        if self.max_detections < 1:
            raise ValueError("max_detections must be >= 1")
        object.__setattr__(self, "iou_thresholds", t)


@dataclass(frozen=True)
class GroundTruth:
    image_id: Union[int, str]
    mask: BinaryMask
    category: Optional[str] = None


@dataclass(frozen=True)
class Detection:
    image_id: Union[int, str]
    mask: BinaryMask
    score: float
    category: Optional[str] = None


@dataclass
class EvalReport:
    ap: Optional[float]
    ap50: Optional[float]
    ap75: Optional[float]
    ar: Optional[float]
    thresholds: tuple = ()
    precision: dict = field(default_factory=dict)  # threshold -> 101 interpolated precisions
    recall: dict = field(default_factory=dict)  # threshold -> final recall
    ap_per_threshold: dict = field(default_factory=dict)
    matches: dict = field(default_factory=dict)  # threshold -> [(image_id, det_rank, gt_index | -1)]
    per_image: dict = field(default_factory=dict)
    per_category: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {"ap": self.ap, "ap50": self.ap50, "ap75": self.ap75, "ar": self.ar}

    def to_dict(self) -> dict:
        d = self.summary()
        d["ap_per_threshold"] = {f"{t:.2f}": v for t, v in self.ap_per_threshold.items()}
        d["recall_per_threshold"] = {f"{t:.2f}": v for t, v in self.recall.items()}
        if self.per_image:
            d["per_image"] = {str(k): v.summary() for k, v in self.per_image.items()}
        if self.per_category:
            d["per_category"] = {str(k): v.summary() for k, v in self.per_category.items()}
        return d


def _image_sort_key(image_id) -> tuple:
    return (type(image_id).__name__, image_id)


def _rank_key(det: Detection) -> tuple:
    # Ties in score are broken by mask content so results do not depend on input order.
    return (-float(det.score), det.mask.area(), det.mask.counts)


def _group(items: Iterable, key) -> dict:
    groups: dict = {}
    for it in items:
        groups.setdefault(key(it), []).append(it)
    return groups


def iou_matrix(dets: Sequence[BinaryMask], gts: Sequence[BinaryMask]) -> np.ndarray:
    if not dets or not gts:
        return np.zeros((len(dets), len(gts)))
    shape = gts[0].shape
    for m in list(dets) + list(gts):
        if m.shape != shape:
            raise MaskError(f"mask dimensions differ: {m.shape} vs {shape}")
    d = np.stack([m.dense.ravel() for m in dets]).astype(np.int64)
    g = np.stack([m.dense.ravel() for m in gts]).astype(np.int64)
    inter = d @ g.T
    union = d.sum(1)[:, None] + g.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = inter / union
    return np.where(union == 0, 1.0, out)


def match_detections(ious: np.ndarray, iou_threshold: float) -> list:
    """Greedy assignment for detections already in rank order.

    ``ious`` is ``(n_det, n_gt)``. Returns, per detection, the matched GT
    index or -1.
    """
    n_det, n_gt = ious.shape
    taken = np.zeros(n_gt, dtype=bool)
    assignment = []
    for i in range(n_det):
        best, best_iou = -1, -1.0
        for j in range(n_gt):
            if taken[j] or ious[i, j] < iou_threshold:
                continue
            if ious[i, j] > best_iou:
                best, best_iou = j, ious[i, j]
        if best >= 0:
            taken[best] = True
        assignment.append(best)
    return assignment


def _interpolated_precision(tp_cum: np.ndarray, fp_cum: np.ndarray, n_gt: int) -> np.ndarray:
    q = np.zeros(N_RECALL_POINTS)
    if tp_cum.size == 0:
        return q
    precision = tp_cum / (tp_cum + fp_cum)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    k = np.arange(N_RECALL_POINTS)
    # first rank whose recall reaches k/100, in integers
    idx = np.searchsorted(tp_cum * (N_RECALL_POINTS - 1), k * n_gt, side="left")
    valid = idx < tp_cum.size
    q[valid] = envelope[idx[valid]]
    return q


def _evaluate_group(dets: list, gts: list, cfg: EvalConfig, keep_trace: bool = True) -> EvalReport:
    thresholds = tuple(sorted(set(cfg.iou_thresholds) | {0.5, 0.75}))
    n_gt = len(gts)
    if n_gt == 0:
        return EvalReport(None, None, None, None, cfg.iou_thresholds)

    det_by_img = _group(dets, lambda d: d.image_id)
    gt_by_img = _group(gts, lambda g: g.image_id)
    ranked = []  # (global sort key, flags per threshold)
    trace: dict = {t: [] for t in thresholds}
    for img_rank, image_id in enumerate(sorted(set(det_by_img) | set(gt_by_img), key=_image_sort_key)):
        img_dets = sorted(det_by_img.get(image_id, []), key=_rank_key)[: cfg.max_detections]
        img_gts = gt_by_img.get(image_id, [])
        ious = iou_matrix([d.mask for d in img_dets], [g.mask for g in img_gts])
        assignments = {t: match_detections(ious, t) for t in thresholds}
        for r, det in enumerate(img_dets):
            flags = tuple(assignments[t][r] >= 0 for t in thresholds)
            ranked.append(((-float(det.score), img_rank, r), flags))
            if keep_trace:
                for t in thresholds:
                    trace[t].append((image_id, r, assignments[t][r]))
    ranked.sort(key=lambda x: x[0])
    tps = np.array([flags for _, flags in ranked], dtype=np.int64).reshape(len(ranked), len(thresholds))

    report = EvalReport(None, None, None, None, cfg.iou_thresholds, matches=trace if keep_trace else {})
    for ti, t in enumerate(thresholds):
        tp_cum = np.cumsum(tps[:, ti])
        fp_cum = np.cumsum(1 - tps[:, ti])
        q = _interpolated_precision(tp_cum, fp_cum, n_gt)
        report.precision[t] = q
        report.ap_per_threshold[t] = 100.0 * float(q.mean())
        report.recall[t] = 100.0 * (float(tp_cum[-1]) / n_gt if tp_cum.size else 0.0)
    report.ap = float(np.mean([report.ap_per_threshold[t] for t in cfg.iou_thresholds]))
    report.ar = float(np.mean([report.recall[t] for t in cfg.iou_thresholds]))
    report.ap50 = report.ap_per_threshold[0.5]
    report.ap75 = report.ap_per_threshold[0.75]
    return report


def _mean_or_none(values: list) -> Optional[float]:
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def average_precision(dets: Sequence[Detection], gts: Sequence[GroundTruth], cfg: EvalConfig = EvalConfig()) -> EvalReport:
    """AP averaged over ``cfg.iou_thresholds``, AP50, AP75 and AR (all in percent).

    In class-aware mode detections only match GT of their own category and
    the reported numbers are means over categories that have ground truth.
    Returns ``None`` metrics when there is no ground truth at all.
    """
    dets = [_coerce_det(d) for d in dets]
    gts = [_coerce_gt(g) for g in gts]
    if cfg.class_agnostic:
        return _evaluate_group(dets, gts, cfg)

    det_by_cat = _group(dets, lambda d: d.category)
    per_category = {}
    for cat, cat_gts in sorted(_group(gts, lambda g: g.category).items(), key=lambda kv: str(kv[0])):
        per_category[cat] = _evaluate_group(det_by_cat.get(cat, []), cat_gts, cfg, keep_trace=False)
    reports = list(per_category.values())
    out = EvalReport(
        _mean_or_none([r.ap for r in reports]),
        _mean_or_none([r.ap50 for r in reports]),
        _mean_or_none([r.ap75 for r in reports]),
        _mean_or_none([r.ar for r in reports]),
        cfg.iou_thresholds,
        per_category=per_category,
    )
    for t in reports[0].ap_per_threshold if reports else ():
        out.ap_per_threshold[t] = _mean_or_none([r.ap_per_threshold[t] for r in reports])
        out.recall[t] = _mean_or_none([r.recall[t] for r in reports])
        out.precision[t] = np.mean([r.precision[t] for r in reports], axis=0)
    return out


def _coerce_det(d) -> Detection:
    if isinstance(d, Detection):
        return Detection(d.image_id, as_mask(d.mask), d.score, d.category)
    return Detection(d["image_id"], as_mask(d["mask"]), d["score"], d.get("category"))


def _coerce_gt(g) -> GroundTruth:
    if isinstance(g, GroundTruth):
        return GroundTruth(g.image_id, as_mask(g.mask), g.category)
    return GroundTruth(g["image_id"], as_mask(g["mask"]), g.get("category"))


# --------------------------------------------------------------------------
# brute-force reference


def _count_iou(a: list, b: list) -> float:
    inter = union = 0
    for x, y in zip(a, b):
        inter += x and y
        union += x or y
    return 1.0 if union == 0 else inter / union


def oracle_ap(dets: Sequence[Detection], gts: Sequence[GroundTruth], cfg: EvalConfig = EvalConfig()) -> EvalReport:
    """Reference evaluator: explicit loops and an exact precision/recall staircase.

    Only meant for small scenes (at most 20 detections and 20 GT per image).
    """
    dets = [_coerce_det(d) for d in dets]
    gts = [_coerce_gt(g) for g in gts]
    if not cfg.class_agnostic:
        cats = sorted({g.category for g in gts}, key=str)
        reports = [
            oracle_ap([d for d in dets if d.category == c], [g for g in gts if g.category == c],
                      EvalConfig(cfg.iou_thresholds, cfg.max_detections, True))
            for c in cats
        ]
        if not reports:
            return EvalReport(None, None, None, None, cfg.iou_thresholds)
        mean = lambda xs: sum(xs) / len(xs)
        return EvalReport(mean([r.ap for r in reports]), mean([r.ap50 for r in reports]),
                          mean([r.ap75 for r in reports]), mean([r.ar for r in reports]), cfg.iou_thresholds)

    images = sorted({d.image_id for d in dets} | {g.image_id for g in gts}, key=_image_sort_key)
    for image_id in images:
        if sum(d.image_id == image_id for d in dets) > ORACLE_MAX_PER_IMAGE or \
                sum(g.image_id == image_id for g in gts) > ORACLE_MAX_PER_IMAGE:
            raise ValueError(f"oracle size guard: image {image_id!r} has more than {ORACLE_MAX_PER_IMAGE} instances")
    n_gt = len(gts)
    if n_gt == 0:
        return EvalReport(None, None, None, None, cfg.iou_thresholds)

    def ap_and_recall(threshold: float) -> tuple:
        outcomes = []  # (score, image rank, det rank, is_tp)
        for img_rank, image_id in enumerate(images):
            img_dets = [d for d in dets if d.image_id == image_id]
            img_dets.sort(key=lambda d: (-float(d.score), d.mask.area(), d.mask.counts))
            img_dets = img_dets[: cfg.max_detections]
            img_gts = [g for g in gts if g.image_id == image_id]
            gt_pixels = [g.mask.dense.ravel().tolist() for g in img_gts]
            used = [False] * len(img_gts)
            for r, d in enumerate(img_dets):
                pixels = d.mask.dense.ravel().tolist()
                if img_gts and len(pixels) != len(gt_pixels[0]):
                    raise MaskError("mask dimensions differ")
                choice, choice_iou = None, None
                for j, gp in enumerate(gt_pixels):
                    if used[j]:
                        continue
                    v = _count_iou(pixels, gp)
                    if v >= threshold and (choice is None or v > choice_iou):
                        choice, choice_iou = j, v
                if choice is not None:
                    used[choice] = True
                outcomes.append((-float(d.score), img_rank, r, choice is not None))
        outcomes.sort()
        staircase = []  # (recall, precision) after each prefix, exact
        tp = 0
        for k, (_, _, _, hit) in enumerate(outcomes, start=1):
            tp += hit
            staircase.append((Fraction(tp, n_gt), Fraction(tp, k)))
        total = Fraction(0)
        for j in range(N_RECALL_POINTS):
            level = Fraction(j, N_RECALL_POINTS - 1)
            reachable = [p for r, p in staircase if r >= level]
            total += max(reachable) if reachable else 0
        return float(100 * total / N_RECALL_POINTS), 100.0 * tp / n_gt

    results = {t: ap_and_recall(t) for t in sorted(set(cfg.iou_thresholds) | {0.5, 0.75})}
    ts = cfg.iou_thresholds
    return EvalReport(
        sum(results[t][0] for t in ts) / len(ts),
        results[0.5][0],
        results[0.75][0],
        sum(results[t][1] for t in ts) / len(ts),
        ts,
        ap_per_threshold={t: v[0] for t, v in results.items()},
        recall={t: v[1] for t, v in results.items()},
    )


# --------------------------------------------------------------------------
# files


def load_results(path: Union[str, Path]) -> list:
    """Read a result file (JSON array or JSON lines) into raw record dicts."""
    text = Path(path).read_text()
    stripped = text.lstrip()
    try:
        if stripped.startswith("["):
            return json.loads(text)
        return [json.loads(line) for line in text.splitlines() if line.strip()]
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from exc


def evaluate_run(
    manifest: DatasetManifest,
    results: Union[str, Path, list],
    cfg: EvalConfig = EvalConfig(),
    score_field: str = "score_refined",
    per_image: bool = True,
) -> EvalReport:
    """Evaluate a result file against a manifest's amodal masks.

    ``score_field`` picks the ranking score; records lacking it fall back to
    ``score``.
    """
    records = load_results(results) if isinstance(results, (str, Path)) else list(results)
    images = {img.id: img for img in manifest.images}
    problems = []
    dets = []
    for k, rec in enumerate(records):
        if rec.get("image_id") not in images:
            problems.append(f"record {k}: image_id {rec.get('image_id')!r} not in manifest")
            continue
        if "segmentation" not in rec:
            problems.append(f"record {k}: missing segmentation")
            continue
        try:
            mask = BinaryMask.from_rle(rec["segmentation"])
        except (MaskError, KeyError, TypeError) as exc:
            problems.append(f"record {k}: bad segmentation ({exc})")
            continue
        img = images[rec["image_id"]]
        if mask.shape != (img.height, img.width):
            problems.append(f"record {k}: segmentation size {mask.shape} differs from image")
            continue
        score = rec.get(score_field, rec.get("score"))
        if score is None:
            problems.append(f"record {k}: no score")
            continue
        dets.append(Detection(rec["image_id"], mask, float(score), rec.get("category")))
    if problems:
        raise SchemaError(f"result file does not match manifest ({len(problems)} problems)", problems)

    gts = [GroundTruth(a.image_id, a.amodal_mask, a.category) for a in manifest.annotations]
    report = average_precision(dets, gts, cfg)
    if per_image:
        det_by_img = _group(dets, lambda d: d.image_id)
        gt_by_img = _group(gts, lambda g: g.image_id)
        for image_id in sorted(images, key=_image_sort_key):
            if image_id in gt_by_img or image_id in det_by_img:
                report.per_image[image_id] = average_precision(
                    det_by_img.get(image_id, []), gt_by_img.get(image_id, []), cfg
                )
    return report


def write_pr_csv(report: EvalReport, path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iou_threshold", "recall", "precision"])
        for t in sorted(report.precision):
            for k, p in enumerate(report.precision[t]):
                writer.writerow([f"{t:.2f}", f"{k / (N_RECALL_POINTS - 1):.2f}", f"{p:.6f}"])
