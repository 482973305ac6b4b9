"""Dataset cleaning rules and corpus occlusion statistics.

Each filter is a pure per-instance predicate returning a :class:`Decision`.
Thresholds are strict: an instance sitting exactly on a threshold is kept.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Union

from .manifest import DatasetManifest
from .masks import AmodalInstance, MaskError, occlusion_rate

LOW_VISIBILITY = "low_visibility"
HIGH_COVERAGE = "high_coverage"
STUFF_CLASS = "stuff_class"
EXCESS_OCCLUSION = "excess_occlusion"

FILTER_ORDER = ("visibility", "coverage", "class", "occlusion")


class Decision(NamedTuple):
    keep: bool
    reason: Optional[str] = None


KEEP = Decision(True)


def drop(reason: str) -> Decision:
    return Decision(False, reason)


@dataclass(frozen=True)
class FilterConfig:
    min_visible_ratio: float = 0.10
    max_image_coverage: float = 0.90
    stuff_categories: frozenset = field(default_factory=frozenset)
    max_walt_occlusion: float = 0.9
    enabled: tuple = FILTER_ORDER

    def __post_init__(self):
        for name in ("min_visible_ratio", "max_image_coverage", "max_walt_occlusion"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        unknown = set(self.enabled) - set(FILTER_ORDER)
        if unknown:
            raise ValueError(f"unknown filters: {sorted(unknown)}")
        object.__setattr__(self, "stuff_categories", frozenset(self.stuff_categories))


def load_stuff_list(path: Union[str, Path]) -> frozenset:
    """One category name per line; blank lines and ``#`` comments are ignored."""
    names = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            names.append(line)
    return frozenset(names)


def default_stuff_list() -> frozenset:
    """The bundled background-category list."""
    return load_stuff_list(Path(__file__).with_name("data") / "stuff_categories.txt")


def filter_visibility(inst: AmodalInstance, min_ratio: float = 0.10) -> Decision:
    amodal = inst.amodal_mask.area()
    if amodal == 0:
        raise MaskError("visibility ratio undefined for an empty amodal mask")
    if inst.modal_mask.area() / amodal < min_ratio:
        return drop(LOW_VISIBILITY)
    return KEEP


def filter_coverage(inst: AmodalInstance, height: int, width: int, max_ratio: float = 0.90) -> Decision:
    if height <= 0 or width <= 0:
        raise ValueError("image has zero size")
    if inst.amodal_mask.area() / (height * width) > max_ratio:
        return drop(HIGH_COVERAGE)
    return KEEP


def filter_class(inst: AmodalInstance, stuff_categories: Iterable[str]) -> Decision:
    if inst.category is not None and inst.category in set(stuff_categories):
        return drop(STUFF_CLASS)
    return KEEP


def filter_walt_occlusion(inst: AmodalInstance, max_occlusion: float = 0.9) -> Decision:
    if occlusion_rate(inst) > max_occlusion:
        return drop(EXCESS_OCCLUSION)
    return KEEP


def evaluate_filters(inst: AmodalInstance, cfg: FilterConfig) -> Decision:
    """First failing enabled filter, in :data:`FILTER_ORDER`."""
    h, w = inst.shape
    checks = {
        "visibility": lambda: filter_visibility(inst, cfg.min_visible_ratio),
        "coverage": lambda: filter_coverage(inst, h, w, cfg.max_image_coverage),
        "class": lambda: filter_class(inst, cfg.stuff_categories),
        "occlusion": lambda: filter_walt_occlusion(inst, cfg.max_walt_occlusion),
    }
    for name in FILTER_ORDER:
        if name in cfg.enabled:
            decision = checks[name]()
            if not decision.keep:
                return decision
    return KEEP


def apply_filters(manifest: DatasetManifest, cfg: FilterConfig) -> tuple:
    """Return ``(kept_manifest, report)`` where report is ``{"kept", "dropped_by_reason"}``."""
    kept = []
    reasons: Counter = Counter()
    for inst in manifest.annotations:
        decision = evaluate_filters(inst, cfg)
        if decision.keep:
            kept.append(inst)
        else:
            reasons[decision.reason] += 1
    report = {"kept": len(kept), "dropped_by_reason": dict(sorted(reasons.items()))}
    return manifest.with_annotations(kept), report


@dataclass(frozen=True)
class CorpusStats:
    n_instances: int
    n_images: int
    poi: float
    avg_ror: Optional[float]

    def to_dict(self) -> dict:
        return {"n_instances": self.n_instances, "n_images": self.n_images, "poi": self.poi, "avg_ror": self.avg_ror}


def compute_stats(manifest: Union[DatasetManifest, Iterable[AmodalInstance]]) -> CorpusStats:
    """Percentage of occluded instances and mean occluded ratio over occluded instances only."""
    if isinstance(manifest, DatasetManifest):
        instances = manifest.annotations
        n_images = len(manifest.images)
    else:
        instances = list(manifest)
        n_images = len({inst.image_id for inst in instances})
    if not instances:
        raise ValueError("statistics of an empty manifest are undefined")
    rors = [occlusion_rate(inst) for inst in instances if inst.is_occluded]
    poi = 100.0 * len(rors) / len(instances)
    avg_ror = 100.0 * math.fsum(rors) / len(rors) if rors else None
    return CorpusStats(len(instances), n_images, poi, avg_ror)
