"""Annotation manifests: images plus paired visible/amodal instance masks.

On disk a manifest is a JSON document::

    {"info": {"name": ..., "split": ...},
     "images": [{"id", "width", "height", "file"}],
     "annotations": [{"id", "image_id", "category"?, "visible_segmentation",
                      "amodal_segmentation", "origin", "pair_key"?}]}

Segmentations are COCO uncompressed RLE dicts (compressed strings are also
accepted on read). Serialization is canonical (sorted keys, fixed separators)
so equal manifests produce identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Union

import jsonschema
import numpy as np

from .masks import ORIGINS, AmodalInstance, BinaryMask, MaskError


class SchemaError(ValueError):
    """A file does not match its schema; ``problems`` lists every violation found."""

    def __init__(self, message: str, problems: Optional[list] = None):
        super().__init__(message)
        self.problems = problems or [message]


_RLE = {
    "type": "object",
    "required": ["size", "counts"],
    "properties": {
        "size": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 2, "maxItems": 2},
        "counts": {"oneOf": [{"type": "array", "items": {"type": "integer", "minimum": 0}}, {"type": "string"}]},
    },
}

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["images", "annotations"],
    "properties": {
        "info": {"type": "object"},
        "images": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "width", "height"],
                "properties": {
                    "id": {"type": ["integer", "string"]},
                    "width": {"type": "integer", "minimum": 1},
                    "height": {"type": "integer", "minimum": 1},
                    "file": {"type": ["string", "null"]},
                },
            },
        },
        "annotations": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "image_id", "visible_segmentation", "amodal_segmentation"],
                "properties": {
                    "id": {"type": "integer"},
                    "image_id": {"type": ["integer", "string"]},
                    "category": {"type": ["string", "null"]},
                    "visible_segmentation": _RLE,
                    "amodal_segmentation": _RLE,
                    "origin": {"enum": list(ORIGINS)},
                    "pair_key": {"type": ["string", "null"]},
                },
            },
        },
    },
}


@dataclass(frozen=True)
class ImageInfo:
    id: Union[int, str]
    width: int
    height: int
    file: Optional[str] = None


@dataclass
class DatasetManifest:
    images: list = field(default_factory=list)
    annotations: list = field(default_factory=list)
    name: str = "dataset"
    split: str = "train"
    info: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.annotations)

    def __iter__(self) -> Iterator[AmodalInstance]:
        return iter(self.annotations)

    def image(self, image_id) -> ImageInfo:
        return self._image_index()[image_id]

    def _image_index(self) -> dict:
        return {img.id: img for img in self.images}

    def by_image(self) -> dict:
        groups: dict = {img.id: [] for img in self.images}
        for ann in self.annotations:
            groups.setdefault(ann.image_id, []).append(ann)
        return groups

    def with_annotations(self, annotations: Iterable[AmodalInstance]) -> "DatasetManifest":
        return DatasetManifest(list(self.images), list(annotations), self.name, self.split, dict(self.info))

    def to_dict(self) -> dict:
        info = dict(self.info)
        info.update(name=self.name, split=self.split)
        return {
            "info": info,
            "images": [_image_to_dict(img) for img in self.images],
            "annotations": [annotation_to_dict(a) for a in self.annotations],
        }


def _image_to_dict(img: ImageInfo) -> dict:
    d = {"id": img.id, "width": img.width, "height": img.height}
    if img.file is not None:
        d["file"] = img.file
    return d


def annotation_to_dict(inst: AmodalInstance) -> dict:
    d = {
        "id": inst.id,
        "image_id": inst.image_id,
        "visible_segmentation": inst.modal_mask.to_rle(),
        "amodal_segmentation": inst.amodal_mask.to_rle(),
        "origin": inst.origin,
    }
    if inst.category is not None:
        d["category"] = inst.category
    if inst.pair_key is not None:
        d["pair_key"] = inst.pair_key
    return d


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n"


def _schema_problems(doc, schema) -> list:
    validator = jsonschema.Draft7Validator(schema)
    problems = []
    for err in sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path))):
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        problems.append(f"{where}: {err.message}")
    return problems


def manifest_from_dict(doc: dict) -> DatasetManifest:
    problems = _schema_problems(doc, MANIFEST_SCHEMA)
    if problems:
        raise SchemaError(f"manifest schema violation ({len(problems)} problems): {problems[0]}", problems)

    images = [ImageInfo(im["id"], im["width"], im["height"], im.get("file")) for im in doc["images"]]
    index = {img.id: img for img in images}
    if len(index) != len(images):
        problems.append("images: duplicate image ids")
    annotations = []
    for k, ann in enumerate(doc["annotations"]):
        img = index.get(ann["image_id"])
        if img is None:
            problems.append(f"annotations/{k}: unknown image_id {ann['image_id']!r}")
            continue
        try:
            vis = BinaryMask.from_rle(ann["visible_segmentation"])
            amo = BinaryMask.from_rle(ann["amodal_segmentation"])
            if vis.shape != (img.height, img.width) or amo.shape != (img.height, img.width):
                raise MaskError(f"segmentation size differs from image {img.height}x{img.width}")
            annotations.append(
                AmodalInstance(
                    image_id=ann["image_id"],
                    modal_mask=vis,
                    amodal_mask=amo,
                    category=ann.get("category"),
                    origin=ann.get("origin", "real"),
                    id=ann["id"],
                    pair_key=ann.get("pair_key"),
                )
            )
        except (MaskError, ValueError) as exc:
            problems.append(f"annotations/{k}: {exc}")
    if problems:
        raise SchemaError(f"manifest invalid ({len(problems)} problems): {problems[0]}", problems)

    info = dict(doc.get("info", {}))
    name = info.pop("name", "dataset")
    split = info.pop("split", "train")
    return DatasetManifest(images, annotations, name, split, info)


def load_manifest(path: Union[str, Path]) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
    return manifest_from_dict(doc)


def save_manifest(manifest: DatasetManifest, path: Union[str, Path]) -> None:
    Path(path).write_text(canonical_json(manifest.to_dict()))


def load_image(manifest_path: Union[str, Path], img: ImageInfo) -> np.ndarray:
    """Read an image referenced by a manifest as an ``H x W x 3`` uint8 array."""
    from PIL import Image

    if img.file is None:
        raise FileNotFoundError(f"image {img.id!r} has no file")
    p = Path(img.file)
    if not p.is_absolute():
        p = Path(manifest_path).parent / p
    with Image.open(p) as im:
        return np.asarray(im.convert("RGB"))
