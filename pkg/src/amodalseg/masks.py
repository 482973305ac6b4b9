"""Binary masks, boxes and the geometric quantities built on them.

Masks are stored either as a dense boolean grid or as COCO-style uncompressed
run-length counts (column-major, first run counts zeros). Both payloads sit
behind :class:`BinaryMask`; conversion happens lazily and is bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence, Union

import numpy as np

MODAL = "modal"
AMODAL = "amodal"
BOX_KINDS = (MODAL, AMODAL)

ORIGIN_REAL = "real"
ORIGIN_SYNTH_OCCLUDED = "synthetic-occluded"
ORIGIN_SYNTH_UNOCCLUDED = "synthetic-unoccluded"
ORIGINS = (ORIGIN_REAL, ORIGIN_SYNTH_OCCLUDED, ORIGIN_SYNTH_UNOCCLUDED)


class MaskError(ValueError):
    """Raised for malformed masks or incompatible mask operands."""


class BinaryMask:
    """A binary grid of ``height x width`` pixels.

    Construct from a dense array (``BinaryMask(arr)``) or from run-length
    counts (``BinaryMask.from_counts(counts, h, w)``). Instances are treated
    as immutable; the dense view is returned read-only.
    """

    __slots__ = ("height", "width", "_dense", "_counts")

    def __init__(self, array):
        arr = np.asarray(array)
        if arr.ndim != 2:
            raise MaskError(f"mask must be 2-D, got shape {arr.shape}")
        dense = arr.astype(bool, copy=True)
        dense.setflags(write=False)
        self.height, self.width = dense.shape
        self._dense: Optional[np.ndarray] = dense
        self._counts: Optional[tuple] = None

    @classmethod
    def from_counts(cls, counts: Sequence[int], height: int, width: int) -> "BinaryMask":
        counts = tuple(int(c) for c in counts)
        if height < 0 or width < 0:
            raise MaskError("negative mask dimensions")
        if any(c < 0 for c in counts):
            raise MaskError("RLE counts must be non-negative")
        if sum(counts) != height * width:
            raise MaskError(
                f"RLE counts sum to {sum(counts)}, expected {height}x{width}={height * width}"
            )
        self = cls.__new__(cls)
        self.height, self.width = int(height), int(width)
        self._dense = None
        self._counts = counts
        return self

    @classmethod
    def from_rle(cls, rle: dict) -> "BinaryMask":
        """Build from a COCO RLE dict; ``counts`` may be a list or a compressed string."""
        h, w = (int(v) for v in rle["size"])
        counts = rle["counts"]
        if isinstance(counts, (bytes, str)):
            counts = decode_counts_string(counts)
        return cls.from_counts(counts, h, w)

    @classmethod
    def zeros(cls, height: int, width: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))

    @property
    def shape(self) -> tuple:
        return (self.height, self.width)

    @property
    def dense(self) -> np.ndarray:
        if self._dense is None:
            self._dense = _decode_counts(self._counts, self.height, self.width)
        return self._dense

    @property
    def counts(self) -> tuple:
        if self._counts is None:
            self._counts = _encode_counts(self._dense)
        return self._counts

    def to_rle(self, compressed: bool = False) -> dict:
        counts = encode_counts_string(self.counts) if compressed else list(self.counts)
        return {"size": [self.height, self.width], "counts": counts}

    def area(self) -> int:
        if self._dense is not None:
            return int(np.count_nonzero(self._dense))
        return int(sum(self._counts[1::2]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.shape == other.shape and self.counts == other.counts

    def __hash__(self) -> int:
        return hash((self.shape, self.counts))

    def __repr__(self) -> str:
        return f"BinaryMask({self.height}x{self.width}, area={self.area()})"


MaskLike = Union[BinaryMask, np.ndarray]


def as_mask(m: MaskLike) -> BinaryMask:
    return m if isinstance(m, BinaryMask) else BinaryMask(m)


def _encode_counts(dense: np.ndarray) -> tuple:
    flat = np.asarray(dense, dtype=np.uint8).ravel(order="F")
    if flat.size == 0:
        return (0,)
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return tuple(int(r) for r in runs)


def _decode_counts(counts: Sequence[int], height: int, width: int) -> np.ndarray:
    values = np.zeros(len(counts), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, np.asarray(counts, dtype=np.int64))
    dense = flat.reshape((width, height)).T.copy()
    dense.setflags(write=False)
    return dense


def rle_encode(m: MaskLike) -> dict:
    """Uncompressed COCO RLE: ``{"size": [h, w], "counts": [...]}``."""
    return as_mask(m).to_rle()


def rle_decode(rle: dict) -> np.ndarray:
    return BinaryMask.from_rle(rle).dense


def rle_roundtrip(m: MaskLike) -> BinaryMask:
    mask = as_mask(m)
    return BinaryMask.from_rle(rle_encode(mask.dense))


def encode_counts_string(counts: Sequence[int]) -> str:
    """COCO compressed-string codec (LEB128-like, 5 bits per char, delta over runs i-2)."""
    out = []
    for i, x in enumerate(counts):
        x = int(x)
        if i > 2:
            x -= int(counts[i - 2])
        more = True
        while more:
            c = x & 0x1F
            x >>= 5
            more = (x != -1) if (c & 0x10) else (x != 0)
            if more:
                c |= 0x20
            out.append(chr(c + 48))
    return "".join(out)


def decode_counts_string(s: Union[str, bytes]) -> list:
    if isinstance(s, bytes):
        s = s.decode("ascii")
    counts: list = []
    p = 0
    while p < len(s):
        x = 0
        k = 0
        more = True
        while more:
            c = ord(s[p]) - 48
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
        if len(counts) > 2:
            x += counts[-2]
        counts.append(x)
    return counts


def _check_same_shape(a: BinaryMask, b: BinaryMask) -> None:
    if a.shape != b.shape:
        raise MaskError(f"mask dimensions differ: {a.shape} vs {b.shape}")


def mask_area(m: MaskLike) -> int:
    return as_mask(m).area()


def mask_iou(a: MaskLike, b: MaskLike) -> float:
    """Intersection over union; two empty masks count as perfect agreement (1.0)."""
    a, b = as_mask(a), as_mask(b)
    _check_same_shape(a, b)
    inter = int(np.count_nonzero(a.dense & b.dense))
    union = int(np.count_nonzero(a.dense | b.dense))
    if union == 0:
        return 1.0
    return inter / union


def subtract(amodal: MaskLike, cover: MaskLike) -> BinaryMask:
    """Pixels of ``amodal`` not hidden by ``cover``."""
    amodal, cover = as_mask(amodal), as_mask(cover)
    _check_same_shape(amodal, cover)
    return BinaryMask(amodal.dense & ~cover.dense)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixel-corner coordinates, covering ``[x, x+w) x [y, y+h)``."""

    x: float
    y: float
    w: float
    h: float
    kind: str = MODAL

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValueError(f"negative box extent: w={self.w}, h={self.h}")
        if self.kind not in BOX_KINDS:
            raise ValueError(f"unknown box kind {self.kind!r}")

    @property
    def x1(self) -> float:
        return self.x + self.w

    @property
    def y1(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def is_degenerate(self) -> bool:
        return self.w <= 0 or self.h <= 0

    @property
    def center(self) -> tuple:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def xyxy(self) -> tuple:
        return (self.x, self.y, self.x1, self.y1)

    def as_list(self) -> list:
        return [self.x, self.y, self.w, self.h]

    def clamp(self, width: int, height: int) -> "BoundingBox":
        """Clip to the image; the result may be degenerate (zero area)."""
        x0 = min(max(self.x, 0), width)
        y0 = min(max(self.y, 0), height)
        x1 = min(max(self.x1, 0), width)
        y1 = min(max(self.y1, 0), height)
        return BoundingBox(x0, y0, max(x1 - x0, 0), max(y1 - y0, 0), self.kind)

    def with_kind(self, kind: str) -> "BoundingBox":
        return BoundingBox(self.x, self.y, self.w, self.h, kind)


def tight_bbox(m: MaskLike, kind: str = MODAL) -> BoundingBox:
    """Smallest box containing every set pixel."""
    dense = as_mask(m).dense
    rows = np.flatnonzero(dense.any(axis=1))
    if rows.size == 0:
        raise MaskError("tight_bbox of an empty mask")
    cols = np.flatnonzero(dense.any(axis=0))
    y0, y1 = int(rows[0]), int(rows[-1]) + 1
    x0, x1 = int(cols[0]), int(cols[-1]) + 1
    return BoundingBox(x0, y0, x1 - x0, y1 - y0, kind)


def box_to_mask(box: BoundingBox, height: int, width: int) -> BinaryMask:
    """Rasterize a box, including every pixel whose center falls inside it."""
    ys = np.arange(height) + 0.5
    xs = np.arange(width) + 0.5
    inside_y = (ys >= box.y) & (ys < box.y1)
    inside_x = (xs >= box.x) & (xs < box.x1)
    return BinaryMask(np.outer(inside_y, inside_x))


@dataclass(eq=False)
class AmodalInstance:
    """One object with its visible (modal) and complete (amodal) masks.

    ``modal_mask`` must be a subset of ``amodal_mask``; boxes and the occlusion
    flag are derived from the masks so they can never disagree with them.
    """

    image_id: Union[int, str]
    modal_mask: BinaryMask
    amodal_mask: BinaryMask
    category: Optional[str] = None
    origin: str = ORIGIN_REAL
    id: Optional[int] = None
    pair_key: Optional[str] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.modal_mask = as_mask(self.modal_mask)
        self.amodal_mask = as_mask(self.amodal_mask)
        _check_same_shape(self.modal_mask, self.amodal_mask)
        if self.origin not in ORIGINS:
            raise ValueError(f"unknown origin {self.origin!r}")
        if np.any(self.modal_mask.dense & ~self.amodal_mask.dense):
            raise MaskError("modal mask is not contained in the amodal mask")

    @property
    def shape(self) -> tuple:
        return self.amodal_mask.shape

    @property
    def is_occluded(self) -> bool:
        return self.modal_mask != self.amodal_mask

    @cached_property
    def amodal_box(self) -> BoundingBox:
        return tight_bbox(self.amodal_mask, AMODAL)

    @cached_property
    def modal_box(self) -> BoundingBox:
        """Tight box of the visible region; falls back to the amodal box when fully hidden."""
        if self.modal_mask.area() == 0:
            return self.amodal_box.with_kind(MODAL)
        return tight_bbox(self.modal_mask, MODAL)


def occlusion_rate(inst: AmodalInstance) -> float:
    """Fraction of the amodal region that is hidden: ``1 - |modal| / |amodal|``."""
    amodal_area = inst.amodal_mask.area()
    if amodal_area == 0:
        raise MaskError("occlusion rate undefined for an empty amodal mask")
    return 1.0 - inst.modal_mask.area() / amodal_area
