import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from amodalseg.masks import (
    AmodalInstance,
    BinaryMask,
    BoundingBox,
    MaskError,
    box_to_mask,
    decode_counts_string,
    encode_counts_string,
    mask_area,
    mask_iou,
    occlusion_rate,
    rle_decode,
    rle_encode,
    rle_roundtrip,
    subtract,
    tight_bbox,
)


def block(h, w, y0, x0, bh, bw):
    m = np.zeros((h, w), dtype=bool)
    m[y0:y0 + bh, x0:x0 + bw] = True
    return m


masks_strategy = st.integers(1, 12).flatmap(
    lambda h: st.integers(1, 12).flatmap(lambda w: arrays(np.bool_, (h, w)))
)


def test_mask_area_examples():
    assert mask_area(np.zeros((4, 4))) == 0
    assert mask_area(np.ones((4, 4))) == 16
    assert mask_area(block(4, 4, 1, 1, 2, 2)) == 4


def test_area_from_counts_matches_dense():
    m = BinaryMask.from_counts([3, 2, 4, 7], 4, 4)
    assert m.area() == 9
    assert mask_area(m.dense) == 9


def test_mask_iou_examples():
    a = block(4, 4, 0, 0, 2, 2)
    b = block(4, 4, 1, 1, 2, 2)
    assert mask_iou(a, a) == 1.0
    assert mask_iou(a, block(4, 4, 2, 2, 2, 2)) == 0.0
    assert mask_iou(a, b) == pytest.approx(1 / 7, abs=1e-15)


def test_mask_iou_empty_pair_is_one():
    z = np.zeros((3, 3), bool)
    assert mask_iou(z, z) == 1.0


def test_mask_iou_dimension_mismatch():
    with pytest.raises(MaskError):
        mask_iou(np.ones((2, 2)), np.ones((2, 3)))


@given(masks_strategy, st.randoms())
def test_mask_iou_symmetric(a, rnd):
    b = np.array([[rnd.random() < 0.5 for _ in range(a.shape[1])] for _ in range(a.shape[0])], dtype=bool)
    assert mask_iou(a, b) == mask_iou(b, a)
    if a.any():
        assert mask_iou(a, a) == 1.0


def _instance(modal_area, amodal_area, width=10):
    amodal = np.zeros((10, width), bool)
    amodal.ravel()[:amodal_area] = True
    modal = np.zeros_like(amodal)
    modal.ravel()[:modal_area] = True
    return AmodalInstance(0, modal, amodal)


def test_occlusion_rate_examples():
    assert occlusion_rate(_instance(60, 100)) == pytest.approx(0.4, abs=1e-12)
    assert occlusion_rate(_instance(100, 100)) == 0.0
    assert occlusion_rate(_instance(0, 100)) == 1.0


def test_occlusion_rate_empty_amodal():
    with pytest.raises(MaskError):
        occlusion_rate(_instance(0, 0))


def test_instance_requires_modal_subset():
    with pytest.raises(MaskError):
        AmodalInstance(0, block(4, 4, 0, 0, 2, 2), block(4, 4, 2, 2, 2, 2))


def test_instance_flags_and_boxes():
    inst = AmodalInstance(0, block(8, 8, 2, 2, 3, 2), block(8, 8, 2, 2, 3, 4))
    assert inst.is_occluded
    assert occlusion_rate(inst) > 0
    assert inst.amodal_box == BoundingBox(2, 2, 4, 3, "amodal")
    assert inst.modal_box == BoundingBox(2, 2, 2, 3, "modal")
    same = AmodalInstance(0, block(8, 8, 2, 2, 3, 4), block(8, 8, 2, 2, 3, 4))
    assert not same.is_occluded


def _scan_bbox(m):
    # independent oracle: visit every pixel
    xs, ys = [], []
    for y in range(m.shape[0]):
        for x in range(m.shape[1]):
            if m[y, x]:
                xs.append(x)
                ys.append(y)
    return min(xs), min(ys), max(xs) - min(xs) + 1, max(ys) - min(ys) + 1


def test_tight_bbox_examples():
    m = np.zeros((6, 6), bool)
    m[3, 2] = True
    assert tight_bbox(m).as_list() == [2, 3, 1, 1]
    assert tight_bbox(np.ones((5, 7))).as_list() == [0, 0, 7, 5]
    L = np.zeros((6, 6), bool)
    L[1:5, 0] = True
    L[4, 0:3] = True
    assert tight_bbox(L).as_list() == list(_scan_bbox(L)) == [0, 1, 3, 4]


def test_tight_bbox_empty():
    with pytest.raises(MaskError):
        tight_bbox(np.zeros((3, 3)))


@given(masks_strategy)
def test_tight_bbox_matches_scan(m):
    if not m.any():
        return
    box = tight_bbox(m)
    assert (box.x, box.y, box.w, box.h) == _scan_bbox(m)
    assert tight_bbox(subtract(m, np.zeros_like(m))) == box


def test_rle_examples():
    assert rle_encode(np.zeros((3, 3)))["counts"] == [9]
    assert rle_encode(np.ones((3, 3)))["counts"] == [0, 9]


def test_rle_is_column_major():
    m = np.array([[1, 0], [1, 1]], bool)
    # column-major pixels: 1,1,0,1
    assert rle_encode(m)["counts"] == [0, 2, 1, 1]


def test_rle_malformed():
    with pytest.raises(MaskError):
        rle_decode({"size": [3, 3], "counts": [4, 4]})


def test_rle_random_16x16():
    rng = np.random.default_rng(0)
    m = rng.random((16, 16)) < 0.4
    assert np.array_equal(rle_roundtrip(m).dense, m)


@settings(max_examples=1000)
@given(masks_strategy)
def test_rle_bijection(m):
    rle = rle_encode(m)
    assert sum(rle["counts"]) == m.size
    assert np.array_equal(rle_decode(rle), m)
    assert BinaryMask.from_rle(rle) == BinaryMask(m)
    s = encode_counts_string(rle["counts"])
    assert decode_counts_string(s) == rle["counts"]


def test_compressed_string_known_value():
    # 0 zeros, 9 ones in a 3x3 grid -> two LEB-style chars
    rle = BinaryMask(np.ones((3, 3))).to_rle(compressed=True)
    assert rle["counts"] == "09"
    assert BinaryMask.from_rle(rle) == BinaryMask(np.ones((3, 3)))


def test_subtract_examples():
    sq = block(4, 4, 1, 1, 2, 2)
    assert subtract(sq, np.zeros((4, 4))) == BinaryMask(sq)
    assert subtract(sq, np.ones((4, 4))).area() == 0
    right = block(4, 4, 1, 2, 2, 1)
    left = subtract(sq, right)
    assert left.area() == 2
    assert np.array_equal(left.dense, block(4, 4, 1, 1, 2, 1))
    with pytest.raises(MaskError):
        subtract(sq, np.zeros((3, 4)))


def test_box_clamp_and_raster():
    b = BoundingBox(-2, 1, 5, 10)
    c = b.clamp(4, 6)
    assert c.as_list() == [0, 1, 3, 5]
    assert BoundingBox(10, 10, 3, 3).clamp(4, 4).is_degenerate
    assert box_to_mask(BoundingBox(1, 1, 2, 2), 4, 4) == BinaryMask(block(4, 4, 1, 1, 2, 2))
    with pytest.raises(ValueError):
        BoundingBox(0, 0, -1, 2)
