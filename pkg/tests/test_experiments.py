import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from amodalseg.evaluation import average_precision
from amodalseg.experiments import (
    format_table,
    iou_refine_ablation,
    occluded_only,
    random_refinement_scene,
    refined,
    refinement_case,
)
from amodalseg.training import TrainingSet
from amodalseg.datasynth import SynthesisConfig, build_shape_corpus


def test_refinement_case_numbers():
    dets, gts, ious = refinement_case()
    assert ious[0] == 0.6
    plain, ref = iou_refine_ablation()
    assert ref["ap"] > plain["ap"]
    assert ref["ap"] == 100.0


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_oracle_refinement_never_lowers_ap(seed, n):
    dets, gts, ious = random_refinement_scene(np.random.default_rng(seed), n)
    before = average_precision(dets, gts).ap
    after = average_precision(refined(dets, ious), gts).ap
    assert after >= before - 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 6))
def test_oracle_refinement_helps_adversarial_order(seed, n):
    rng = np.random.default_rng(seed)
    dets, gts, ious = random_refinement_scene(rng, n, adversarial=True)
    if len(set(ious)) == 1:
        return
    assert average_precision(refined(dets, ious), gts).ap >= average_precision(dets, gts).ap


def test_occluded_only_subset():
    c = build_shape_corpus(6, SynthesisConfig(seed=3), image_size=32, object_range=(8, 14))
    full = TrainingSet.from_manifest(c.manifest, c.images)
    sub = occluded_only(full)
    assert len(sub) == len(full) // 2
    assert all(i.is_occluded for i in sub.instances)


def test_format_table():
    text = format_table([{"a": 1.23456, "b": "x"}, {"a": None, "b": "yy"}])
    lines = text.splitlines()
    assert len(lines) == 3 and lines[0].split() == ["a", "b"] and "1.23" in lines[1]
