import numpy as np
import pytest
import torch

from amodalseg.masks import BoundingBox
from amodalseg.model import PARTS, AmodalPredictor, PredictorConfig, parameter_checksum

SMALL = PredictorConfig(image_size=32, embed_dim=16, mlp_dim=32, num_heads=2, seed=1)


def test_forward_shapes():
    m = AmodalPredictor(SMALL)
    out = m(torch.rand(5, 3, 32, 32), torch.tensor([[1.0, 2.0, 20.0, 30.0]] * 5))
    assert out.mask_logits.shape == (5, 32, 32)
    assert out.iou_estimate.shape == (5,)
    assert ((out.iou_estimate >= 0) & (out.iou_estimate <= 1)).all()


def test_same_seed_same_weights():
    assert parameter_checksum(AmodalPredictor(SMALL)) == parameter_checksum(AmodalPredictor(SMALL))
    other = PredictorConfig.from_dict({**SMALL.to_dict(), "seed": 2})
    assert parameter_checksum(AmodalPredictor(other)) != parameter_checksum(AmodalPredictor(SMALL))


def test_prompt_changes_output():
    m = AmodalPredictor(SMALL).eval()
    img = torch.rand(1, 3, 32, 32)
    a = m(img, torch.tensor([[1.0, 1.0, 10.0, 10.0]])).mask_logits
    b = m(img, torch.tensor([[15.0, 15.0, 30.0, 30.0]])).mask_logits
    assert not torch.allclose(a, b)


def test_trainable_parts():
    m = AmodalPredictor(SMALL)
    for part in PARTS:
        flags = {p.requires_grad for p in getattr(m, part).parameters()}
        assert flags == {part == "decoder"}
    m.set_trainable(PARTS)
    assert all(p.requires_grad for p in m.parameters())


def test_config_roundtrip_and_validation():
    assert PredictorConfig.from_dict(SMALL.to_dict()) == SMALL
    with pytest.raises(ValueError):
        PredictorConfig(trainable_parts=("decoder", "head"))
    with pytest.raises(ValueError):
        PredictorConfig(image_size=30, encoder_stride=4)


def test_predict_resizes_and_rejects_degenerate():
    m = AmodalPredictor(SMALL)
    img = np.random.default_rng(0).integers(0, 256, (20, 48, 3), dtype=np.uint8)
    out = m.predict(img, BoundingBox(2, 2, 10, 10))
    assert out.mask_logits.shape == (20, 48)
    assert out.mask().dtype == torch.bool
    with pytest.raises(ValueError):
        m.predict(img, BoundingBox(60, 2, 5, 5))


def test_single_sample_overfit():
    from amodalseg.datasynth import SynthesisConfig, build_shape_corpus
    from amodalseg.masks import mask_iou
    from amodalseg.training import PromptPolicy, TrainConfig, TrainingSet, train

    c = build_shape_corpus(1, SynthesisConfig(seed=0), dual=False)
    data = TrainingSet.from_manifest(c.manifest, c.images)
    cfg = PredictorConfig(trainable_parts=PARTS)
    ck = train([data], PromptPolicy("amodal"), cfg, TrainConfig(lr=1e-3, batch_size=1, iterations=500))
    inst = data.instances[0]
    image = c.images[inst.image_id]
    pred = ck.build_model().predict(image, inst.amodal_box)
    assert mask_iou(pred.mask().numpy(), inst.amodal_mask) >= 0.95
