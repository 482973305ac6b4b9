"""Toy-scale experiments: learning signal and the three ablations.

All runs share one recipe. Synthesize a shape corpus, pretrain a small
"foundation" predictor on visible masks, then fine-tune only its decoder on
amodal masks. Each ablation varies one ingredient of that recipe.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .datasynth import ShapeCorpus, SynthesisConfig, build_shape_corpus
from .evaluation import Detection, EvalConfig, GroundTruth, average_precision
from .masks import AMODAL, MODAL, ORIGIN_SYNTH_OCCLUDED, BinaryMask, BoundingBox, mask_iou
from .model import AmodalPredictor, PredictorConfig, boxes_to_tensor
from .pipeline import refine_confidence
from .training import (
    Checkpoint,
    PromptPolicy,
    TrainConfig,
    TrainingSet,
    pretrain_foundation,
    train,
)

log = logging.getLogger(__name__)

PROMPT_POLICIES = (AMODAL, MODAL, "random")


@dataclass(frozen=True)
class ToyScale:
    """Sizes and optimizer settings for the toy runs.

    ``lr`` is larger than the library default: the toy model trains from
    scratch-ish weights for a few thousand steps, not from a large
    pretrained checkpoint.
    """

    train_pairs: int = 1000
    heldout_pairs: int = 200
    pretrain_pairs: int = 1000
    pretrain_iterations: int = 1000
    iterations: int = 1000
    lr: float = 1e-3
    batch_size: int = 32
    image_size: int = 64
    seed: int = 0
    clutter_probability: float = 1.0

    def model_config(self) -> PredictorConfig:
        return PredictorConfig(image_size=self.image_size, seed=self.seed)


@dataclass
class ToyData:
    train: ShapeCorpus
    heldout: ShapeCorpus
    pretrain: ShapeCorpus

    def train_set(self) -> TrainingSet:
        return TrainingSet.from_manifest(self.train.manifest, self.train.images, "train")

    def heldout_set(self) -> TrainingSet:
        return TrainingSet.from_manifest(self.heldout.manifest, self.heldout.images, "heldout")

    def pretrain_set(self) -> TrainingSet:
        return TrainingSet.from_manifest(self.pretrain.manifest, self.pretrain.images, "pretrain")


def make_toy_data(scale: ToyScale = ToyScale()) -> ToyData:
    """Three independent corpora; the held-out one keeps only occluded targets."""
    base = 1000 * scale.seed

    def corpus(n, offset, dual, split):
        cfg = SynthesisConfig(seed=base + offset, clutter_probability=scale.clutter_probability)
        return build_shape_corpus(n, cfg, scale.image_size, dual=dual, name="shapes", split=split)

    return ToyData(
        train=corpus(scale.train_pairs, 1, True, "train"),
        heldout=corpus(scale.heldout_pairs, 2, False, "heldout"),
        pretrain=corpus(scale.pretrain_pairs, 3, True, "pretrain"),
    )


def train_foundation(data: ToyData, scale: ToyScale = ToyScale()) -> Checkpoint:
    t0 = time.perf_counter()
    ckpt = pretrain_foundation([data.pretrain_set()], scale.model_config(), scale.pretrain_iterations,
                               lr=scale.lr, seed=scale.seed, batch_size=scale.batch_size)
    log.info("foundation: %d steps in %.0fs", scale.pretrain_iterations, time.perf_counter() - t0)
    return ckpt


def finetune(
    foundation: Checkpoint,
    datasets: Sequence[TrainingSet],
    policy: PromptPolicy,
    scale: ToyScale = ToyScale(),
) -> Checkpoint:
    tcfg = TrainConfig(lr=scale.lr, batch_size=scale.batch_size, iterations=scale.iterations, seed=scale.seed)
    t0 = time.perf_counter()
    ckpt = train(datasets, policy, scale.model_config(), tcfg, init=foundation)
    log.info("fine-tune (%s): %d steps in %.0fs", policy.mode, scale.iterations, time.perf_counter() - t0)
    return ckpt


# --------------------------------------------------------------------------
# measurements


@torch.no_grad()
def predict_masks(model: AmodalPredictor, data: TrainingSet, boxes: Sequence[BoundingBox],
                  indices: Sequence[int], chunk: int = 64) -> tuple:
    """Hard masks and IoU estimates for ``boxes[k]`` prompted on instance ``indices[k]``'s image."""
    model.eval()
    masks, ious = [], []
    for s in range(0, len(indices), chunk):
        idx = list(indices[s:s + chunk])
        pred = model(data.images[data.image_index[idx]], boxes_to_tensor(boxes[s:s + chunk]))
        masks.extend((pred.mask_logits > 0).numpy())
        ious.extend(pred.iou_estimate.numpy().tolist())
    return masks, ious


def occluded_indices(data: TrainingSet) -> list:
    return [k for k, inst in enumerate(data.instances) if inst.is_occluded]


def amodal_iou(model: AmodalPredictor, data: TrainingSet, prompt: str) -> np.ndarray:
    """Per-instance IoU with the amodal GT over occluded instances, prompting with ``prompt`` boxes."""
    idx = occluded_indices(data)
    boxes = [data.instances[k].modal_box if prompt == MODAL else data.instances[k].amodal_box for k in idx]
    masks, _ = predict_masks(model, data, boxes, idx)
    return np.array([mask_iou(m, data.instances[k].amodal_mask) for m, k in zip(masks, idx)])


def visible_copy_baseline(data: TrainingSet) -> np.ndarray:
    """IoU of predicting exactly the visible region."""
    return np.array([mask_iou(data.instances[k].modal_mask, data.instances[k].amodal_mask)
                     for k in occluded_indices(data)])


def learning_signal(model: AmodalPredictor, heldout: TrainingSet) -> dict:
    """Mean amodal IoU under modal and amodal box prompts, and the visible-copy baseline."""
    modal = float(amodal_iou(model, heldout, MODAL).mean())
    amodal = float(amodal_iou(model, heldout, AMODAL).mean())
    return {
        "n_instances": len(occluded_indices(heldout)),
        "iou_modal_prompt": modal,
        "iou_amodal_prompt": amodal,
        "iou_mean": (modal + amodal) / 2,
        "baseline": float(visible_copy_baseline(heldout).mean()),
    }


# --------------------------------------------------------------------------
# ablation: IoU refinement of detection scores


def _square(size: int, x: int, y: int, s: int) -> np.ndarray:
    m = np.zeros((size, size), dtype=bool)
    m[y:y + s, x:x + s] = True
    return m


def refinement_case() -> tuple:
    """A high-score detection with poor mask quality outranks a good one.

    One GT, two candidate masks. The front end scores the poor mask (IoU 0.6)
    at 0.9 and the good mask (IoU 1) at 0.8. Returns ``(dets, gts, ious)``.
    """
    gt = _square(20, 2, 2, 10)
    poor = np.zeros_like(gt)
    poor[2:12, 2:8] = True  # 60 of 100 pixels
    gts = [GroundTruth(0, BinaryMask(gt))]
    dets = [Detection(0, BinaryMask(poor), 0.9), Detection(0, BinaryMask(gt), 0.8)]
    return dets, gts, [mask_iou(poor, gt), 1.0]


def random_refinement_scene(rng: np.random.Generator, n_objects: int, adversarial: bool = False) -> tuple:
    """Disjoint square GTs with one detection each; the detection's mask is a random crop.

    With ``adversarial`` the front-end scores are sorted against mask quality.
    Returns ``(dets, gts, true_ious)``.
    """
    size, cell = 16 * n_objects, 16
    gts, masks, ious = [], [], []
    for k in range(n_objects):
        g = _square(size, k * cell + 1, 1, 12)
        keep_cols = int(rng.integers(1, 13))
        d = _square(size, k * cell + 1, 1, 12)
        d[:, k * cell + 1 + keep_cols:] = False
        gts.append(GroundTruth(0, BinaryMask(g)))
        masks.append(BinaryMask(d))
        ious.append(mask_iou(d, g))
    front = rng.uniform(0.05, 1.0, n_objects)
    if adversarial:
        ranked = np.empty(n_objects)
        ranked[np.argsort(ious, kind="stable")] = np.sort(front)[::-1]
        front = ranked
    dets = [Detection(0, m, float(s)) for m, s in zip(masks, front)]
    return dets, gts, ious


def refined(dets: Sequence[Detection], iou_estimates: Sequence[float]) -> list:
    return [Detection(d.image_id, d.mask, refine_confidence(d.score, float(e)), d.category)
            for d, e in zip(dets, iou_estimates)]


def iou_refine_ablation(cfg: EvalConfig = EvalConfig()) -> list:
    """AP with and without refinement on the constructed case (oracle IoU head)."""
    dets, gts, ious = refinement_case()
    plain = average_precision(dets, gts, cfg)
    ref = average_precision(refined(dets, ious), gts, cfg)
    return [
        {"variant": "front score", "ap": plain.ap, "ap50": plain.ap50, "ap75": plain.ap75},
        {"variant": "front score x IoU", "ap": ref.ap, "ap50": ref.ap50, "ap75": ref.ap75},
    ]


# --------------------------------------------------------------------------
# ablation: prompt policy


def prompt_type_ablation(
    foundation: Checkpoint,
    data: ToyData,
    scale: ToyScale = ToyScale(),
    trained: Optional[dict] = None,
) -> tuple:
    """Fine-tune once per prompt policy; score each with both prompt kinds.

    ``trained`` may supply already fine-tuned checkpoints by policy name.
    Returns ``(rows, checkpoints)``.
    """
    trained = dict(trained or {})
    train_set, heldout = data.train_set(), data.heldout_set()
    rows = []
    for mode in PROMPT_POLICIES:
        if mode not in trained:
            trained[mode] = finetune(foundation, [train_set], PromptPolicy(mode), scale)
        sig = learning_signal(trained[mode].build_model(), heldout)
        rows.append({"policy": mode, "iou_modal_prompt": sig["iou_modal_prompt"],
                     "iou_amodal_prompt": sig["iou_amodal_prompt"], "iou_mean": sig["iou_mean"]})
    return rows, trained


# --------------------------------------------------------------------------
# ablation: training composition


def occluded_only(data: TrainingSet) -> TrainingSet:
    return data.subset([k for k, inst in enumerate(data.instances) if inst.origin == ORIGIN_SYNTH_OCCLUDED])


def foreground_probe(model: AmodalPredictor, corpus: ShapeCorpus, image_size: int) -> dict:
    """Prompt each synthesized image's unoccluded foreground occluder.

    ``leakage`` is the fraction of predicted pixels outside the occluder's
    amodal mask, so a model that hallucinates hidden extent on objects that
    are not hidden scores high.
    """
    ids = sorted(i for i in corpus.occluders if i in corpus.images)
    insts = [corpus.occluders[i] for i in ids]
    images = torch.stack([torch.from_numpy(corpus.images[i]).permute(2, 0, 1).float() / 255.0 for i in ids])
    probe = TrainingSet(images, np.arange(len(ids)), insts, "probe")
    masks, _ = predict_masks(model, probe, [inst.amodal_box for inst in insts], list(range(len(ids))))
    leak, fg_iou = [], []
    for m, inst in zip(masks, insts):
        gt = inst.amodal_mask.dense
        area = int(m.sum())
        leak.append(float((m & ~gt).sum()) / area if area else 0.0)
        fg_iou.append(mask_iou(m, gt))
    return {"n_probe": len(ids), "leakage": float(np.mean(leak)), "foreground_iou": float(np.mean(fg_iou))}


def composition_ablation(
    foundation: Checkpoint,
    data: ToyData,
    scale: ToyScale = ToyScale(),
    trained: Optional[dict] = None,
) -> tuple:
    """Occluded-only versus mixed (dual-annotated) training, probed on foreground objects.

    ``trained`` may supply checkpoints under ``"occluded-only"`` and ``"mixed"``;
    the random-policy checkpoint trained on the full corpus serves as ``"mixed"``.
    Returns ``(rows, checkpoints)``.
    """
    trained = dict(trained or {})
    train_set = data.train_set()
    sources = {"occluded-only": occluded_only(train_set), "mixed": train_set}
    rows = []
    for regime, source in sources.items():
        if regime not in trained:
            trained[regime] = finetune(foundation, [source], PromptPolicy(), scale)
        probe = foreground_probe(trained[regime].build_model(), data.heldout, scale.image_size)
        rows.append({"regime": regime, **probe})
    return rows, trained


def format_table(rows: Sequence[dict]) -> str:
    """Plain aligned text table."""
    if not rows:
        return ""
    cols = list(rows[0])
    cell = lambda v: f"{v:.4f}" if isinstance(v, float) else str(v)
    widths = [max(len(c), *(len(cell(r[c])) for r in rows)) for c in cols]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(cell(r[c]).ljust(w) for c, w in zip(cols, widths)) for r in rows]
    return "\n".join(lines) + "\n"
