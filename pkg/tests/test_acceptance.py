"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 9 and 10(b, c) share one foundation model and four decoder
fine-tunes, built once per session by the ``toy`` fixture.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np
import pytest
import torch

from amodalseg import experiments as X
from amodalseg.datafilter import FilterConfig, apply_filters, compute_stats, filter_coverage, filter_visibility
from amodalseg.datasynth import SynthesisConfig, build_shape_corpus, normalize_size, random_shape_object
from amodalseg.evaluation import Detection, GroundTruth, average_precision, oracle_ap
from amodalseg.losses import dice_loss, focal_loss, iou_loss, total_loss
from amodalseg.manifest import DatasetManifest, ImageInfo
from amodalseg.masks import AMODAL, MODAL, AmodalInstance, BinaryMask
from amodalseg.model import AmodalPredictor, PredictorConfig, parameter_checksum
from amodalseg.pipeline import ranked_indices, refine_confidence
from amodalseg.training import (
    MixtureSpec,
    PromptPolicy,
    TrainingSet,
    make_batch,
    make_optimizer,
    sample_dataset,
    sample_prompt,
    train_step,
)

TOY_SCALE = X.ToyScale()


def t64(a):
    return torch.tensor(np.asarray(a, dtype=np.float64))


def rect(h, w, y0, x0, bh, bw):
    m = np.zeros((h, w), dtype=bool)
    m[y0:y0 + bh, x0:x0 + bw] = True
    return m


# ------------------------------------------------------------ 1. losses


def _central_fd(f, x, eps=1e-6):
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        grad[idx] = (f(xp) - f(xm)) / (2 * eps)
    return grad


def test_criterion_01_loss_correctness(acceptance_line):
    t0 = time.perf_counter()
    errors = []
    g = rect(4, 4, 1, 1, 2, 2)
    errors.append(abs(dice_loss(t64(g), g).item() - 0.0))
    errors.append(abs(dice_loss(t64(rect(4, 4, 3, 3, 1, 1)), rect(4, 4, 0, 0, 1, 1)).item() - 1.0))
    errors.append(abs(dice_loss(t64(rect(4, 4, 0, 0, 1, 4)), rect(4, 4, 0, 0, 1, 2)).item() - 1 / 3))
    errors.append(abs(focal_loss(t64([[0.5]]), np.ones((1, 1)), gamma=2.0).item() - 0.25 * math.log(2)))
    errors.append(abs(focal_loss(t64([[0.5]]), np.zeros((1, 1)), gamma=0.0).item() - math.log(2)))
    half = rect(2, 2, 0, 0, 1, 2)
    errors.append(abs(iou_loss(1.0, half, half).item() - 0.0))
    errors.append(abs(iou_loss(0.0, half, half).item() - 1.0))
    errors.append(abs(iou_loss(0.7, rect(2, 2, 0, 0, 1, 1), half).item() - 0.2))
    exact_ok = max(errors) < 1e-9
    eps = 1e-7
    eye = np.eye(2)
    perturbed = focal_loss(t64(np.where(eye > 0, 1 - eps, eps)), eye).item()
    eps_ok = perturbed < 1e-6

    rng = np.random.default_rng(0)
    worst = 0.0
    for fn in (dice_loss, focal_loss):
        for _ in range(100):
            p0 = rng.uniform(0.02, 0.98, (8, 8))
            gt = rng.random((8, 8)) < rng.uniform(0.1, 0.9)
            x = t64(p0).requires_grad_(True)
            fn(x, gt).backward()
            numeric = _central_fd(lambda a: fn(t64(a), gt).item(), p0)
            rel = np.abs(x.grad.numpy() - numeric) / np.maximum(np.abs(numeric), 1e-6)
            worst = max(worst, float(rel.max()))
    elapsed = time.perf_counter() - t0
    ok = exact_ok and eps_ok and worst < 1e-4 and elapsed < 60
    acceptance_line(1, "loss golden values and gradients", ok,
                    f"max exact error {max(errors):.1e}, eps case {perturbed:.1e}, "
                    f"worst grad rel err {worst:.1e} over 200 cases, {elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------ 2. composition


def test_criterion_02_total_loss_composition(acceptance_line):
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(500):
        p, gt = rng.uniform(0.01, 0.99, (8, 8)), rng.random((8, 8)) < 0.4
        r = total_loss(t64(p), gt, float(rng.random()))
        worst = max(worst, abs(r.total.item() - (r.dice.item() + r.focal.item() + 0.05 * r.iou.item())))
    ok = worst <= 1e-12
    acceptance_line(2, "total = dice + focal + 0.05 * iou", ok, f"max deviation {worst:.1e} over 500 cases")
    assert ok


# ------------------------------------------------------------ 3. metric oracle


def _scene(rng, size=8):
    dets, gts = [], []
    for image_id in range(int(rng.integers(1, 6))):
        for _ in range(int(rng.integers(0, 6))):
            y, x = rng.integers(0, size - 2, 2)
            h, w = rng.integers(2, size - max(y, x) + 1, 2)
            gts.append(GroundTruth(image_id, BinaryMask(rect(size, size, y, x, h, w))))
        for _ in range(int(rng.integers(0, 6))):
            if gts and rng.random() < 0.7:
                base = gts[int(rng.integers(len(gts)))].mask.dense
                m = base ^ (rng.random(base.shape) < rng.uniform(0, 0.2))
            else:
                m = rng.random((size, size)) < 0.3
            dets.append(Detection(image_id, BinaryMask(m), round(float(rng.random()), 1)))
    return dets, gts


def test_criterion_03_metric_oracle_equivalence(acceptance_line):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(500):
        dets, gts = _scene(rng)
        a, b = average_precision(dets, gts), oracle_ap(dets, gts)
        for key in ("ap", "ap50", "ap75", "ar"):
            x, y = getattr(a, key), getattr(b, key)
            worst = max(worst, 0.0 if x is None and y is None else abs(x - y))
    gt = GroundTruth(0, BinaryMask(rect(10, 10, 0, 0, 10, 10)))
    det = Detection(0, BinaryMask(rect(10, 10, 0, 0, 10, 6)), 0.9)
    hand = average_precision([det], [gt])
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and hand.ap50 == 100.0 and hand.ap75 == 0.0 and elapsed < 300
    acceptance_line(3, "AP equals brute-force oracle", ok,
                    f"max diff {worst:.1e} over 500 scenes, hand case AP50={hand.ap50} AP75={hand.ap75}, "
                    f"{elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------ 4. refinement


def test_criterion_04_refined_score(acceptance_line):
    rng = np.random.default_rng(3)
    product_ok = all(refine_confidence(a, b) == a * b for a, b in rng.random((1000, 2)))
    invariant = 0
    for _ in range(1000):
        n = int(rng.integers(1, 30))
        front, est = rng.random(n), rng.random(n)
        c = float(rng.uniform(0.01, 1.0 / front.max()))
        before = ranked_indices([refine_confidence(f, e) for f, e in zip(front, est)])
        after = ranked_indices([refine_confidence(min(c * f, 1.0), e) for f, e in zip(front, est)])
        invariant += before == after
    ok = product_ok and invariant == 1000
    acceptance_line(4, "refined score is the product; ranking scale-invariant", ok,
                    f"{invariant}/1000 vectors keep their order")
    assert ok


# ------------------------------------------------------------ 5. synthesis


def test_criterion_05_synthesis_invariants(acceptance_line):
    t0 = time.perf_counter()
    corpus = build_shape_corpus(1000, SynthesisConfig(seed=7))
    done = [p for p in corpus.report if not p.skipped]
    subset_ok = all(not (i.modal_mask.dense & ~i.amodal_mask.dense).any() for i in corpus.manifest.annotations)
    ror_dev = max(abs(p.achieved_ror - p.requested_ror) for p in done)
    stats = compute_stats(corpus.manifest)

    rng = np.random.default_rng(4)
    aspect_dev = 0.0
    for _ in range(1000):
        occ = random_shape_object(rng, (16, 30))
        tgt = random_shape_object(rng, (16, 30))
        out = normalize_size(occ, tgt, (0.8, 1.2), rng)
        (h, w), (oh, ow) = occ.size, out.size
        aspect_dev = max(aspect_dev, abs(ow - w * oh / h) if h >= w else abs(oh - h * ow / w))
    elapsed = time.perf_counter() - t0
    ok = (subset_ok and ror_dev <= 0.02 + 1e-12 and stats.poi == 50.0 and 30.0 <= stats.avg_ror <= 40.0
          and aspect_dev <= 1.0 and len(done) >= 990 and elapsed < 600)
    acceptance_line(5, "synthesis invariants", ok,
                    f"{len(done)}/1000 pairs, modal within amodal={subset_ok}, max ROR dev {ror_dev:.4f}, "
                    f"POI {stats.poi}, mean ROR {stats.avg_ror:.1f}%, aspect dev {aspect_dev:.2f}px, "
                    f"{elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------ 6. filters


def _inst(visible, amodal, category=None, id=None):
    a = np.zeros(100, bool)
    a[:amodal] = True
    v = np.zeros(100, bool)
    v[:visible] = True
    return AmodalInstance(0, v.reshape(10, 10), a.reshape(10, 10), category, id=id)


def test_criterion_06_filter_thresholds(acceptance_line):
    boundary_ok = (not filter_visibility(_inst(5, 100)).keep and filter_visibility(_inst(10, 100)).keep
                   and not filter_coverage(_inst(95, 95), 10, 10).keep and filter_coverage(_inst(90, 90), 10, 10).keep)
    rng = np.random.default_rng(5)
    names = ["visibility", "coverage", "class", "occlusion"]
    trials, same = 200, 0
    for _ in range(trials):
        anns = []
        for k in range(40):
            amodal = int(rng.integers(1, 101))
            anns.append(_inst(int(rng.integers(0, amodal + 1)), amodal, str(rng.choice(["wall", "cup"])), id=k))
        m = DatasetManifest([ImageInfo(0, 10, 10)], anns)
        base = {i.id for i in apply_filters(m, FilterConfig(stuff_categories={"wall"}))[0].annotations}
        cur = m
        for name in rng.permutation(names):
            cur = apply_filters(cur, FilterConfig(stuff_categories={"wall"}, enabled=(str(name),)))[0]
        same += {i.id for i in cur.annotations} == base
    ok = boundary_ok and same == trials
    acceptance_line(6, "strict filter thresholds, order-independent", ok,
                    f"boundaries ok={boundary_ok}, {same}/{trials} permutations agree")
    assert ok


# ------------------------------------------------------------ 7. samplers


def test_criterion_07_samplers(acceptance_line):
    rng = np.random.default_rng(6)
    mix = MixtureSpec((10, 100))
    draws = np.array([sample_dataset(mix, rng) for _ in range(100_000)])
    freq = np.bincount(draws, minlength=2) / draws.size
    mix_dev = float(np.max(np.abs(freq - [1 / 3, 2 / 3])))
    amodal = rect(8, 8, 1, 1, 4, 6)
    modal = amodal.copy()
    modal[:, 4:] = False
    inst = AmodalInstance(0, modal, amodal)
    n = 10_000
    frac = sum(sample_prompt(inst, PromptPolicy(), rng) == inst.modal_box for _ in range(n)) / n
    ok = mix_dev <= 0.01 and abs(frac - 0.5) <= 0.02
    acceptance_line(7, "mixture and prompt samplers", ok,
                    f"frequencies {freq[0]:.4f}/{freq[1]:.4f}, modal fraction {frac:.4f}")
    assert ok


# ------------------------------------------------------------ 8. freeze


def test_criterion_08_freeze_contract(acceptance_line):
    corpus = build_shape_corpus(8, SynthesisConfig(seed=8), image_size=32, object_range=(8, 14))
    data = TrainingSet.from_manifest(corpus.manifest, corpus.images)
    model = AmodalPredictor(PredictorConfig(image_size=32, embed_dim=16, mlp_dim=32, num_heads=2))
    before = {p: parameter_checksum(getattr(model, p)) for p in ("encoder", "prompt_encoder", "decoder")}
    opt = make_optimizer(model, 1e-3)
    rng = np.random.default_rng(0)
    for _ in range(100):
        train_step(model, opt, make_batch(data, rng.integers(0, len(data), 4), PromptPolicy(), rng))
    frozen_ok = all(parameter_checksum(getattr(model, p)) == before[p] for p in ("encoder", "prompt_encoder"))
    moved = parameter_checksum(model.decoder) != before["decoder"]
    ok = frozen_ok and moved
    acceptance_line(8, "encoder and prompt encoder frozen over 100 steps", ok,
                    f"frozen checksums identical={frozen_ok}, decoder updated={moved}")
    assert ok


# ------------------------------------------------------------ toy experiments


@dataclass
class Toy:
    data: X.ToyData
    foundation: object
    setup_seconds: float
    ckpts: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)

    def finetuned(self, key, datasets, policy):
        if key not in self.ckpts:
            t0 = time.perf_counter()
            self.ckpts[key] = X.finetune(self.foundation, datasets, policy, TOY_SCALE)
            self.seconds[key] = time.perf_counter() - t0
        return self.ckpts[key]


@pytest.fixture(scope="session")
def toy():
    torch.set_num_threads(max(1, torch.get_num_threads()))
    t0 = time.perf_counter()
    data = X.make_toy_data(TOY_SCALE)
    foundation = X.train_foundation(data, TOY_SCALE)
    return Toy(data, foundation, time.perf_counter() - t0)


def test_criterion_09_toy_learning_signal(toy, acceptance_line):
    t0 = time.perf_counter()
    ck = toy.finetuned("random", [toy.data.train_set()], PromptPolicy())
    sig = X.learning_signal(ck.build_model(), toy.data.heldout_set())
    elapsed = toy.setup_seconds + (time.perf_counter() - t0)
    gain = sig["iou_mean"] - sig["baseline"]
    ok = sig["iou_mean"] >= 0.80 and gain >= 0.10 and elapsed < 1800
    acceptance_line(9, "toy amodal IoU on occluded held-out instances", ok,
                    f"IoU {sig['iou_mean']:.3f} (modal prompt {sig['iou_modal_prompt']:.3f}, "
                    f"amodal prompt {sig['iou_amodal_prompt']:.3f}) vs visible-copy {sig['baseline']:.3f}, "
                    f"gain {gain:+.3f}, n={sig['n_instances']}, {elapsed / 60:.1f} min")
    assert ok


def test_criterion_10a_iou_refinement(acceptance_line):
    dets, gts, ious = X.refinement_case()
    plain = average_precision(dets, gts).ap
    ref = average_precision(X.refined(dets, ious), gts).ap
    rng = np.random.default_rng(10)
    drops = 0
    for _ in range(500):
        d, g, i = X.random_refinement_scene(rng, int(rng.integers(1, 7)))
        drops += average_precision(X.refined(d, i), g).ap < average_precision(d, g).ap - 1e-12
    ok = ref > plain and drops == 0
    acceptance_line("10a", "IoU refinement never lowers AP", ok,
                    f"adversarial case AP {plain:.1f} -> {ref:.1f}, {drops} drops over 500 random scenes")
    assert ok


def test_criterion_10b_random_prompt_policy(toy, acceptance_line):
    t0 = time.perf_counter()
    train_set = toy.data.train_set()
    trained = {mode: toy.finetuned(mode, [train_set], PromptPolicy(mode)) for mode in X.PROMPT_POLICIES}
    rows, _ = X.prompt_type_ablation(toy.foundation, toy.data, TOY_SCALE, trained)
    score = {r["policy"]: r["iou_mean"] for r in rows}
    elapsed = toy.setup_seconds + sum(toy.seconds[m] for m in X.PROMPT_POLICIES) + (time.perf_counter() - t0)
    ok = all(score["random"] >= score[m] - 0.02 for m in (AMODAL, MODAL)) and elapsed < 1800
    acceptance_line("10b", "random prompt policy matches or beats single policies", ok,
                    ", ".join(f"{r['policy']} {r['iou_mean']:.3f}" for r in rows) + f", {elapsed / 60:.1f} min")
    assert ok


def test_criterion_10c_dual_annotation_limits_leakage(toy, acceptance_line):
    t0 = time.perf_counter()
    train_set = toy.data.train_set()
    mixed = toy.finetuned("random", [train_set], PromptPolicy())
    occluded = toy.finetuned("occluded-only", [X.occluded_only(train_set)], PromptPolicy())
    rows, _ = X.composition_ablation(toy.foundation, toy.data, TOY_SCALE,
                                     {"occluded-only": occluded, "mixed": mixed})
    leak = {r["regime"]: r["leakage"] for r in rows}
    elapsed = (toy.setup_seconds + toy.seconds["random"] + toy.seconds["occluded-only"]
               + (time.perf_counter() - t0))
    ok = leak["occluded-only"] > leak["mixed"] and elapsed < 1800
    acceptance_line("10c", "occluded-only training leaks more than mixed", ok,
                    f"leakage occluded-only {leak['occluded-only']:.3f} vs mixed {leak['mixed']:.3f}, "
                    f"{elapsed / 60:.1f} min")
    assert ok

