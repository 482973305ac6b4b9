"""Prompt sampling, dataset mixture sampling, optimization loop and checkpoints."""

from __future__ import annotations

import io
import json
import logging
import math
import os
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .losses import LossConfig, LossReport, total_loss
from .manifest import DatasetManifest, canonical_json
from .masks import AMODAL, MODAL, AmodalInstance, BoundingBox
from .model import PARTS, AmodalPredictor, PredictorConfig, boxes_to_tensor, to_image_tensor

log = logging.getLogger(__name__)

SEED_ENV = "AMODALSEG_SEED"


def seed_from_env(default: int) -> int:
    value = os.environ.get(SEED_ENV)
    return int(value) if value not in (None, "") else default


# --------------------------------------------------------------------------
# sampling policies


@dataclass(frozen=True)
class PromptPolicy:
    mode: str = "random"  # "modal", "amodal" or "random"
    random_modal_probability: float = 0.5

    def __post_init__(self):
        if self.mode not in (MODAL, AMODAL, "random"):
            raise ValueError(f"unknown prompt mode {self.mode!r}")
        if not 0 <= self.random_modal_probability <= 1:
            raise ValueError("random_modal_probability must lie in [0, 1]")


def sample_prompt(inst: AmodalInstance, policy: PromptPolicy, rng: np.random.Generator) -> BoundingBox:
    """Box prompt for one training instance: its modal box, amodal box, or a coin flip."""
    if policy.mode == MODAL:
        return inst.modal_box
    if policy.mode == AMODAL:
        return inst.amodal_box
    return inst.modal_box if rng.random() < policy.random_modal_probability else inst.amodal_box


@dataclass(frozen=True)
class MixtureSpec:
    """Datasets drawn with probability ``log(size_i) / sum_j log(size_j)``."""

    sizes: tuple

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        if not sizes:
            raise ValueError("need at least one dataset")
        if any(s <= 1 for s in sizes):
            raise ValueError("every dataset needs at least 2 samples for a positive log size")
        object.__setattr__(self, "sizes", sizes)

    @property
    def weights(self) -> np.ndarray:
        logs = np.log(np.asarray(self.sizes, dtype=np.float64))
        return logs / logs.sum()


def sample_dataset(mix: MixtureSpec, rng: np.random.Generator) -> int:
    if len(mix.sizes) == 1:
        return 0
    return int(rng.choice(len(mix.sizes), p=mix.weights))


# --------------------------------------------------------------------------
# training data


@dataclass
class TrainingSet:
    """Instances of one dataset with their images, ready to batch.

    ``images`` is ``(N_images, 3, S, S)`` float32; ``image_index[k]`` points at
    the image of annotation ``k``.
    """

    images: torch.Tensor
    image_index: np.ndarray
    instances: list
    name: str = "dataset"

    def __len__(self) -> int:
        return len(self.instances)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, images: dict, name: Optional[str] = None) -> "TrainingSet":
        ids = [img.id for img in manifest.images]
        pos = {image_id: k for k, image_id in enumerate(ids)}
        tensor = torch.stack([to_image_tensor(images[i]) for i in ids]) if ids else torch.zeros(0, 3, 1, 1)
        index = np.array([pos[a.image_id] for a in manifest.annotations], dtype=np.int64)
        return cls(tensor, index, list(manifest.annotations), name or manifest.name)

    def subset(self, keep: Sequence[int]) -> "TrainingSet":
        keep = list(keep)
        return TrainingSet(self.images, self.image_index[keep], [self.instances[k] for k in keep], self.name)


@dataclass
class Batch:
    images: torch.Tensor  # B x 3 x S x S
    boxes: torch.Tensor  # B x 4 xyxy
    targets: torch.Tensor  # B x S x S float {0, 1}


def make_batch(
    data: TrainingSet,
    indices: Sequence[int],
    policy: PromptPolicy,
    rng: np.random.Generator,
    target: str = AMODAL,
) -> Batch:
    insts = [data.instances[k] for k in indices]
    boxes = [sample_prompt(inst, policy, rng) for inst in insts]
    masks = [inst.amodal_mask if target == AMODAL else inst.modal_mask for inst in insts]
    targets = torch.from_numpy(np.stack([m.dense for m in masks]).astype(np.float32))
    return Batch(data.images[data.image_index[list(indices)]], boxes_to_tensor(boxes), targets)


# --------------------------------------------------------------------------
# optimization


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    iterations: int = 0
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    target: str = AMODAL

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["loss"] = LossConfig(**d.get("loss", {}))
        return cls(**d)


def make_optimizer(model: AmodalPredictor, lr: float) -> torch.optim.Adam:
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        raise ValueError("no trainable parameters")
    return torch.optim.Adam(params, lr=lr)


def train_step(
    model: AmodalPredictor,
    optimizer: torch.optim.Optimizer,
    batch: Batch,
    loss_cfg: LossConfig = LossConfig(),
) -> dict:
    """One gradient step on the batch-mean composite loss; returns per-term means."""
    model.train()
    pred = model(batch.images, batch.boxes)
    probs = torch.sigmoid(pred.mask_logits)
    report: LossReport = total_loss(probs, batch.targets, pred.iou_estimate, loss_cfg)
    loss = report.total.mean()
    if not torch.isfinite(loss):
        raise FloatingPointError(
            f"non-finite loss: dice={report.dice.mean().item()}, focal={report.focal.mean().item()}, "
            f"iou={report.iou.mean().item()}"
        )
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return {
        "total": loss.item(),
        "dice": report.dice.mean().item(),
        "focal": report.focal.mean().item(),
        "iou": report.iou.mean().item(),
    }


@dataclass
class Checkpoint:
    model_config: dict
    train_config: dict
    seed: int
    iteration: int
    state: dict  # parameter / buffer name -> np.ndarray
    optimizer: dict = field(default_factory=dict)  # param name -> {"exp_avg", "exp_avg_sq", "step"}
    history: list = field(default_factory=list)

    def build_model(self) -> AmodalPredictor:
        model = AmodalPredictor(PredictorConfig.from_dict(self.model_config))
        model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in self.state.items()})
        return model


def snapshot(model: AmodalPredictor, train_cfg: TrainConfig, iteration: int,
             optimizer: Optional[torch.optim.Optimizer] = None, history: Optional[list] = None) -> Checkpoint:
    state = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
    opt = {}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for p, st in optimizer.state.items():
            if st:
                opt[names[id(p)]] = {
                    "exp_avg": st["exp_avg"].detach().numpy().copy(),
                    "exp_avg_sq": st["exp_avg_sq"].detach().numpy().copy(),
                    "step": float(st["step"]),
                }
    return Checkpoint(model.cfg.to_dict(), train_cfg.to_dict(), train_cfg.seed, iteration, state, opt,
                      list(history or []))


def _restore_optimizer(model: AmodalPredictor, optimizer: torch.optim.Optimizer, saved: dict) -> None:
    params = dict(model.named_parameters())
    for name, st in saved.items():
        p = params[name]
        if p.requires_grad:
            optimizer.state[p] = {
                "step": torch.tensor(st["step"]),
                "exp_avg": torch.from_numpy(np.array(st["exp_avg"])),
                "exp_avg_sq": torch.from_numpy(np.array(st["exp_avg_sq"])),
            }


def train(
    datasets: Sequence[TrainingSet],
    policy: PromptPolicy = PromptPolicy(),
    model_cfg: PredictorConfig = PredictorConfig(),
    train_cfg: TrainConfig = TrainConfig(),
    iterations: Optional[int] = None,
    init: Optional[Checkpoint] = None,
    resume: Optional[Checkpoint] = None,
    log_every: int = 0,
) -> Checkpoint:
    """Optimize the trainable parts for ``iterations`` steps.

    Each step samples one dataset by log-size mixture weights, then a batch
    uniformly from it, then one box prompt per instance. All randomness for
    step ``k`` comes from ``default_rng([seed, k])`` so a resumed run
    reproduces an uninterrupted one exactly.

    ``init`` loads weights (e.g. foundation weights) but starts a fresh
    optimizer; ``resume`` continues a previous run including its optimizer.
    """
    iterations = train_cfg.iterations if iterations is None else iterations
    if not datasets or any(len(d) == 0 for d in datasets):
        raise ValueError("every dataset must contain at least one instance")
    for d in datasets:
        if d.images.shape[-1] != model_cfg.image_size or d.images.shape[-2] != model_cfg.image_size:
            raise ValueError(f"dataset {d.name!r} images are not {model_cfg.image_size}x{model_cfg.image_size}")
    mix = MixtureSpec(tuple(max(len(d), 2) for d in datasets))

    model = AmodalPredictor(model_cfg)
    source = resume or init
    if source is not None:
        model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in source.state.items()})
        model.set_trainable(model_cfg.trainable_parts)
    optimizer = make_optimizer(model, train_cfg.lr)
    start = 0
    history: list = []
    if resume is not None:
        _restore_optimizer(model, optimizer, resume.optimizer)
        start = resume.iteration
        history = list(resume.history)

    for it in range(start, start + iterations):
        rng = np.random.default_rng([train_cfg.seed, it])
        d = datasets[sample_dataset(mix, rng)]
        idx = rng.integers(0, len(d), size=train_cfg.batch_size)
        batch = make_batch(d, idx, policy, rng, train_cfg.target)
        stats = train_step(model, optimizer, batch, train_cfg.loss)
        history.append(stats["total"])
        if log_every and (it + 1) % log_every == 0:
            recent = history[-log_every:]
            log.info("iter %d loss %.4f", it + 1, sum(recent) / len(recent))
    return snapshot(model, train_cfg, start + iterations, optimizer, history)


def pretrain_foundation(
    datasets: Sequence[TrainingSet],
    model_cfg: PredictorConfig = PredictorConfig(),
    iterations: int = 1000,
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int = 32,
) -> Checkpoint:
    """Train every part on visible masks from visible boxes.

    Stands in for a pretrained promptable segmenter: the resulting encoder and
    prompt encoder are then frozen while the decoder learns amodal masks.
    """
    cfg = PredictorConfig.from_dict({**model_cfg.to_dict(), "trainable_parts": list(PARTS)})
    tcfg = TrainConfig(lr=lr, batch_size=batch_size, iterations=iterations, seed=seed, target=MODAL)
    ckpt = train(datasets, PromptPolicy(MODAL), cfg, tcfg)
    ckpt.model_config = model_cfg.to_dict()
    ckpt.optimizer = {}
    return ckpt


# --------------------------------------------------------------------------
# checkpoint files

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def _write_entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> None:
    """Zip container: ``meta.json`` plus one ``.npy`` per named array. Byte-stable."""
    meta = {
        "format": "amodalseg-checkpoint/1",
        "model_config": ckpt.model_config,
        "train_config": ckpt.train_config,
        "seed": ckpt.seed,
        "iteration": ckpt.iteration,
        "history": ckpt.history,
        "params": sorted(ckpt.state),
        "optimizer": {k: {"step": v["step"]} for k, v in sorted(ckpt.optimizer.items())},
    }
    with zipfile.ZipFile(path, "w") as zf:
        _write_entry(zf, "meta.json", canonical_json(meta).encode())
        for name in sorted(ckpt.state):
            _write_entry(zf, f"params/{name}.npy", _npy_bytes(ckpt.state[name]))
        for name in sorted(ckpt.optimizer):
            for key in ("exp_avg", "exp_avg_sq"):
                _write_entry(zf, f"optimizer/{name}/{key}.npy", _npy_bytes(ckpt.optimizer[name][key]))


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != "amodalseg-checkpoint/1":
            raise ValueError(f"{path}: unknown checkpoint format {meta.get('format')!r}")
        load = lambda name: np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
        state = {name: load(f"params/{name}.npy") for name in meta["params"]}
        optimizer = {
            name: {
                "step": v["step"],
                "exp_avg": load(f"optimizer/{name}/exp_avg.npy"),
                "exp_avg_sq": load(f"optimizer/{name}/exp_avg_sq.npy"),
            }
            for name, v in meta["optimizer"].items()
        }
    return Checkpoint(meta["model_config"], meta["train_config"], meta["seed"], meta["iteration"],
                      state, optimizer, meta.get("history", []))


def initial_checkpoint(model_cfg: PredictorConfig, train_cfg: TrainConfig) -> Checkpoint:
    return snapshot(AmodalPredictor(model_cfg), train_cfg, 0)
