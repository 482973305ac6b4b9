"""Training objective: soft Dice + focal + weighted L1 on the IoU estimate.

All functions take per-pixel probabilities (post-sigmoid) and a binary target
of the same shape, as torch tensors or anything ``torch.as_tensor`` accepts.
Leading batch dimensions are allowed; reductions are per sample over the last
two axes and the result keeps the batch shape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch

from .masks import BinaryMask

DEFAULT_FLOOR = 1e-7


@dataclass(frozen=True)
class LossConfig:
    lambda_iou: float = 0.05
    gamma: float = 2.0
    probability_floor: float = DEFAULT_FLOOR
    mask_threshold: float = 0.5

    def __post_init__(self):
        if self.lambda_iou < 0:
            raise ValueError("lambda_iou must be >= 0")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0 < self.probability_floor < 1e-3:
            raise ValueError("probability_floor must lie in (0, 1e-3)")


class LossReport(NamedTuple):
    total: torch.Tensor
    dice: torch.Tensor
    focal: torch.Tensor
    iou: torch.Tensor


def _as_tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, BinaryMask):
        x = x.dense
    if like is not None and isinstance(x, (int, float)):
        return torch.tensor(float(x), dtype=like.dtype, device=like.device)
    t = torch.as_tensor(x)
    if not torch.is_floating_point(t):
        dtype = like.dtype if like is not None else torch.get_default_dtype()
        t = t.to(dtype)
    if like is not None:
        t = t.to(dtype=like.dtype, device=like.device)
    return t


def _pair(pred, gt):
    pred = _as_tensor(pred)
    gt = _as_tensor(gt, like=pred)
    if pred.shape[-2:] != gt.shape[-2:]:
        raise ValueError(f"prediction {tuple(pred.shape)} and target {tuple(gt.shape)} differ")
    return pred, gt


def dice_loss(pred, gt) -> torch.Tensor:
    """``1 - 2 sum(p*g) / (sum(p) + sum(g))``; defined as 0 when both sums vanish."""
    pred, gt = _pair(pred, gt)
    inter = (pred * gt).sum(dim=(-2, -1))
    denom = pred.sum(dim=(-2, -1)) + gt.sum(dim=(-2, -1))
    safe = torch.where(denom > 0, denom, torch.ones_like(denom))
    return torch.where(denom > 0, 1.0 - 2.0 * inter / safe, torch.zeros_like(denom))


def focal_loss(pred, gt, gamma: float = 2.0, probability_floor: float = DEFAULT_FLOOR) -> torch.Tensor:
    """Pixel-mean of ``-(1 - p_t)**gamma * log(p_t)``."""
    pred, gt = _pair(pred, gt)
    p = pred.clamp(probability_floor, 1.0 - probability_floor)
    p_t = torch.where(gt > 0.5, p, 1.0 - p)
    per_pixel = -((1.0 - p_t) ** gamma) * torch.log(p_t)
    return per_pixel.mean(dim=(-2, -1))


def binary_iou(pred_binary, gt) -> torch.Tensor:
    """Set IoU of two {0,1} grids, 1 when both are empty. Not differentiable.

    Float inputs keep their dtype; boolean or integer inputs give float64.
    """
    raw = torch.as_tensor(pred_binary.dense if isinstance(pred_binary, BinaryMask) else pred_binary)
    dtype = raw.dtype if torch.is_floating_point(raw) else torch.float64
    pred_binary, gt = _pair(pred_binary, gt)
    a = pred_binary > 0.5
    b = gt > 0.5
    inter = (a & b).sum(dim=(-2, -1)).to(torch.float64)
    union = (a | b).sum(dim=(-2, -1)).to(torch.float64)
    safe = torch.where(union > 0, union, torch.ones_like(union))
    return torch.where(union > 0, inter / safe, torch.ones_like(union)).to(dtype)


def iou_loss(rho_hat, pred_binary, gt) -> torch.Tensor:
    """Absolute error between the IoU estimate and the measured IoU of the hard mask."""
    actual = binary_iou(pred_binary, gt).detach()
    if isinstance(rho_hat, torch.Tensor):
        actual = actual.to(dtype=rho_hat.dtype, device=rho_hat.device)
    else:
        rho_hat = _as_tensor(rho_hat, like=actual)
    return (rho_hat - actual).abs()


def combine_terms(dice, focal, iou, lambda_iou: float = 0.05):
    return dice + focal + lambda_iou * iou


def total_loss(pred, gt, rho_hat, cfg: LossConfig = LossConfig()) -> LossReport:
    """Dice + focal + ``lambda_iou`` * IoU-estimation error, with each term reported.

    The IoU target is computed on ``pred`` thresholded at ``cfg.mask_threshold``.
    """
    pred, gt = _pair(pred, gt)
    d = dice_loss(pred, gt)
    f = focal_loss(pred, gt, cfg.gamma, cfg.probability_floor)
    i = iou_loss(rho_hat, (pred > cfg.mask_threshold).to(pred.dtype), gt)
    return LossReport(combine_terms(d, f, i, cfg.lambda_iou), d, f, i)
