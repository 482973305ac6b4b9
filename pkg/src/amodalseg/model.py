"""Promptable amodal mask predictor: image encoder, box-prompt encoder, mask decoder.

The layout follows the Segment Anything family at toy scale:

* ``ImageEncoder`` turns an ``H x W`` RGB image into a ``C x H/s x W/s``
  embedding grid (``s`` = :attr:`ImageEncoder.stride`). Any module with the
  same ``forward`` contract and ``stride``/``embed_dim`` attributes can be
  swapped in, e.g. an adapter around precomputed foundation-model features.
* ``BoxPromptEncoder`` embeds the two box corners as positional tokens.
* ``MaskDecoder`` runs two-way attention between output/prompt tokens and the
  image grid, upsamples to full resolution, and emits one mask plus an IoU
  estimate squashed into ``[0, 1]``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .masks import BoundingBox

PARTS = ("encoder", "prompt_encoder", "decoder")


@dataclass
class PredictorConfig:
    image_size: int = 64
    embed_dim: int = 64
    encoder_stride: int = 4
    encoder_depth: int = 2
    decoder_depth: int = 2
    num_heads: int = 4
    mlp_dim: int = 128
    trainable_parts: tuple = ("decoder",)
    seed: int = 0

    def __post_init__(self):
        self.trainable_parts = tuple(sorted(set(self.trainable_parts), key=PARTS.index))
        if any(p not in PARTS for p in self.trainable_parts):
            raise ValueError(f"trainable_parts must be a subset of {PARTS}")
        if self.image_size % self.encoder_stride:
            raise ValueError("image_size must be divisible by encoder_stride")
        if self.encoder_stride not in (2, 4, 8):
            raise ValueError("encoder_stride must be 2, 4 or 8")
        if self.decoder_depth < 1:
            raise ValueError("decoder_depth must be >= 1")
        if self.embed_dim % self.num_heads or self.embed_dim % 8:
            raise ValueError("embed_dim must be divisible by num_heads and by 8")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trainable_parts"] = list(self.trainable_parts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PredictorConfig":
        d = dict(d)
        d["trainable_parts"] = tuple(d.get("trainable_parts", ("decoder",)))
        return cls(**d)


class PromptedPrediction(NamedTuple):
    mask_logits: torch.Tensor  # (..., H, W)
    iou_estimate: torch.Tensor  # (...)

    def mask(self, threshold: float = 0.5) -> torch.Tensor:
        return torch.sigmoid(self.mask_logits) > threshold


class LayerNorm2d(nn.Module):
    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        u = x.mean(1, keepdim=True)
        s = (x - u).pow(2).mean(1, keepdim=True)
        x = (x - u) / torch.sqrt(s + self.eps)
        return self.weight[:, None, None] * x + self.bias[:, None, None]


class _ResBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(dim, dim, 3, padding=1)
        self.norm = LayerNorm2d(dim)
        self.conv2 = nn.Conv2d(dim, dim, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.gelu(self.norm(self.conv1(x))))


class ImageEncoder(nn.Module):
    """Patch embedding followed by residual conv blocks."""

    def __init__(self, embed_dim: int = 64, stride: int = 4, depth: int = 2):
        super().__init__()
        self.stride = stride
        self.embed_dim = embed_dim
        layers = [nn.Conv2d(3, embed_dim // 2, 3, padding=1), nn.GELU()]
        layers += [nn.Conv2d(embed_dim // 2, embed_dim, stride, stride=stride), LayerNorm2d(embed_dim)]
        self.stem = nn.Sequential(*layers)
        self.blocks = nn.Sequential(*[_ResBlock(embed_dim) for _ in range(depth)])
        self.neck = nn.Sequential(nn.Conv2d(embed_dim, embed_dim, 1), LayerNorm2d(embed_dim))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.neck(self.blocks(self.stem(images)))


class RandomFourierPositions(nn.Module):
    """Fixed Gaussian Fourier features of normalized ``(x, y)`` coordinates."""

    def __init__(self, num_feats: int, scale: float = 1.0):
        super().__init__()
        self.register_buffer("gaussian", scale * torch.randn(2, num_feats))

    def encode(self, coords: torch.Tensor) -> torch.Tensor:
        coords = 2 * coords - 1
        proj = 2 * math.pi * coords @ self.gaussian
        return torch.cat([torch.sin(proj), torch.cos(proj)], dim=-1)

    def grid(self, h: int, w: int) -> torch.Tensor:
        ys = (torch.arange(h, dtype=torch.float32) + 0.5) / h
        xs = (torch.arange(w, dtype=torch.float32) + 0.5) / w
        yy, xx = torch.meshgrid(ys, xs, indexing="ij")
        pe = self.encode(torch.stack([xx, yy], dim=-1))
        return pe.permute(2, 0, 1)  # C x H x W


class BoxPromptEncoder(nn.Module):
    def __init__(self, embed_dim: int, image_size: int):
        super().__init__()
        self.image_size = image_size
        self.pe = RandomFourierPositions(embed_dim // 2)
        self.corner_embed = nn.Embedding(2, embed_dim)

    def forward(self, boxes: torch.Tensor) -> torch.Tensor:
        """``boxes``: ``(B, 4)`` xyxy pixels -> ``(B, 2, C)`` tokens."""
        corners = boxes.reshape(-1, 2, 2) / self.image_size
        return self.pe.encode(corners) + self.corner_embed.weight[None]

    def dense_pe(self, h: int, w: int) -> torch.Tensor:
        return self.pe.grid(h, w)


class _Attention(nn.Module):
    def __init__(self, dim: int, heads: int, inner: Optional[int] = None):
        super().__init__()
        inner = inner or dim
        self.heads = heads
        self.q = nn.Linear(dim, inner)
        self.k = nn.Linear(dim, inner)
        self.v = nn.Linear(dim, inner)
        self.out = nn.Linear(inner, dim)

    def _split(self, x):
        b, n, c = x.shape
        return x.reshape(b, n, self.heads, c // self.heads).transpose(1, 2)

    def forward(self, q, k, v):
        q, k, v = self._split(self.q(q)), self._split(self.k(k)), self._split(self.v(v))
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1]), dim=-1)
        out = (attn @ v).transpose(1, 2).flatten(2)
        return self.out(out)


class _TwoWayBlock(nn.Module):
    """Token self-attention, token->image and image->token cross-attention."""

    def __init__(self, dim: int, heads: int, mlp_dim: int, skip_first_pe: bool):
        super().__init__()
        self.self_attn = _Attention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_t2i = _Attention(dim, heads, dim // 2)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_dim), nn.GELU(), nn.Linear(mlp_dim, dim))
        self.norm3 = nn.LayerNorm(dim)
        self.cross_i2t = _Attention(dim, heads, dim // 2)
        self.norm4 = nn.LayerNorm(dim)
        self.skip_first_pe = skip_first_pe

    def forward(self, tokens, image, token_pe, image_pe):
        if self.skip_first_pe:
            tokens = self.self_attn(tokens, tokens, tokens)
        else:
            q = tokens + token_pe
            tokens = tokens + self.self_attn(q, q, tokens)
        tokens = self.norm1(tokens)
        q, k = tokens + token_pe, image + image_pe
        tokens = self.norm2(tokens + self.cross_t2i(q, k, image))
        tokens = self.norm3(tokens + self.mlp(tokens))
        q, k = tokens + token_pe, image + image_pe
        image = self.norm4(image + self.cross_i2t(k, q, tokens))
        return tokens, image


class MaskDecoder(nn.Module):
    def __init__(self, dim: int, depth: int, heads: int, mlp_dim: int, stride: int):
        super().__init__()
        self.iou_token = nn.Embedding(1, dim)
        self.mask_token = nn.Embedding(1, dim)
        self.blocks = nn.ModuleList(
            [_TwoWayBlock(dim, heads, mlp_dim, skip_first_pe=(i == 0)) for i in range(depth)]
        )
        self.final_attn = _Attention(dim, heads, dim // 2)
        self.final_norm = nn.LayerNorm(dim)
        ups = []
        ch = dim
        for i in range(int(math.log2(stride))):
            out = dim // (4 if i == 0 else 8) if stride > 2 else dim // 8
            ups += [nn.ConvTranspose2d(ch, out, 2, stride=2), LayerNorm2d(out), nn.GELU()]
            ch = out
        self.upscale = nn.Sequential(*ups)
        self.up_dim = ch
        self.hyper = nn.Sequential(nn.Linear(dim, dim), nn.ReLU(), nn.Linear(dim, ch))
        self.iou_head = nn.Sequential(nn.Linear(dim, dim), nn.ReLU(), nn.Linear(dim, 1))

    def forward(self, image_embed, image_pe, prompt_tokens) -> PromptedPrediction:
        b, c, h, w = image_embed.shape
        out_tokens = torch.cat([self.iou_token.weight, self.mask_token.weight], dim=0)
        tokens = torch.cat([out_tokens[None].expand(b, -1, -1), prompt_tokens], dim=1)
        token_pe = tokens
        image = image_embed.flatten(2).transpose(1, 2)
        pe = image_pe.flatten(1).transpose(0, 1)[None].expand(b, -1, -1)
        for blk in self.blocks:
            tokens, image = blk(tokens, image, token_pe, pe)
        q, k = tokens + token_pe, image + pe
        tokens = self.final_norm(tokens + self.final_attn(q, k, image))

        up = self.upscale(image.transpose(1, 2).reshape(b, c, h, w))
        weights = self.hyper(tokens[:, 1])
        logits = torch.einsum("bc,bchw->bhw", weights, up)
        iou = torch.sigmoid(self.iou_head(tokens[:, 0])).squeeze(-1)
        return PromptedPrediction(logits, iou)


class AmodalPredictor(nn.Module):
    """Image + box prompt -> amodal mask logits and IoU estimate."""

    def __init__(self, cfg: PredictorConfig = PredictorConfig(), encoder: Optional[nn.Module] = None):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.encoder = encoder or ImageEncoder(cfg.embed_dim, cfg.encoder_stride, cfg.encoder_depth)
            self.prompt_encoder = BoxPromptEncoder(cfg.embed_dim, cfg.image_size)
            self.decoder = MaskDecoder(
                cfg.embed_dim, cfg.decoder_depth, cfg.num_heads, cfg.mlp_dim, cfg.encoder_stride
            )
        self.set_trainable(cfg.trainable_parts)

    def set_trainable(self, parts) -> None:
        for name in PARTS:
            flag = name in parts
            for p in getattr(self, name).parameters():
                p.requires_grad_(flag)

    def part_parameters(self, part: str) -> dict:
        return {n: p for n, p in getattr(self, part).named_parameters()}

    def forward(self, images: torch.Tensor, boxes: torch.Tensor) -> PromptedPrediction:
        """``images``: ``(B, 3, S, S)`` floats in [0, 1]; ``boxes``: ``(B, 4)`` xyxy pixels."""
        embed = self.encoder(images)
        pe = self.prompt_encoder.dense_pe(embed.shape[-2], embed.shape[-1]).to(embed.dtype)
        tokens = self.prompt_encoder(boxes.to(embed.dtype))
        return self.decoder(embed, pe, tokens)

    @torch.no_grad()
    def predict(self, image, box: BoundingBox) -> PromptedPrediction:
        """Single image (``H x W x 3`` uint8 or float) and one box prompt.

        Images of another size are resized to ``image_size`` and the logits
        are resized back, so the output always matches the input grid.
        """
        was_training = self.training
        self.eval()
        try:
            img = to_image_tensor(image)
            h, w = img.shape[-2:]
            clamped = box.clamp(w, h)
            if clamped.is_degenerate:
                raise ValueError(f"box {box} has zero area inside a {w}x{h} image")
            s = self.cfg.image_size
            sx, sy = s / w, s / h
            xyxy = torch.tensor([[clamped.x * sx, clamped.y * sy, clamped.x1 * sx, clamped.y1 * sy]])
            x = img[None]
            if (h, w) != (s, s):
                x = F.interpolate(x, size=(s, s), mode="bilinear", align_corners=False)
            pred = self(x, xyxy)
            logits = pred.mask_logits[0]
            if (h, w) != (s, s):
                logits = F.interpolate(logits[None, None], size=(h, w), mode="bilinear", align_corners=False)[0, 0]
            return PromptedPrediction(logits, pred.iou_estimate[0])
        finally:
            self.train(was_training)


def to_image_tensor(image) -> torch.Tensor:
    """``H x W x 3`` array (uint8 or float in [0,1]) -> ``3 x H x W`` float32 tensor."""
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    t = torch.tensor(arr).permute(2, 0, 1)
    if not torch.is_floating_point(t):
        t = t.float() / 255.0
    return t.float()


def boxes_to_tensor(boxes) -> torch.Tensor:
    return torch.tensor([b.xyxy() for b in boxes], dtype=torch.float32)


def parameter_checksum(module: nn.Module) -> str:
    """SHA-256 over every parameter's raw bytes, in name order."""
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
