"""Flat experiment configuration: dotted ``key = value`` lines.

Values are parsed as JSON when possible (numbers, booleans, lists, null) and
kept as bare strings otherwise. ``#`` starts a comment. Every key must be one
of :data:`DEFAULTS`, and each value is coerced to its default's type, so a
typo fails loudly instead of being ignored.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Optional, Union

from .manifest import SchemaError

DEFAULTS = {
    "seed": 0,
    # synth
    "synth.n_pairs": 100,
    "synth.image_size": 64,
    "synth.dual": True,
    "synth.ror_min": 0.15,
    "synth.ror_max": 0.60,
    "synth.scale_min": 0.8,
    "synth.scale_max": 1.2,
    "synth.tolerance": 0.02,
    "synth.max_attempts": 5,
    "synth.clutter": 0.0,
    "synth.object_min": 16,
    "synth.object_max": 30,
    "synth.split": "train",
    # filter
    "filter.min_visible_ratio": 0.10,
    "filter.max_image_coverage": 0.90,
    "filter.max_occlusion": 0.9,
    "filter.stuff_list": "",
    "filter.enabled": ["visibility", "coverage", "class", "occlusion"],
    # model
    "model.image_size": 64,
    "model.embed_dim": 64,
    "model.encoder_stride": 4,
    "model.encoder_depth": 2,
    "model.decoder_depth": 2,
    "model.num_heads": 4,
    "model.mlp_dim": 128,
    "model.trainable_parts": ["decoder"],
    # train
    "train.lr": 1e-4,
    "train.batch_size": 32,
    "train.iterations": 200,
    "train.target": "amodal",
    "train.prompt_mode": "random",
    "train.modal_probability": 0.5,
    "train.pretrain_iterations": 0,
    "train.pretrain_lr": 1e-3,
    "train.log_every": 0,
    "loss.lambda_iou": 0.05,
    "loss.gamma": 2.0,
    "loss.probability_floor": 1e-7,
    "loss.mask_threshold": 0.5,
    # infer
    "infer.mask_threshold": 0.5,
    "infer.workers": 1,
    # eval
    "eval.max_detections": 100,
    "eval.class_agnostic": True,
    "eval.score_field": "score_refined",
    "eval.iou_thresholds": [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95],
    # ablate
    "ablate.train_pairs": 1000,
    "ablate.heldout_pairs": 200,
    "ablate.pretrain_iterations": 1000,
    "ablate.iterations": 1000,
    "ablate.lr": 1e-3,
    "ablate.clutter": 1.0,
    # viz
    "viz.alpha": 0.5,
    "viz.limit": 0,
}


def _parse_value(raw: str):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _coerce(key: str, value):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "yes", "no", "1", "0"):
            return value.lower() in ("true", "yes", "1")
        raise ValueError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise ValueError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        if not isinstance(value, list):
            raise ValueError(f"{key}: expected a list, got {value!r}")
        return value
    return value if isinstance(value, str) else json.dumps(value)


def parse_lines(lines: Iterable[str], source: str = "<config>") -> dict:
    out = {}
    problems = []
    for lineno, line in enumerate(lines, start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            problems.append(f"{source}:{lineno}: expected key = value")
            continue
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in DEFAULTS:
            problems.append(f"{source}:{lineno}: unknown key {key!r}")
            continue
        try:
            out[key] = _coerce(key, _parse_value(raw))
        except ValueError as exc:
            problems.append(f"{source}:{lineno}: {exc}")
    if problems:
        raise SchemaError(f"invalid configuration: {problems[0]}", problems)
    return out


def resolve(
    path: Optional[Union[str, Path]] = None,
    overrides: Iterable[str] = (),
    seed: Optional[int] = None,
) -> dict:
    """Defaults, then the config file, then ``key=value`` overrides, then ``seed``."""
    cfg = dict(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise SchemaError(f"config file not found: {p}", [f"{p}: missing"])
        cfg.update(parse_lines(p.read_text().splitlines(), str(p)))
    cfg.update(parse_lines(overrides, "--set"))
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def dumps(cfg: dict) -> str:
    """Render back to the text format, keys sorted."""
    return "".join(f"{k} = {json.dumps(cfg[k])}\n" for k in sorted(cfg))


def section(cfg: dict, prefix: str) -> dict:
    """Sub-dictionary under ``prefix.`` with the prefix stripped."""
    n = len(prefix) + 1
    return {k[n:]: v for k, v in cfg.items() if k.startswith(prefix + ".")}
