"""Command-line entry point: ``amodalseg <command> [--config F] [--seed N] [--out D] [--set k=v ...]``.

Every command writes ``run.json`` (resolved config, inputs, version stamp)
next to its outputs. Exit codes: 0 ok, 1 other failure, 2 schema or
configuration error, 3 infeasible synthesis request.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
from pathlib import Path
from typing import Optional, Sequence

from PIL import Image

from . import __version__
from . import config as C
from .datafilter import FilterConfig, apply_filters, compute_stats, default_stuff_list, load_stuff_list
from .datasynth import SynthesisConfig, build_shape_corpus
from .evaluation import EvalConfig, evaluate_run, load_results, write_pr_csv
from .losses import LossConfig
from .manifest import SchemaError, canonical_json, load_image, load_manifest, save_manifest
from .model import PredictorConfig
from .pipeline import CheckpointMismatch, ingest_detections, run_batch, write_results
from .training import (
    SEED_ENV,
    PromptPolicy,
    TrainConfig,
    TrainingSet,
    load_checkpoint,
    pretrain_foundation,
    save_checkpoint,
    train,
)

log = logging.getLogger("amodalseg")

EXIT_OK, EXIT_FAIL, EXIT_SCHEMA, EXIT_INFEASIBLE = 0, 1, 2, 3


class Infeasible(RuntimeError):
    """Some requested synthesis could not be realized."""


# --------------------------------------------------------------------------
# helpers


def _git_stamp() -> str:
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=here, capture_output=True,
                             text=True, timeout=5)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_run_record(out: Path, command: str, cfg: dict, inputs: dict) -> None:
    record = {
        "command": command,
        "config": cfg,
        "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
        "version": __version__,
        "git": _git_stamp(),
    }
    (out / "run.json").write_text(canonical_json(record))


def _write_json(path: Path, obj) -> None:
    path.write_text(canonical_json(obj))


def _image_loader(manifest_path: Path, manifest):
    index = {img.id: img for img in manifest.images}
    return lambda image_id: load_image(manifest_path, index[image_id])


def _load_images(manifest_path: Path, manifest) -> dict:
    return {img.id: load_image(manifest_path, img) for img in manifest.images}


def model_config(cfg: dict) -> PredictorConfig:
    m = C.section(cfg, "model")
    m["trainable_parts"] = tuple(m["trainable_parts"])
    return PredictorConfig(seed=cfg["seed"], **m)


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        lr=cfg["train.lr"],
        batch_size=cfg["train.batch_size"],
        iterations=cfg["train.iterations"],
        seed=cfg["seed"],
        loss=LossConfig(**C.section(cfg, "loss")),
        target=cfg["train.target"],
    )


def eval_config(cfg: dict) -> EvalConfig:
    return EvalConfig(tuple(cfg["eval.iou_thresholds"]), cfg["eval.max_detections"], cfg["eval.class_agnostic"])


# --------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg: dict, out: Path) -> int:
    s = C.section(cfg, "synth")
    scfg = SynthesisConfig((s["ror_min"], s["ror_max"]), (s["scale_min"], s["scale_max"]), s["tolerance"],
                           cfg["seed"], s["max_attempts"], s["clutter"])
    corpus = build_shape_corpus(s["n_pairs"], scfg, s["image_size"], dual=s["dual"], split=s["split"],
                                object_range=(s["object_min"], s["object_max"]))
    (out / "images").mkdir(parents=True, exist_ok=True)
    for img in corpus.manifest.images:
        Image.fromarray(corpus.images[img.id]).save(out / img.file, format="PNG")
    save_manifest(corpus.manifest, out / "manifest.json")
    report = corpus.report_dict()
    if corpus.manifest.annotations:
        report["stats"] = compute_stats(corpus.manifest).to_dict()
    _write_json(out / "synth_report.json", report)
    skipped = report["pairs_skipped"]
    log.info("synthesized %d of %d pairs", report["pairs_synthesized"], report["pairs_requested"])
    if skipped:
        raise Infeasible(f"{len(skipped)} pair(s) could not reach their requested occlusion rate; "
                         f"see {out / 'synth_report.json'}")
    return EXIT_OK


def cmd_filter(args, cfg: dict, out: Path) -> int:
    manifest = load_manifest(args.manifest)
    f = C.section(cfg, "filter")
    stuff = load_stuff_list(f["stuff_list"]) if f["stuff_list"] else default_stuff_list()
    fcfg = FilterConfig(f["min_visible_ratio"], f["max_image_coverage"], stuff, f["max_occlusion"],
                        tuple(f["enabled"]))
    kept, report = apply_filters(manifest, fcfg)
    save_manifest(kept, out / "manifest.json")
    _write_json(out / "filter_report.json", report)
    log.info("kept %d of %d instances", report["kept"], len(manifest))
    return EXIT_OK


def cmd_stats(args, cfg: dict, out: Path) -> int:
    stats = compute_stats(load_manifest(args.manifest)).to_dict()
    _write_json(out / "stats.json", stats)
    print(json.dumps(stats, sort_keys=True))
    return EXIT_OK


def cmd_train(args, cfg: dict, out: Path) -> int:
    datasets = []
    for path in args.manifest:
        manifest = load_manifest(path)
        datasets.append(TrainingSet.from_manifest(manifest, _load_images(Path(path), manifest), Path(path).stem))
    mcfg = model_config(cfg)
    tcfg = train_config(cfg)
    init = load_checkpoint(args.init) if args.init else None
    resume = load_checkpoint(args.resume) if args.resume else None
    if init is None and resume is None and cfg["train.pretrain_iterations"] > 0:
        init = pretrain_foundation(datasets, mcfg, cfg["train.pretrain_iterations"], cfg["train.pretrain_lr"],
                                   cfg["seed"], cfg["train.batch_size"])
        save_checkpoint(init, out / "foundation.ckpt")
    policy = PromptPolicy(cfg["train.prompt_mode"], cfg["train.modal_probability"])
    try:
        ckpt = train(datasets, policy, mcfg, tcfg, init=init, resume=resume, log_every=cfg["train.log_every"])
    except RuntimeError as exc:
        if "state_dict" in str(exc):
            raise CheckpointMismatch(str(exc)) from exc
        raise
    save_checkpoint(ckpt, out / "checkpoint.ckpt")
    _write_json(out / "train_log.json", {"iterations": ckpt.iteration, "loss": ckpt.history})
    return EXIT_OK


def cmd_infer(args, cfg: dict, out: Path) -> int:
    manifest = load_manifest(args.manifest)
    sizes = {img.id: (img.width, img.height) for img in manifest.images}
    dets = ingest_detections(args.detections, sizes)
    ckpt = load_checkpoint(args.checkpoint)
    results = run_batch(dets, _image_loader(Path(args.manifest), manifest), ckpt, workers=cfg["infer.workers"],
                        mask_threshold=cfg["infer.mask_threshold"])
    write_results(results, out / "results.json")
    log.info("wrote %d results", len(results))
    return EXIT_OK


def cmd_eval(args, cfg: dict, out: Path) -> int:
    manifest = load_manifest(args.manifest)
    report = evaluate_run(manifest, args.results, eval_config(cfg), cfg["eval.score_field"])
    _write_json(out / "report.json", report.to_dict())
    write_pr_csv(report, out / "pr_curves.csv")
    print(json.dumps(report.summary(), sort_keys=True))
    return EXIT_OK


def cmd_ablate(args, cfg: dict, out: Path) -> int:
    from . import experiments as X

    if args.which == "iou-refine":
        rows = X.iou_refine_ablation(eval_config(cfg))
    else:
        a = C.section(cfg, "ablate")
        scale = X.ToyScale(train_pairs=a["train_pairs"], heldout_pairs=a["heldout_pairs"],
                           pretrain_pairs=a["train_pairs"], pretrain_iterations=a["pretrain_iterations"],
                           iterations=a["iterations"], lr=a["lr"], seed=cfg["seed"],
                           clutter_probability=a["clutter"])
        data = X.make_toy_data(scale)
        foundation = X.train_foundation(data, scale)
        if args.which == "prompt-type":
            rows, _ = X.prompt_type_ablation(foundation, data, scale)
        else:
            rows, _ = X.composition_ablation(foundation, data, scale)
    table = X.format_table(rows)
    (out / f"ablate_{args.which}.txt").write_text(table)
    _write_json(out / f"ablate_{args.which}.json", rows)
    print(table, end="")
    return EXIT_OK


def cmd_viz(args, cfg: dict, out: Path) -> int:
    from .viz import render_manifest, render_results

    manifest = load_manifest(args.manifest)
    if args.results:
        loader = _image_loader(Path(args.manifest), manifest)
        written = render_results(load_results(args.results), loader, out / "overlays", cfg["viz.alpha"],
                                 cfg["viz.limit"])
    else:
        written = render_manifest(manifest, lambda img: load_image(args.manifest, img), out / "overlays",
                                  cfg["viz.alpha"], cfg["viz.limit"])
    log.info("wrote %d overlays", len(written))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "filter": cmd_filter,
    "stats": cmd_stats,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "viz": cmd_viz,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help=f"overrides the config seed (and ${SEED_ENV})")
    common.add_argument("--out", default=".", help="output directory (default: current)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("-q", "--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="amodalseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="synthesize an occlusion corpus")
    p = sub.add_parser("filter", parents=[common], help="apply cleaning filters to a manifest")
    p.add_argument("manifest")
    p = sub.add_parser("stats", parents=[common], help="occlusion statistics of a manifest")
    p.add_argument("manifest")
    p = sub.add_parser("train", parents=[common], help="fine-tune the decoder")
    p.add_argument("manifest", nargs="+", help="one or more training manifests (mixed by log size)")
    p.add_argument("--init", help="checkpoint whose weights start training")
    p.add_argument("--resume", help="checkpoint to continue, optimizer included")
    p = sub.add_parser("infer", parents=[common], help="amodal masks for detector boxes")
    p.add_argument("manifest", help="manifest listing the images")
    p.add_argument("detections", help="detection file (JSON array or lines)")
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("eval", parents=[common], help="AP/AR of a result file")
    p.add_argument("manifest")
    p.add_argument("results")
    p = sub.add_parser("ablate", parents=[common], help="toy ablations")
    p.add_argument("which", choices=["iou-refine", "prompt-type", "composition"])
    p = sub.add_parser("viz", parents=[common], help="PNG overlays")
    p.add_argument("manifest")
    p.add_argument("--results", help="draw predictions from this result file instead of the annotations")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        seed = args.seed
        if seed is None and os.environ.get(SEED_ENV):
            seed = int(os.environ[SEED_ENV])
        cfg = C.resolve(args.config, args.overrides, seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        inputs = {k: getattr(args, k) for k in ("manifest", "detections", "results", "checkpoint", "init",
                                                 "resume", "which", "config") if hasattr(args, k)}
        write_run_record(out, args.command, cfg, inputs)
        return COMMANDS[args.command](args, cfg, out)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for p in getattr(exc, "problems", [])[1:20]:
            print(f"  {p}", file=sys.stderr)
        return EXIT_SCHEMA
    except (CheckpointMismatch, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except Infeasible as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for m in getattr(exc, "missing", []):
            print(f"  {m}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
