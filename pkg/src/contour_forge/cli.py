"""Operator surface: dataset generation, training, inference, evaluation,
and gradient checking.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every command is deterministic given its --seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluate as ev
from . import gradcheck, svgplot, synth
from .autodiff import NumericalError, load_checkpoint
from .config import ConfigError, RunConfig
from .model import ContourDetector
from .training import TrainingDivergedError, train_loop

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

# Structural keys that must agree between a checkpoint and a --config file.
_STRUCTURAL_KEYS = ("n_vertices", "encoder_layers", "channels", "heads", "stages")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


class DataError(Exception):
    pass


def _build_parser() -> _Parser:
    p = _Parser(prog="contour-forge", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic scene dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--params", help="JSON file of generator parameter overrides")
    g.add_argument("--force", action="store_true", help="overwrite a non-empty directory")

    t = sub.add_parser("train", help="train a detector on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="JSON run config (defaults otherwise)")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--stages", type=int)
    t.add_argument("--no-adaptive", action="store_true",
                   help="train refinement on ground-truth-sourced contours only")
    t.add_argument("--no-rescore", action="store_true",
                   help="disable contour re-scoring (keep initial scores)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--quiet", action="store_true")

    i = sub.add_parser("infer", help="run inference on one scene file")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--scene", required=True)
    i.add_argument("--config", help="optional config; must match the checkpoint")
    i.add_argument("--svg", help="write a stage-overlay SVG here")
    i.add_argument("--out", help="write detections JSON here (default stdout)")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val", choices=["train", "val", "all"])
    e.add_argument("--iou", type=float, default=0.5)
    e.add_argument("--out", help="write the report JSON here (default stdout)")

    c = sub.add_parser("gradcheck", help="finite-difference checks for all ops and losses")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tolerance", type=float, default=gradcheck.DEFAULT_TOLERANCE)
    return p


def _load_params(path) -> synth.GenParams:
    if path is None:
        return synth.GenParams()
    try:
        with open(path, "r", encoding="utf-8") as f:
            return synth.GenParams.from_dict(json.load(f))
    except FileNotFoundError as exc:
        raise DataError(f"params file not found: {path}") from exc
    except (json.JSONDecodeError, synth.DatasetError) as exc:
        raise DataError(str(exc)) from exc


def cmd_gen(args) -> int:
    params = _load_params(args.params)
    try:
        manifest = synth.generate_dataset(args.out, args.count, args.seed, params,
                                          force=args.force)
    except synth.DatasetError as exc:
        raise DataError(str(exc)) from exc
    print(f"wrote {manifest['count']} scenes to {args.out}")
    return EXIT_OK


def _resolve_train_config(args) -> RunConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.stages is not None:
        overrides["stages"] = args.stages
    if args.no_adaptive:
        overrides["adaptive_training"] = False
    if args.no_rescore:
        overrides["rescore"] = False
    if args.config:
        try:
            return RunConfig.load(args.config, overrides)
        except FileNotFoundError as exc:
            raise DataError(f"config file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"config file is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(overrides)


def cmd_train(args) -> int:
    config = _resolve_train_config(args)
    print("resolved config: " + json.dumps(config.to_dict(), sort_keys=True))
    try:
        scenes = synth.load_dataset(args.data, split="train")
    except synth.DatasetError as exc:
        raise DataError(str(exc)) from exc
    if not scenes:
        raise DataError(f"{args.data} has no training scenes")
    result = train_loop(scenes, config, out_dir=args.out, resume_from=args.resume,
                        progress=not args.quiet)
    print(f"final checkpoint: {result.checkpoint_path}")
    return EXIT_OK


def _detections_payload(result) -> dict:
    return {
        "detections": [
            {
                "index": d.index,
                "score": d.score,
                "stage": d.stage,
                "box": [float(v) for v in d.box],
                "contour": [[float(x), float(y)] for x, y in d.contour],
                "history": [
                    {"stage": s, "score": sc, "contour": [[float(x), float(y)] for x, y in c]}
                    for s, (c, sc) in enumerate(d.history)
                ],
            }
            for d in result.detections
        ],
        "refine_calls": result.refine_calls,
    }


def _load_model(ckpt_path, config_path=None) -> tuple[ContourDetector, RunConfig]:
    try:
        model, config, _ = ContourDetector.from_checkpoint(ckpt_path)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {ckpt_path}") from exc
    except (ValueError, ConfigError) as exc:
        raise DataError(f"cannot load checkpoint: {exc}") from exc
    if config_path is not None:
        wanted = RunConfig.load(config_path)
        for key in _STRUCTURAL_KEYS:
            have, want = getattr(config, key), getattr(wanted, key)
            if have != want:
                raise DataError(
                    f"checkpoint/config mismatch: {key} is {have} in the checkpoint "
                    f"but {want} in {config_path}")
    return model, config


def cmd_infer(args) -> int:
    model, _ = _load_model(args.ckpt, args.config)
    try:
        scene = synth.load_scene(args.scene)
    except FileNotFoundError as exc:
        raise DataError(f"scene file not found: {args.scene}") from exc
    except synth.DatasetError as exc:
        raise DataError(str(exc)) from exc
    result = model.detect(scene.raster)
    payload = _detections_payload(result)
    text = json.dumps(payload, indent=1)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text)
    if args.svg:
        svg = svgplot.render_scene_svg(scene.raster, scene.polygons, result.detections)
        svgplot.save_svg(args.svg, svg)
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = _load_model(args.ckpt)
    split = None if args.split == "all" else args.split
    try:
        scenes = synth.load_dataset(args.data, split=split)
    except synth.DatasetError as exc:
        raise DataError(str(exc)) from exc
    if not scenes:
        raise DataError(f"{args.data} has no scenes in split {args.split!r}")
    mean_s = ev.timing_harness(model, scenes) if len(scenes) >= 2 else None
    report = ev.evaluate_model(model, scenes, iou_thresh=args.iou)
    report.mean_seconds_per_scene = mean_s
    text = json.dumps(report.to_dict(), indent=1)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradcheck.run_all(seed=args.seed, tolerance=args.tolerance)
    width = max(len(k) for k in report)
    for name in sorted(k for k in report if not k.startswith("_")):
        entry = report[name]
        status = "ok" if entry["passed"] else "FAIL"
        print(f"{name:<{width}}  max_rel_err={entry['max_rel_err']:.3e}  {status}")
    if not report["_summary"]["all_passed"]:
        print("gradcheck FAILED", file=sys.stderr)
        return EXIT_NUMERICAL
    print("gradcheck passed")
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        handler = {
            "gen": cmd_gen,
            "train": cmd_train,
            "infer": cmd_infer,
            "eval": cmd_eval,
            "gradcheck": cmd_gradcheck,
        }[args.command]
        return handler(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergedError, NumericalError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
