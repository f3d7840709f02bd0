"""Command-line entry point: ``ctxvote <command> [options]``.

Commands::

    generate   write synthetic scenes to a directory
    train      fit a model on a scene directory, write a checkpoint and loss log
    detect     run a checkpoint over scenes, write a prediction file
    eval       AP / mAP of a prediction file against the scenes' boxes
    count      counting-by-detection errors of a prediction file
    gradcheck  finite-difference check of every differentiable op
    ablate     train and evaluate all eight context-module settings

One ``--config`` file may hold detector keys (``epochs = 20``) and
generator keys (``synth.max_objects = 4``).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import evaluation as ev
from .checkpoint import CheckpointError
from .config import ConfigError, PipelineConfig, parse_config
from .experiment import ablate, ablation_json, ablation_table, make_split, run_detector, detections_of
from .gradcheck import default_cases, run_suite
from .model import InputError, load_model, save_model
from .scenes import ParseError, SynthConfig, read_predictions, read_scene_dir, write_predictions, write_scene_dir
from .train import TrainingError, train_toy

# errors that end a run with a message instead of a traceback
USER_ERRORS = (
    ConfigError,
    ParseError,
    CheckpointError,
    InputError,
    TrainingError,
    ev.EvaluationError,
    FileNotFoundError,
    ValueError,
    OSError,
)


def _read_config_text(args) -> str:
    return Path(args.config).read_text(encoding="utf-8") if getattr(args, "config", None) else ""


def _pipeline_config(args) -> PipelineConfig:
    cfg = parse_config(_read_config_text(args))
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "stages", None):
        cfg = cfg.replace(stages=_stages(args.stages))
    return cfg


def _stages(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"--stages expects comma-separated numbers, got {text!r}") from None


def cmd_generate(args) -> int:
    text = _read_config_text(args)
    parse_config(text)  # detector keys are unused here but still validated
    synth = parse_config(text, SynthConfig, namespace="synth")
    if args.seed is not None:
        synth = dataclasses.replace(synth, seed=args.seed)
    scenes = make_split(synth, args.start, args.count)
    write_scene_dir(args.out, scenes)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _pipeline_config(args)
    if args.epochs is not None:
        cfg = cfg.replace(epochs=args.epochs)
    scenes = read_scene_dir(args.scenes)
    res = train_toy(scenes, cfg)
    save_model(args.out, res.params, cfg)
    names = sorted(res.parts[0]) if res.parts else []
    lines = ["\t".join(["epoch", "loss"] + names)]
    for e, (loss, parts) in enumerate(zip(res.losses, res.parts)):
        lines.append("\t".join([str(e), repr(loss)] + [repr(parts[k]) for k in names]))
    loss_log = args.loss_log or f"{args.out}.loss.tsv"
    Path(loss_log).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"trained {cfg.epochs} epochs on {len(scenes)} scenes; final loss {res.losses[-1]:.6f}")
    print(f"checkpoint: {args.out}\nloss log: {loss_log}")
    return 0


def cmd_detect(args) -> int:
    params, cfg = load_model(args.checkpoint)
    if args.stages and _stages(args.stages) != tuple(cfg.stages):
        raise ConfigError(f"checkpoint was trained with stages {list(cfg.stages)}, got --stages {args.stages}")
    scenes = read_scene_dir(args.scenes)
    dets = detections_of(scenes, run_detector(params, cfg, scenes))
    write_predictions(args.out, dets)
    print(f"wrote {sum(len(d) for d in dets.values())} detections for {len(scenes)} scenes to {args.out}")
    return 0


def _num_classes(scenes) -> int:
    return max(s.num_classes for s in scenes)


def cmd_eval(args) -> int:
    scenes = read_scene_dir(args.scenes)
    dets = read_predictions(args.predictions)
    rep = ev.evaluate(dets, scenes, _num_classes(scenes))
    if args.out:
        Path(args.out).write_text(rep.to_json(), encoding="utf-8")
    sys.stdout.write(ev.ap_table({"detector": rep}, f"{args.iou:g}"))
    return 0


def cmd_count(args) -> int:
    scenes = read_scene_dir(args.scenes)
    dets = read_predictions(args.predictions)
    c = _num_classes(scenes)
    p = ev.count_by_detection(dets, [s.id for s in scenes], c, args.conf)
    rep = ev.counting_metrics(p, ev.gt_counts(scenes, c))
    if args.out:
        Path(args.out).write_text(rep.to_json(c), encoding="utf-8")
    sys.stdout.write(ev.count_table({f"detector (conf {args.conf:g})": rep}))
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(default_cases(), trials=args.trials, tol=args.tol, seed=args.seed or 0)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  trials {r.trials}  max rel err {r.max_rel_error:.3e}  {r.seconds:6.2f}s  {status}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_ablate(args) -> int:
    cfg = _pipeline_config(args)
    train = read_scene_dir(args.scenes)
    held = read_scene_dir(args.eval_scenes)
    rows = ablate(train, held, cfg)
    if args.out:
        Path(args.out).write_text(ablation_json(rows), encoding="utf-8")
    sys.stdout.write(ablation_table(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ctxvote", description="Context-aware voting 3D detector (toy scale).")
    ap.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True, seed=True):
        if config:
            p.add_argument("--config", help="key = value configuration file")
        if seed:
            p.add_argument("--seed", type=int, help="overrides the configured seed")
        return p

    p = common(sub.add_parser("generate", help="write synthetic scenes"))
    p.add_argument("--out", required=True, help="output scene directory")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--start", type=int, default=0, help="index of the first scene")
    p.set_defaults(func=cmd_generate)

    p = common(sub.add_parser("train", help="train a model"))
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-log", help="default: <out>.loss.tsv")
    p.add_argument("--stages", help="cascade IoU thresholds, default 0.5,0.55,0.6")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="run a checkpoint over scenes")
    p.add_argument("--scenes", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="prediction file")
    p.add_argument("--stages", help="must match the checkpoint when given")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="AP / mAP of predictions")
    p.add_argument("--scenes", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--iou", type=float, choices=(0.25, 0.5), default=0.25, help="threshold of the printed table")
    p.add_argument("--out", help="JSON report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("count", help="counting-by-detection errors")
    p.add_argument("--scenes", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--conf", type=float, default=0.95, help="objectness threshold")
    p.add_argument("--out", help="JSON report path")
    p.set_defaults(func=cmd_count)

    p = common(sub.add_parser("gradcheck", help="finite-difference gradient suite"), config=False)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = common(sub.add_parser("ablate", help="all eight context-module settings"))
    p.add_argument("--scenes", required=True, help="training scenes")
    p.add_argument("--eval-scenes", required=True, help="held-out scenes")
    p.add_argument("--out", help="JSON report path")
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except USER_ERRORS as e:
        print(f"ctxvote {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
