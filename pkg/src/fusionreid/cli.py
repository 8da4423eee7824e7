"""Command-line entry point.

Subcommands: synth, pretrain, finetune, eval, gradcam, ablate. Every
command validates the complete effective config before touching data and
keeps all outputs inside its run directory. Exit codes: 0 success,
2 config/usage error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import pipeline
from .datagen import load_dataset, save_dataset
from .errors import (ConfigError, DataError, EvaluationError, NumericError,
                     UsageError)
from .model import load_checkpoint
from .runconfig import load_config, write_effective_config
from .train import load_model_from_checkpoint

OUTPUT_ROOT_ENV = "FUSIONREID_OUT"


def _default_out(name: str) -> str:
    return str(Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / name)


def _add_common(sub, name):
    sub.add_argument("--config", help="JSON config file merged over the defaults")
    sub.add_argument("--set", dest="overrides", action="append", default=[],
                     metavar="KEY=VALUE", help="override a config field, e.g. "
                     "finetune.lr=0.01 (repeatable)")
    sub.add_argument("--out", default=_default_out(name),
                     help=f"run directory (default ${OUTPUT_ROOT_ENV}/{name} or runs/{name})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fusionreid",
        description="Desk-scale image-text fusion transformer for person "
                    "retrieval: synthesize data, pretrain with masking, "
                    "finetune, evaluate, visualize.")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("synth", help="generate the synthetic dataset directory")
    _add_common(p, "synth")
    p.set_defaults(func=cmd_synth)

    p = subs.add_parser("pretrain", help="masked pretraining on the train split")
    _add_common(p, "pretrain")
    p.add_argument("--dataset", required=True, help="dataset directory from synth")
    p.add_argument("--resume", help="continue from a pretraining checkpoint")
    p.add_argument("--max-steps", type=int, default=None,
                   help="interrupt after this global step (resume later)")
    p.set_defaults(func=cmd_pretrain)

    p = subs.add_parser("finetune", help="supervised finetuning on the train split")
    _add_common(p, "finetune")
    p.add_argument("--dataset", required=True)
    p.add_argument("--init", help="initialize encoders from this checkpoint")
    p.add_argument("--resume", help="continue from a finetuning checkpoint")
    p.add_argument("--max-steps", type=int, default=None,
                   help="interrupt after this global step (resume later)")
    p.add_argument("--eval-after", action="store_true",
                   help="score held-out retrieval after training")
    p.set_defaults(func=cmd_finetune)

    p = subs.add_parser("eval", help="retrieval scoring of a checkpoint")
    _add_common(p, "eval")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("gradcam", help="export class-activation heatmaps")
    _add_common(p, "gradcam")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ids", required=True,
                   help="comma-separated sample indices, e.g. 0,5,12")
    p.set_defaults(func=cmd_gradcam)

    p = subs.add_parser("ablate", help="baseline vs random vs region masking")
    _add_common(p, "ablate")
    p.add_argument("--dataset", required=True)
    p.add_argument("--seeds", default="0",
                   help="comma-separated training seeds (median reported)")
    p.set_defaults(func=cmd_ablate)

    return parser


def _prepare(args, needs_dataset=True):
    cfg = load_config(args.config, args.overrides)  # raises ConfigError first
    run_dir = Path(args.out)
    write_effective_config(cfg, run_dir)
    dataset = load_dataset(args.dataset) if needs_dataset else None
    return cfg, run_dir, dataset


def cmd_synth(args) -> int:
    cfg, run_dir, _ = _prepare(args, needs_dataset=False)
    dataset = pipeline.synthesize(cfg)
    save_dataset(dataset, run_dir / "dataset")
    print(f"wrote {len(dataset.samples)} samples to {run_dir / 'dataset'}")
    return 0


def cmd_pretrain(args) -> int:
    cfg, run_dir, dataset = _prepare(args)
    state = pipeline.run_pretrain_job(cfg, dataset, run_dir, resume=args.resume,
                                      stop_at=args.max_steps)
    if state.history:
        print(f"pretraining at step {state.step}; final total loss "
              f"{state.history[-1].total:.4f} -> {run_dir / 'checkpoint.bin'}")
    else:
        print(f"pretraining already complete at step {state.step}")
    return 0


def cmd_finetune(args) -> int:
    cfg, run_dir, dataset = _prepare(args)
    state = pipeline.run_finetune_job(cfg, dataset, run_dir,
                                      init_checkpoint=args.init,
                                      resume=args.resume,
                                      stop_at=args.max_steps)
    if state.history:
        print(f"finetuning at step {state.step}; final total loss "
              f"{state.history[-1].total:.4f} -> {run_dir / 'checkpoint.bin'}")
    else:
        print(f"finetuning already complete at step {state.step}")
    if args.eval_after:
        result = pipeline.evaluate_model(cfg, state.model, dataset, run_dir)
        print(f"held-out mAP {result.mean_ap:.4f}, rank-1 {result.rank(1):.4f}")
    return 0


def cmd_eval(args) -> int:
    cfg, run_dir, dataset = _prepare(args)
    model = load_model_from_checkpoint(args.checkpoint)
    result = pipeline.evaluate_model(cfg, model, dataset, run_dir)
    print(f"mAP {result.mean_ap:.4f}, rank-1 {result.rank(1):.4f}, "
          f"rank-5 {result.rank(min(5, len(result.cmc))):.4f} "
          f"({result.num_valid_queries} valid queries)")
    return 0


def cmd_gradcam(args) -> int:
    cfg, run_dir, dataset = _prepare(args)
    try:
        indices = [int(tok) for tok in args.ids.split(",") if tok.strip() != ""]
    except ValueError:
        raise UsageError(f"--ids must be comma-separated integers, got {args.ids!r}")
    if not indices:
        raise UsageError("--ids selected no samples")
    model = load_model_from_checkpoint(args.checkpoint)
    _, meta = load_checkpoint(args.checkpoint)
    feature_source = (meta or {}).get("train_config", {}).get("feature_source", "cls_m")
    written = pipeline.gradcam_job(cfg, model, dataset, indices, run_dir,
                                   feature_source=feature_source)
    print(f"wrote heatmaps for {len(written)} samples to {run_dir / 'gradcam'}")
    return 0


def cmd_ablate(args) -> int:
    cfg, run_dir, dataset = _prepare(args)
    try:
        seeds = [int(tok) for tok in args.seeds.split(",") if tok.strip() != ""]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {args.seeds!r}")
    result = pipeline.run_ablation(cfg, dataset, seeds, run_dir)
    for arm in pipeline.ABLATION_ARMS:
        print(f"{arm:12s} mAP {result.median_map(arm):.4f} "
              f"rank-1 {result.median_rank1(arm):.4f}")
    print(f"untrained    mAP {result.untrained_median_map:.4f}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, EvaluationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
