"""Command line entry point: ``lens <command> [options]``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .numerics import NonFiniteError
from .pipeline import (
    CheckpointError,
    ConfigError,
    FreezeViolation,
    RunConfig,
    cmd_ablate,
    cmd_align,
    cmd_bootstrap,
    cmd_eval,
    cmd_rl,
    load_config,
    load_split,
    paper_scale,
)
from .rewards import PredictionFormatError, read_predictions, score_predictions
from .synthworld import export_dataset


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lens", description="Toy reasoning-segmentation training pipeline.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, ckpt=False):
        sp.add_argument("--config", help="JSON run config (defaults to the toy config)")
        sp.add_argument("--paper-scale", action="store_true", help="use the paper's stage hyper-parameters")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="output directory (defaults to config out_dir)")
        sp.add_argument("--quiet", action="store_true")
        if ckpt:
            sp.add_argument("--ckpt", required=True, help="input checkpoint")
            sp.add_argument("--allow-config-mismatch", action="store_true", help="load a checkpoint written under another config")
        return sp

    common(sub.add_parser("bootstrap", help="stage 0: supervised warm start"))
    common(sub.add_parser("align", help="stage 1: train context queries and connector"), ckpt=True).add_argument("--debug", action="store_true")
    rl = common(sub.add_parser("rl", help="stage 2: GRPO with unified rewards"), ckpt=True)
    rl.add_argument("--debug", action="store_true")
    rl.add_argument("--workers", type=int, help="threads for rollout generation")
    ev = common(sub.add_parser("eval", help="greedy evaluation on a split"), ckpt=True)
    ev.add_argument("--split", default="heldout", help="train, heldout or a dataset JSONL path")
    ab = common(sub.add_parser("ablate", help="ablation harness (CSV output)"), ckpt=True)
    ab.add_argument("--experiment", required=True, choices=["queries", "connector", "rewards"])
    ex = common(sub.add_parser("export-data", help="write a split as a dataset JSONL file"))
    ex.add_argument("--split", default="heldout")
    sc = common(sub.add_parser("score", help="score a prediction JSONL offline"))
    sc.add_argument("--predictions", required=True)
    sc.add_argument("--split", default="heldout", help="train, heldout or a dataset JSONL path")
    return p


def _config(args) -> RunConfig:
    if args.config and args.paper_scale:
        raise ConfigError("--config and --paper-scale are exclusive")
    cfg = load_config(args.config) if args.config else (paper_scale() if args.paper_scale else RunConfig())
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.out_dir = args.out
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    progress = None if getattr(args, "quiet", False) else (lambda msg: print(msg, file=sys.stderr, flush=True))
    try:
        cfg = _config(args)
        override = getattr(args, "allow_config_mismatch", False)
        if args.command == "bootstrap":
            print(cmd_bootstrap(cfg, progress=progress))
        elif args.command == "align":
            print(cmd_align(cfg, args.ckpt, override=override, progress=progress, debug=args.debug))
        elif args.command == "rl":
            if args.workers is not None:
                cfg.rl.workers = args.workers
            print(cmd_rl(cfg, args.ckpt, override=override, progress=progress, debug=args.debug))
        elif args.command == "eval":
            print(json.dumps(cmd_eval(cfg, args.ckpt, args.split, override=override)))
        elif args.command == "ablate":
            print(cmd_ablate(cfg, args.ckpt, args.experiment, progress=progress))
        elif args.command == "export-data":
            out = Path(cfg.out_dir)
            out.mkdir(parents=True, exist_ok=True)
            path = out / f"{args.split}.jsonl"
            export_dataset(load_split(cfg, args.split), path)
            print(path)
        elif args.command == "score":
            samples = load_split(cfg, args.split)
            preds = read_predictions(args.predictions, cfg.world.width, cfg.world.height)
            print(json.dumps(score_predictions(preds, samples)))
    except NonFiniteError as exc:
        print(f"lens: training diverged: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, CheckpointError, FreezeViolation, PredictionFormatError, FileNotFoundError) as exc:
        print(f"lens: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
