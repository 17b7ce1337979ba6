"""Command-line surface.

Subcommands: gen-data, train, evaluate, ablate, gradcheck, dump-features.
Training flags mirror the config fields; a key=value config file can seed
them and the VFE_SEED environment variable overrides the seed everywhere.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import CALIBRATION_MODES, MIM_VARIANTS, TrainConfig, config_from_sources
from .metrics import markdown_table
from .synthdata import load_dataset, write_dataset
from .trainer import (AUX_GRID_VARIANTS, CALIBRATION_VARIANTS, Trainer, ablate,
                      chance_level, dump_features, evaluate, evaluate_checkpoint,
                      gradcheck_report, mask_ratio_variants, train)

GRADCHECK_TOLERANCE = 1e-4


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file")
    flat = TrainConfig().to_flat_dict()
    for key, value in flat.items():
        if key == "mim_variant":
            parser.add_argument("--mim-variant", dest=key, choices=MIM_VARIANTS)
        elif key == "calibration_mode":
            parser.add_argument("--calibration-mode", dest=key, choices=CALIBRATION_MODES)
        elif isinstance(value, bool):
            parser.add_argument(f"--{key.replace('_', '-')}", dest=key,
                                type=lambda s: s.lower() in ("1", "true", "yes", "on"))
        else:
            parser.add_argument(f"--{key.replace('_', '-')}", dest=key,
                                type=type(value) if not isinstance(value, str) else str)


def _config_from_args(args: argparse.Namespace) -> TrainConfig:
    keys = TrainConfig().to_flat_dict().keys()
    overrides = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    return config_from_sources(args.config, overrides)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="pedsearch",
                                     description="Desk-scale text-based person search.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--identities", type=int, default=32)
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--captions-per-view", type=int, default=2)
    p.add_argument("--split", default="0.5,0.125,0.375",
                   help="train,val,test identity ratios")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-jitter", action="store_true")

    p = sub.add_parser("train", help="train a model")
    _add_config_flags(p)
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory (defaults to the checkpoint's)")
    p.add_argument("--split", default="test")
    p.add_argument("--out", help="write the report JSON here")

    p = sub.add_parser("ablate", help="run a predefined ablation study")
    _add_config_flags(p)
    p.add_argument("--study", choices=("aux", "calibration", "mask-ratio"), required=True)
    p.add_argument("--seeds", default="0,1,2")

    p = sub.add_parser("gradcheck", help="finite-difference check of each enabled loss")
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--mim-variant", dest="mim_variant", choices=MIM_VARIANTS,
                   default="text_guided")
    p.add_argument("--calibration-mode", dest="calibration_mode",
                   choices=CALIBRATION_MODES, default="kl")
    p.add_argument("--corrupt", choices=("cmpm", "calibration", "mim"),
                   help="deliberately break one gradient (harness self-test)")

    p = sub.add_parser("dump-features", help="export global features of a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)

    args = parser.parse_args(argv)

    if args.command == "gen-data":
        ratios = tuple(float(x) for x in args.split.split(","))
        manifest = write_dataset(args.out, args.identities, args.views,
                                 args.captions_per_view, ratios, args.seed,
                                 jitter=not args.no_jitter)
        print(json.dumps(manifest["splits"], indent=2))
        return 0

    if args.command == "train":
        config = _config_from_args(args)
        trainer = train(config, resume_from=args.resume)
        report = evaluate(trainer.model, trainer.dataset, "test", trainer.config)
        print(f"checkpoint: {trainer.checkpoint_path}")
        print(f"final total loss: {trainer.loss_log[-1]['total']:.6f}")
        print(report.markdown_row("test"))
        return 0

    if args.command == "evaluate":
        dataset = load_dataset(args.data) if args.data else None
        report = evaluate_checkpoint(args.checkpoint, dataset, args.split)
        print(markdown_table([(args.split, report)]))
        if args.out:
            Path(args.out).write_text(report.to_json(), encoding="utf-8")
        return 0

    if args.command == "ablate":
        config = _config_from_args(args)
        seeds = [int(s) for s in args.seeds.split(",")]
        variants = {"aux": AUX_GRID_VARIANTS,
                    "calibration": CALIBRATION_VARIANTS,
                    "mask-ratio": mask_ratio_variants()}[args.study]
        table = ablate(config, variants, seeds,
                       measure_avg_dist=args.study == "mask-ratio")
        print(table.to_markdown())
        out_dir = Path(config.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"ablation_{args.study}.md").write_text(table.to_markdown(), encoding="utf-8")
        (out_dir / f"ablation_{args.study}.csv").write_text(table.to_csv(), encoding="utf-8")
        return 0

    if args.command == "gradcheck":
        seeds = tuple(int(s) for s in args.seeds.split(","))
        losses = ["cmpm"]
        if args.calibration_mode != "off":
            losses.append("calibration")
        if args.mim_variant != "off":
            losses.append("mim")
        errors = gradcheck_report(h=args.h, seeds=seeds, corrupt=args.corrupt,
                                  losses=tuple(losses))
        failed = False
        for name, err in errors.items():
            status = "ok" if err <= GRADCHECK_TOLERANCE else "FAIL"
            failed = failed or err > GRADCHECK_TOLERANCE
            print(f"{name}: max relative error {err:.3e} [{status}]")
        return 1 if failed else 0

    if args.command == "dump-features":
        dataset = load_dataset(args.data) if args.data else None
        trainer = Trainer.load(args.checkpoint, dataset)
        dump_features(args.out, trainer, args.split)
        print(f"wrote {args.out} and {args.out}.jsonl")
        return 0

    return 2


if __name__ == "__main__":
    sys.exit(main())
