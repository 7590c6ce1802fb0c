"""Command-line interface.

Exit codes: 0 success, 1 configuration/usage error, 2 runtime failure,
3 release-gate failure (reproduce-all only).
"""

from __future__ import annotations

import argparse
import os
import sys
import traceback

from .config import ConfigError, apply_overrides, default_config, echo_config, load_config
from . import pipeline
from .pipeline import PipelineError, resolve_paths

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_GATES = 3

COMMANDS = ("gen-phantoms", "train-codec", "train-ldm", "train-controlnet",
            "sample", "quality-check", "eval-fid", "reproduce-all")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowct",
        description="Rectified-flow latent synthesis of CT-like volumes, desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", default=None, help="JSON config file (defaults apply)")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="dotted config override, repeatable")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="output root directory")

    add_common(sub.add_parser("gen-phantoms", help="synthesize the phantom corpus"))
    add_common(sub.add_parser("train-codec", help="train and freeze the latent codec"))
    add_common(sub.add_parser("train-ldm", help="train the velocity net over codec latents"))
    p = sub.add_parser("train-controlnet", help="train the mask-conditioning branch")
    add_common(p)
    p.add_argument("--no-contrastive", action="store_true",
                   help="drop the region-contrastive terms (ablation baseline)")
    p = sub.add_parser("sample", help="generate volumes from the trained models")
    add_common(p)
    p.add_argument("--steps", type=int, default=None, help="sampler step count (>= 1)")
    p.add_argument("--count", type=int, default=None, help="number of volumes")
    p.add_argument("--conditional", action="store_true",
                   help="condition on corpus label maps via the control branch")
    add_common(sub.add_parser("quality-check", help="calibrate organ-HU bounds and check the corpus"))
    p = sub.add_parser("eval-fid", help="three-plane FID of generated volumes vs the corpus")
    add_common(p)
    p.add_argument("--samples", default=None, help="directory of generated .nii volumes")
    add_common(sub.add_parser("reproduce-all", help="full pipeline plus every release gate"))
    return parser


def _effective_config(args) -> dict:
    cfg = load_config(args.config) if args.config else default_config()
    cfg = apply_overrides(cfg, args.overrides)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError(f"--seed must be >= 0, got {args.seed}")
        cfg["seed"] = args.seed
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _effective_config(args)
    except ConfigError as exc:
        print(f"flowct: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    paths = resolve_paths(cfg, args.out)
    try:
        if args.command == "reproduce-all":
            code, _ = pipeline.reproduce_all(cfg, args.out, log=print)
            return code

        pipeline._ensure_dirs(paths)
        echo_config(cfg, os.path.join(paths["root"], "config.json"))
        if args.command == "gen-phantoms":
            pipeline.generate_corpus(cfg, paths, log=print)
        elif args.command == "train-codec":
            pipeline.run_train_codec(cfg, paths, log=print)
        elif args.command == "train-ldm":
            pipeline.run_train_ldm(cfg, paths, log=print)
        elif args.command == "train-controlnet":
            tag = "controlnet_baseline" if args.no_contrastive else "controlnet"
            pipeline.run_train_controlnet(cfg, paths, not args.no_contrastive, tag, log=print)
        elif args.command == "sample":
            if args.steps is not None and args.steps < 1:
                print(f"flowct: sample --steps must be >= 1, got {args.steps}", file=sys.stderr)
                return EXIT_USAGE
            pipeline.run_sample(cfg, paths, steps=args.steps, count=args.count,
                                seed=None, conditional=args.conditional, log=print)
        elif args.command == "quality-check":
            report = pipeline.run_quality(cfg, paths, log=print)
            if report["pass_fraction"] < 1.0:
                return EXIT_GATES
        elif args.command == "eval-fid":
            pipeline.run_fid(cfg, paths, synth_dir=args.samples, log=print)
        else:  # pragma: no cover - argparse restricts the choices
            print(f"flowct: unknown command {args.command!r}", file=sys.stderr)
            return EXIT_USAGE
    except (ConfigError, PipelineError) as exc:
        print(f"flowct: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"flowct: runtime failure: {exc}", file=sys.stderr)
        traceback.print_exc()
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
