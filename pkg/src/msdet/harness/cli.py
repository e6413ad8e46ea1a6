"""``msdet`` command line: gen, train, eval, viz-queries, viz-sampling, ablate."""
from __future__ import annotations

import argparse
import sys

from ..errors import ConfigError, ContractError, DimensionError, GenerationError, ParseError
from . import commands as C
from .config import RunConfig


def _ints(text: str) -> tuple:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file (defaults apply to missing keys)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key, e.g. --set model.layers=2 (repeatable)")

    p = argparse.ArgumentParser(prog="msdet", description="Desk-scale multispectral detection transformer.")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen", parents=[common], help="write train/val/val_shift scenes to data_dir")

    t = sub.add_parser("train", parents=[common], help="train on data_dir/train")
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.add_argument("--grad-check", action="store_true", help="finite-difference check one batch and exit")
    t.add_argument("--max-steps", type=int, help="stop after this many more steps")

    e = sub.add_parser("eval", parents=[common], help="AP report of a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="val", choices=C.SPLITS)
    e.add_argument("--report", help="report path (default: <checkpoint>/eval_<split>.txt)")

    for name, helptext in (("viz-queries", "overlay selected query points"),
                           ("viz-sampling", "overlay one query's sampling points per layer")):
        v = sub.add_parser(name, parents=[common], help=helptext)
        v.add_argument("--checkpoint", required=True)
        v.add_argument("--split", default="val", choices=C.SPLITS)
        v.add_argument("--index", type=int, default=0, help="image index within the split")
        v.add_argument("--out", required=True, help="output directory for PPM files")
        if name == "viz-queries":
            v.add_argument("--highlight", type=int, default=10, help="number of top queries drawn red")
        else:
            v.add_argument("--query", type=int, default=0, help="query index in [0, N)")

    a = sub.add_parser("ablate", parents=[common], help="train and score the ablation grid")
    a.add_argument("--seeds", type=_ints, default=(0, 1, 2))
    a.add_argument("--variants", default=",".join(C.DEFAULT_VARIANTS),
                   help=f"comma-separated subset of {','.join(C.ABLATION_GRID)}")
    return p


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = args.seed
    return cfg.with_overrides(**overrides) if overrides else cfg.validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        if args.command == "gen":
            C.cmd_gen(cfg)
        elif args.command == "train":
            C.cmd_train(cfg, resume=args.resume, grad_check=args.grad_check, max_steps=args.max_steps)
        elif args.command == "eval":
            C.cmd_eval(cfg, args.checkpoint, args.split, args.report)
        elif args.command == "viz-queries":
            C.cmd_viz_queries(cfg, args.checkpoint, args.split, args.index, args.out, args.highlight)
        elif args.command == "viz-sampling":
            C.cmd_viz_sampling(cfg, args.checkpoint, args.split, args.index, args.query, args.out)
        elif args.command == "ablate":
            variants = tuple(v for v in args.variants.split(",") if v)
            C.cmd_ablate(cfg, args.seeds, variants)
    except (ConfigError, ContractError, DimensionError, GenerationError, ParseError, OSError) as exc:
        print(f"msdet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
