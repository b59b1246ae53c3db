"""Command line entry point: ``dnq train|search|quantize|eval|export``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import codec, pipeline
from .config import ConfigError, load_config


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")
    p = argparse.ArgumentParser(prog="dnq", description="Dynamic network quantization at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", required=True, help="YAML config file")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. controller.lam=0.5")
        sp.add_argument("--workdir", help="shortcut for --set paths.workdir=...")
        return sp

    with_config(sub.add_parser("train", parents=[common], help="train the float baseline"))
    sp = with_config(sub.add_parser("search", parents=[common], help="learn a bit-width sequence"))
    sp.add_argument("--checkpoint")
    sp = with_config(sub.add_parser("quantize", parents=[common], help="quantize and pack a float checkpoint"))
    sp.add_argument("--checkpoint")
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--sequence", help="sequence file written by 'search'")
    g.add_argument("--uniform-bits", type=int, help="module-2-only mode: same bit-width for every layer")
    sp = with_config(sub.add_parser("eval", parents=[common], help="evaluate a packed model"))
    sp.add_argument("--packed")
    sp.add_argument("--dump-layout", action="store_true")
    sp = sub.add_parser("export", parents=[common], help="decode a packed model, print its layout, write a float checkpoint")
    sp.add_argument("--config", help="accepted for symmetry; unused")
    sp.add_argument("--packed", required=True)
    sp.add_argument("--out", help="float checkpoint to write")
    sp.add_argument("--dump-layout", action="store_true")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "export":
            layout = pipeline.cmd_export(args.packed, args.out)
            if args.dump_layout:
                print(layout.describe())
            return 0
        overrides = list(args.overrides)
        if args.workdir:
            overrides.append(f"paths.workdir={args.workdir}")
        cfg = load_config(args.config, overrides)
        if args.command == "train":
            out = pipeline.cmd_train(cfg)
        elif args.command == "search":
            res = pipeline.cmd_search(cfg, args.checkpoint)
            out = {"sequence": list(res.best.sequence), "bitwidths": res.full_bitwidths, "reward": res.best.reward}
        elif args.command == "quantize":
            out = pipeline.cmd_quantize(cfg, args.checkpoint, args.sequence, args.uniform_bits)
        else:
            out = pipeline.cmd_eval(cfg, args.packed)
            if args.dump_layout:
                path = args.packed or str(pipeline.path_of(cfg, "packed"))
                print(codec.layout(open(path, "rb").read()).describe())
        print(json.dumps(out, sort_keys=True))
        return 0
    except (ConfigError, codec.UnpackError, codec.PackError, ValueError, OSError) as e:
        print(f"dnq {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
