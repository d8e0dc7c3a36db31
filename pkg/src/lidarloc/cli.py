"""``lidarloc`` command line: synth, train, eval, bench, invariance."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import RunConfig, default_synthetic_config, load_config
from .errors import LidarLocError
from .pipeline import cmd_bench, cmd_eval, cmd_invariance, cmd_synth, cmd_train


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lidarloc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("synth", "write a synthetic dataset to disk"),
        ("train", "train a model; writes checkpoint, loss curve, config snapshot"),
        ("eval", "localize test scans with a checkpoint; writes report and trajectory"),
        ("bench", "time one attention layer over growing sequence lengths"),
        ("invariance", "run the invariance property suite"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value run config (default: built-in synthetic setup)")
        p.add_argument("--seed", type=int)
        p.add_argument("--preset", choices=["desk", "full"])
        p.add_argument("--out", help="output directory")
        if name in ("eval", "invariance"):
            p.add_argument("--checkpoint", help="model checkpoint (.mlck)")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else default_synthetic_config()
    return cfg.with_overrides(seed=args.seed, preset=args.preset, out_dir=args.out)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "synth":
            print(f"dataset written to {cmd_synth(cfg)}")
        elif args.command == "train":
            out = cmd_train(cfg)
            print(f"final loss {out.result.losses[-1]:.4f}; checkpoint {out.checkpoint}")
        elif args.command == "eval":
            report = cmd_eval(cfg, args.checkpoint)
            for key, value in report.summary().items():
                print(f"{key}: {value}")
        elif args.command == "bench":
            res = cmd_bench(cfg)
            for r in res.rows:
                print(f"V={r.tokens:6d} dots={r.dot_products} bound={r.bound} time={r.seconds * 1e3:.2f} ms")
            print(f"log-log slope {res.slope:.3f}")
        elif args.command == "invariance":
            report = cmd_invariance(cfg, args.checkpoint)
            print(report.to_text(), end="")
            if not report.passed:
                return 1
    except LidarLocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
