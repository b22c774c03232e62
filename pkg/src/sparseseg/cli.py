"""Command-line entry point.

Exit codes: 0 success, 1 config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import model as M
from . import pipeline as P
from .errors import ConfigError, DataError, NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def cmd_synth(cfg, args):
    for path in P.run_synth(cfg):
        print(path)


def cmd_meta_train(cfg, args):
    if "weasel" not in cfg.plan.methods:
        print("plan has no 'weasel' method; nothing to meta-train")
        return
    datasets = P.load_datasets(cfg)
    for tag in P.run_meta_train(cfg, datasets):
        print(P.weasel_checkpoint_path(cfg, tag))


def cmd_adapt(cfg, args):
    records = P.run_adapt(cfg, args.jobs)
    print(f"adapted {len(records)} cells into {cfg.out / 'adapted'}")


def cmd_eval(cfg, args):
    print(P.run_eval(cfg))


def cmd_sweep(cfg, args):
    records = P.run_sweep(cfg, args.jobs)
    print(f"{len(records)} records -> {P.results_path(cfg)}")


def cmd_report(cfg, args):
    for path in P.run_report(cfg):
        print(path)


COMMANDS = {
    "synth": (cmd_synth, "generate the synthetic datasets"),
    "meta-train": (cmd_meta_train, "meta-train the initialization(s) for the plan"),
    "adapt": (cmd_adapt, "fine-tune every plan cell and save adapted checkpoints"),
    "eval": (cmd_eval, "score saved adapted checkpoints into the results CSV"),
    "sweep": (cmd_sweep, "adapt + evaluate every cell, then write the report"),
    "report": (cmd_report, "aggregate table and plots from the results CSV"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparseseg", description="Few-shot segmentation from sparse labels.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--seed", type=int, default=None, help="override the global seed")
        p.add_argument("--jobs", type=int, default=1, help="parallel evaluation cells")
        p.add_argument("--out", default=None, help="override out_dir")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. meta.meta_iterations=0")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = P.load_config(args.config, args.overrides, args.seed, args.out)
        cfg.out.mkdir(parents=True, exist_ok=True)
        (cfg.out / "config.resolved.yaml").write_text(P.dump_config(cfg))
        COMMANDS[args.command][0](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
