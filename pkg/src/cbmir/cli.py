"""Command-line entry point.

Subcommands mirror the pipeline stages; a config file supplies defaults
and flags override the common knobs. Exit codes: 0 success, 2 config
error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import load_config
from .errors import ConfigError, DataError, NumericalError

STAGES = {
    "synth": (pipeline.stage_synth, "generate the synthetic corpus"),
    "features": (pipeline.stage_features, "fit transforms and extract frame features"),
    "train-dict": (pipeline.stage_train_dict, "train the codebook"),
    "encode": (pipeline.stage_encode, "encode songs against the codebook"),
    "pool": (pipeline.stage_pool, "pool codes into song vectors"),
    "qbt": (pipeline.stage_qbt, "query-by-tag evaluation"),
    "qbe": (pipeline.stage_qbe, "query-by-example evaluation"),
    "bench": (pipeline.stage_bench, "encoder runtime benchmark"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--seed", type=int, help="root seed")
    common.add_argument("--k", type=int, help="codebook size")
    common.add_argument("--method", choices=["lasso", "vq", "cs", "none"],
                        help="encoder method (none = pool raw features)")
    common.add_argument("--param", type=float,
                        help="encoder parameter (lambda / tau / theta)")
    common.add_argument("--pooling", choices=["mean", "max_abs"])
    common.add_argument("--ppk", action="store_true", default=None,
                        help="apply the square-root histogram transform")
    common.add_argument("--out", help="working directory for artifacts")
    common.add_argument("--corpus-dir", dest="corpus_dir", help="corpus directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="cbmir",
        description="Codebook-based song representations and retrieval experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, description) in STAGES.items():
        sub.add_parser(name, parents=[common], help=description)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    overrides = {key: getattr(args, key) for key in
                 ("seed", "k", "method", "param", "pooling", "ppk", "out",
                  "corpus_dir")}
    try:
        cfg = load_config(args.config, overrides)
        STAGES[args.command][0](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
