"""
Command-line entry point for the Ball Sparse Attention toolkit

    python -m ballsparse.main <check|bench|flops|train|ablate|rf> [flags]

Every flag default can be overridden by an environment variable named
BSA_<FLAG> (upper case, dashes as underscores), e.g. BSA_BALL_SIZE=128.
"""

import argparse
import logging
import os
import sys
from typing import Callable, Dict, List, Optional, Tuple, Type

from pydantic import ValidationError

from ballsparse.config import BENCH_CONFIG, ENV_PREFIX, EXIT_CODES, LOGGING_CONFIG, VARIANTS
from ballsparse.exceptions import InvalidArgumentError, InvalidConfigError, RejectedInputError, ShapeError
from ballsparse.cli.bench import cmd_bench, cmd_flops
from ballsparse.cli.check import cmd_check
from ballsparse.cli.requests import (
    AblateRequest,
    BenchRequest,
    CheckRequest,
    FlopsRequest,
    RfRequest,
    RunConfig,
    TrainRequest,
)
from ballsparse.cli.rf import cmd_rf
from ballsparse.cli.train import cmd_ablate, cmd_train

logger = logging.getLogger(__name__)

COMMANDS: Dict[str, Tuple[Type[RunConfig], Callable[[RunConfig], int], str]] = {
    "check": (CheckRequest, cmd_check, "Run the invariant / oracle suite"),
    "bench": (BenchRequest, cmd_bench, "Forward runtime sweep over N and variants"),
    "flops": (FlopsRequest, cmd_flops, "Analytic FLOP report"),
    "train": (TrainRequest, cmd_train, "Train the toy point-cloud regression"),
    "ablate": (AblateRequest, cmd_ablate, "Block-length / group-size ablation grid"),
    "rf": (RfRequest, cmd_rf, "Export one token's receptive field"),
}

_TRUE = ("1", "true", "yes", "on")


def _csv_list(value: str) -> List[str]:
    return [item.strip() for item in value.split(",") if item.strip()]


def _branches(value: str) -> Tuple[str, ...]:
    return tuple(_csv_list(value))


def _add_layer_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--variant", choices=sorted(VARIANTS), help="Attention variant")
    parser.add_argument("--ball-size", type=int, help="Ball size m")
    parser.add_argument("--block-len", type=int, help="Block length l")
    parser.add_argument("--top-k", type=int, help="Selected blocks per group")
    parser.add_argument("--group-size", type=int, help="Queries sharing one selection")
    parser.add_argument("--phi", choices=["mean", "mlp"], help="Block compressor")
    parser.add_argument("--branches", type=_branches, help="Comma-separated subset of ball,cmp,slc")
    parser.add_argument("--no-ball-masking", action="store_true", help="Allow selecting blocks of the own ball")
    parser.add_argument("--seed", type=int, help="Random seed")
    parser.add_argument("--precision", choices=["working", "high"], help="Numeric precision")
    parser.add_argument("--threads", type=int, help="BLAS thread limit (default: all cores)")
    parser.add_argument("--out", help="Output path (stdout when omitted)")


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--dataset-path", help="Directory of point-cloud files (synthetic data when omitted)")
    parser.add_argument("--steps", type=int, help="Optimizer steps")
    parser.add_argument("--n-points", type=int, help="Points per synthetic cloud")
    parser.add_argument("--depth", type=int, help="Transformer blocks")
    parser.add_argument("--batch-size", type=int, help="Clouds per step")
    parser.add_argument("--eval-interval", type=int, help="Steps between test evaluations")
    parser.add_argument("--learning-rate", type=float, help="Peak learning rate")
    parser.add_argument("--weight-decay", type=float, help="AdamW weight decay")


def _apply_env_defaults(parser: argparse.ArgumentParser) -> None:
    """Take flag defaults from BSA_<DEST> environment variables"""
    for action in parser._actions:
        if not action.option_strings or action.dest == "help":
            continue
        value = os.environ.get(f"{ENV_PREFIX}{action.dest.upper()}")
        if value is None:
            continue
        # argparse runs string defaults through the flag's type; switches take a boolean
        action.default = value.strip().lower() in _TRUE if action.nargs == 0 else value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ballsparse", description="Ball Sparse Attention toolkit")
    parser.add_argument(
        "--log-level",
        default=LOGGING_CONFIG["level"],
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Logging level",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    for name, (_, _, help_text) in COMMANDS.items():
        sub = subparsers.add_parser(name, help=help_text)
        _add_layer_flags(sub)
        if name == "check":
            sub.add_argument("--corrupt-tie-rule", action="store_true", help=argparse.SUPPRESS)
        elif name == "bench":
            sub.add_argument("--min-n", type=int, help="Smallest point count")
            sub.add_argument("--max-n", type=int, help="Largest point count")
            sub.add_argument(
                "--variants", type=_csv_list,
                help=f"Comma-separated variants (default: {','.join(BENCH_CONFIG['variants'])})",
            )
            sub.add_argument("--repeats", type=int, help="Timed runs per point")
            sub.add_argument("--warmups", type=int, help="Untimed runs per point")
        elif name == "flops":
            sub.add_argument("--n", type=int, help="Point count")
            sub.add_argument("--depth", type=int, help="Layers")
            sub.add_argument("--format", choices=["kv", "csv"], help="kv for one variant, csv for all")
        elif name in ("train", "ablate"):
            _add_train_flags(sub)
        elif name == "rf":
            sub.add_argument("--points-file", help="Point-cloud file (synthetic cloud when omitted)")
            sub.add_argument("--n-points", type=int, help="Points in the synthetic cloud")
            sub.add_argument("--token", type=int, help="Original index of the query token")
        _apply_env_defaults(sub)

    _apply_env_defaults(parser)
    return parser


def build_request(args: argparse.Namespace) -> RunConfig:
    """Validated request for the parsed command (flags left unset keep the model defaults)"""
    request_cls = COMMANDS[args.command][0]
    values = {
        key: value for key, value in vars(args).items()
        if key not in ("command", "log_level") and value is not None and value is not False
    }
    return request_cls(**values)


def _fail(kind: str, detail: str) -> int:
    detail = " ".join(str(detail).split()).replace('"', "'")
    print(f'error={kind} detail="{detail}"', file=sys.stderr)
    return EXIT_CODES[kind]


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOGGING_CONFIG["format"])

    try:
        request = build_request(args)
        return COMMANDS[args.command][1](request)
    except ValidationError as e:
        return _fail("invalid_config", "; ".join(err["msg"] for err in e.errors()))
    except (InvalidConfigError, InvalidArgumentError) as e:
        return _fail("invalid_config", str(e))
    except FileNotFoundError as e:
        return _fail("missing_input", str(e))
    except (RejectedInputError, ShapeError) as e:
        return _fail("rejected_input", str(e))
    except Exception as e:
        logger.error(f"Command {args.command} failed: {e}", exc_info=True)
        return EXIT_CODES["check_failed"]


if __name__ == "__main__":
    sys.exit(main())
