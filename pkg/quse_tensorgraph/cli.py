import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .commands import (
    STORED_CONFIG,
    AblateCommand,
    BuildGraphCommand,
    DumpConfigCommand,
    EvalCommand,
    LiftCommand,
    PepsCommand,
    PredictCommand,
    PrepareCommand,
    TrainCommand,
)
from .config import load_config
from .errors import TensorGraphError

logger = logging.getLogger(__name__)

# pipeline order: prepare -> build-graph -> (peps) -> lift -> train -> predict -> eval
stage_patterns = [
    PrepareCommand,
    BuildGraphCommand,
    PepsCommand,
    LiftCommand,
    TrainCommand,
    PredictCommand,
    EvalCommand,
    AblateCommand,
    DumpConfigCommand,
]

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="quse-tensorgraph",
        description="Spatiotemporal tensor-graph forecasting pipeline.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", type=Path, default=Path("artifacts"), help="artifact directory")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key; the value is read as JSON when possible",
    )
    common.add_argument("--verbose", action="store_true", help="log at DEBUG level")
    stages = parser.add_subparsers(dest="stage", metavar="STAGE", required=True)
    for command in stage_patterns:
        stages.add_parser(command.name, parents=[common], help=command.help).set_defaults(
            command=command
        )
    return parser


def configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=LOG_FORMAT,
        stream=sys.stderr,
        force=True,
    )


def _json_error(exc: TensorGraphError) -> str:
    messages = getattr(exc, "messages", None) or [str(exc)]
    return json.dumps({"error": messages, "exit_code": exc.exit_code}, sort_keys=True)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        stored = args.out / STORED_CONFIG
        if not (args.command.uses_stored_config and stored.is_file()):
            stored = None
        config = load_config(args.config, args.overrides, args.seed, stored)
        payload = args.command(config, args.out).dispatch()
    except TensorGraphError as exc:
        logger.error("%s failed: %s", args.stage, exc)
        print(_json_error(exc))
        return exc.exit_code
    print(json.dumps(payload, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
