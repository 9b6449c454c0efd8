import argparse
import sys
from typing import Any, Callable, Dict, List, Optional

from loguru import logger

from config.settings import load_run_config, parse_overrides
from models.errors import EngineError
from models.schemas import RunConfig
from services.run_service import run_service
from services.storage_service import StorageService, storage_service
from utils.helpers import log_step

Handler = Callable[[RunConfig, StorageService, argparse.Namespace], Dict[str, Any]]


def _pipeline(cfg: RunConfig, storage: StorageService, args: argparse.Namespace) -> Dict[str, Any]:
    from workflows.analysis_workflow import workflow_manager

    return workflow_manager.run(cfg)


HANDLERS: Dict[str, Handler] = {
    "fit": lambda cfg, storage, args: run_service.fit(cfg, storage, dry_run=args.dry_run),
    "simulate": lambda cfg, storage, args: run_service.simulate(cfg, storage),
    "decode": lambda cfg, storage, args: run_service.decode(cfg, storage),
    "predict": lambda cfg, storage, args: run_service.predict(cfg, storage),
    "changepoint": lambda cfg, storage, args: run_service.changepoint(cfg, storage),
    "elpd": lambda cfg, storage, args: run_service.elpd(cfg, storage),
    "report": lambda cfg, storage, args: run_service.report(cfg, storage),
    "pipeline": _pipeline,
}

DESCRIPTIONS = {
    "fit": "sample the posterior; writes draws, diagnostics and adaptation tables",
    "simulate": "simulate a panel with its true parameters and trajectory",
    "decode": "modal states, Viterbi path and a sampled trajectory bundle",
    "predict": "posterior-predictive tables and SVG charts",
    "changepoint": "left-to-right change-point model on the trajectory bundle",
    "elpd": "replicated held-out ELPD comparison of two model variants",
    "report": "markdown summary of the run's artifacts",
    "pipeline": "fit, decode, predict, changepoint and report in one go",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spatial-hmm",
        description="Bayesian spatial hidden Markov models for binary site-by-time panels",
    )
    parser.add_argument("--log-level", default=None, help="override SPATIAL_HMM_LOG_LEVEL")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command, description in DESCRIPTIONS.items():
        sub = subparsers.add_parser(command, help=description, description=description)
        sub.add_argument("--config", "-c", default=None, help="flat key=value run configuration file")
        sub.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                         help="override one configuration key (repeatable)")
        if command == "fit":
            sub.add_argument("--dry-run", action="store_true",
                             help="validate config and data and evaluate the log density once")
    return parser


def run_command(args: argparse.Namespace) -> int:
    """
    Execute one parsed subcommand.

    Returns:
        Process exit code: 0 on success, the error family's code otherwise
    """
    try:
        cfg = load_run_config(args.config, parse_overrides(args.overrides))
        storage = storage_service.for_output(cfg.output_dir)
        log_step(args.command, {"config": args.config, "output_dir": cfg.output_dir})
        HANDLERS[args.command](cfg, storage, args)
        logger.success(f"{args.command} completed")
        return 0
    except EngineError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"ERROR {e.code}: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception(f"Unexpected failure in {args.command}: {e}")
        print(f"ERROR INTERNAL: {e}", file=sys.stderr)
        return 1


def main(argv: Optional[List[str]] = None) -> int:
    from main import setup_logging

    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    return run_command(args)
