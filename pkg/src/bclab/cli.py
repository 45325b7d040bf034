#--------------------------------------------------------------------------------------------------#
#  bclab: a desk-scale laboratory for backdoor injection by adversarial weight perturbation        #
#  Licensed under the BSD 2-clause license.                                                        #
#--------------------------------------------------------------------------------------------------#
#
"""
Command line front end.

Exit codes: 0 on success, 2 on configuration, data or record errors.
"""
import argparse
import logging
import os
import sys
from typing import List, Optional

import torch

from bclab import __version__
from bclab import runner
from bclab.common import BclabError
from bclab.config import ExperimentConfig

logger = logging.getLogger("bclab")

_LOG_FORMAT = "[%(levelname)s] %(name)s: %(message)s"

LOG_FILE = "run.log"


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bclab", description="Backdoor injection by adversarial weight perturbation")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="log debug messages")
    verbosity.add_argument("-q", "--quiet", action="store_true",
                           help="log warnings and errors only, no progress bars")
    verbs = parser.add_subparsers(dest="verb", required=True)

    cmd = verbs.add_parser("run", help="train, tune, evaluate and persist one run")
    cmd.add_argument("config", help="experiment configuration file")

    cmd = verbs.add_parser("sweep", help="one run per grid value")
    cmd.add_argument("config", help="experiment configuration file")
    cmd.add_argument("--grid", default="lambda",
                     help="'key=v1,v2,...' or a bare key for the default grid "
                          "(lambda or available, default: lambda)")

    cmd = verbs.add_parser("compare", help="compare the selected epochs of two runs")
    cmd.add_argument("run_a", help="baseline run directory")
    cmd.add_argument("run_b", help="run directory")

    cmd = verbs.add_parser("scan-basin", help="clean loss and ASR on the plane of three models")
    cmd.add_argument("config", help="experiment configuration file")

    cmd = verbs.add_parser("defend", help="detection and mitigation probes")
    cmd.add_argument("config", help="experiment configuration file")
    cmd.add_argument("--probe", required=True, choices=runner.PROBES)

    cmd = verbs.add_parser("theory", help="converged versus predicted AWP of a logistic model")
    cmd.add_argument("config", help="experiment configuration file")
    return parser


def _setup_logging(args: argparse.Namespace):
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format=_LOG_FORMAT)


def _log_to(directory: str) -> logging.Handler:
    os.makedirs(directory, exist_ok=True)
    handler = logging.FileHandler(os.path.join(directory, LOG_FILE), mode="w")
    handler.setFormatter(logging.Formatter(_LOG_FORMAT))
    logging.getLogger().addHandler(handler)
    return handler


def _dispatch(args: argparse.Namespace, progress: bool):
    if args.verb == "compare":
        runner.compare(args.run_a, args.run_b).write_csv(sys.stdout)
        return

    cfg = ExperimentConfig.load(args.config)
    handler = _log_to(cfg.run_directory())
    try:
        logger.info("Configuration '%s' (hash %s)", args.config, cfg.config_hash())
        if args.verb == "run":
            record = runner.run(cfg, progress=progress)
            print(f"{cfg.run_directory()}: best epoch {record.best_epoch}, "
                  f"asr {record.selected.asr:.4f}, top1 {record.selected.top1:.4f}")
        elif args.verb == "sweep":
            key, values = runner.parse_grid(args.grid)
            for value, record in runner.sweep(cfg, key, values, progress=progress):
                print(f"{key}={value}: asr {record.selected.asr:.4f}, "
                      f"top1 {record.selected.top1:.4f}")
        elif args.verb == "scan-basin":
            for pnt in runner.scan_basin(cfg, progress=progress).points:
                print(f"{pnt.name}: ({pnt.a:.4g}, {pnt.b:.4g}) in basin: {pnt.in_basin}")
        elif args.verb == "defend":
            for name, qty, value in runner.defend(cfg, args.probe, progress=progress):
                print(f"{name}: {qty} {value:.4f}")
        else:
            for row in runner.theory(cfg, progress=progress):
                print(f"eta {row.eta:.4g}: |delta| {row.delta_norm:.4g}, "
                      f"predicted {row.predicted_norm:.4g}, cosine {row.cosine:.4f}")
    finally:
        logging.getLogger().removeHandler(handler)
        handler.close()


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point of the bclab command.

    Args:
        argv: Command line arguments (sys.argv[1:] if None).

    Returns:
        Exit code.
    """
    args = _parser().parse_args(argv)
    _setup_logging(args)
    torch.use_deterministic_algorithms(True)
    progress = not args.quiet and sys.stderr.isatty()
    try:
        _dispatch(args, progress)
    except BclabError as exc:
        print(f"bclab: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
