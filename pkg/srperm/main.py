"""
Command-line driver for the spatial random permutation toolkit
Maps subcommands onto the experiment runner and errors onto exit codes
"""

import argparse
import json
import logging
import sys
from typing import Any, Dict, List, Optional

from . import __version__
from .exceptions import ConfigurationError, SimulationError
from .models.config import RunConfig
from .models.settings import get_settings
from .services.experiments import ExperimentRunner

logger = logging.getLogger(__name__)

COMMANDS = {
    "rho-c": "critical density and its finite-volume approximations",
    "hn": "table of h_n with the brute-force oracle check",
    "sample-fourier": "occupation numbers and cycle spectra from a Fourier-side sampler",
    "sample-spatial": "cycle spectra from the real-space Metropolis chain",
    "verify-pd": "Poisson-Dirichlet fit of the normalized long cycles",
    "giant-cycle": "largest normalized cycle under logarithmic weights",
    "scan-density": "fraction of points in long cycles over a density grid",
    "selftest": "oracle and invariant suite",
}


def parse_assignment(text: str) -> Dict[str, Any]:
    """key=value with the value read as JSON when it parses, else as a string"""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigurationError(f"--set: expected key=value, got '{text}'")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return {key.strip(): value}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with flat run parameters")
    common.add_argument("--set", dest="assignments", action="append", default=[], metavar="KEY=VALUE",
                        help="Override one configuration key (repeatable)")
    common.add_argument("--seed", type=int, help="Master seed")
    common.add_argument("--workers", type=int, help="Worker processes for replicas")
    common.add_argument("--out", help="Record file; the manifest goes to <out>.manifest.json")
    common.add_argument("--print-config", action="store_true", help="Print the effective configuration and exit")

    parser = argparse.ArgumentParser(prog="srperm", description="Spatial random permutations with cycle weights")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, text in COMMANDS.items():
        subparsers.add_parser(name, parents=[common], help=text, description=text)
    return parser


def effective_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then --set, then the named flags"""
    overrides: Dict[str, Any] = {}
    for assignment in args.assignments:
        overrides.update(parse_assignment(assignment))
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    return RunConfig.load(args.config, overrides)


def main(argv: Optional[List[str]] = None) -> int:
    settings = get_settings().reload()
    logging.basicConfig(
        level=getattr(logging, settings.log_level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    args = build_parser().parse_args(argv)
    try:
        config = effective_config(args)
        if args.print_config:
            print(config.model_dump_json(indent=2))
            return 0
        ExperimentRunner(config, out=args.out).execute(args.command)
    except SimulationError as e:
        logger.error("%s failed: %s", args.command, e)
        return e.exit_code
    except OSError as e:
        logger.error("%s failed: %s", args.command, e)
        return ConfigurationError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
