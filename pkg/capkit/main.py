"""
capcli: run one capacity experiment from a JSON configuration.

    capcli <kind> --config <path> [--out <dir>] [--seed <u64>]

Exit codes: 0 success, 1 failed property checks, 2 invalid configuration,
3 solver non-convergence.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from capkit.config import get_settings
from capkit.exceptions import CapacityError, ConfigurationError
from capkit.models.schemas import ExperimentConfig
from capkit.services.experiment_service import run

logger = logging.getLogger(__name__)

KINDS = ["capacity", "compact_capacity", "point_decay", "mu", "triangle", "classify", "converge", "continuity"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="capcli",
        description="Conformal capacities, Ferrand pseudometric estimates and Class I/II evidence",
    )
    parser.add_argument("kind", choices=KINDS, help="experiment kind (must match the config)")
    parser.add_argument("--config", required=True, type=Path, help="experiment JSON file")
    parser.add_argument("--out", type=Path, default=None, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override the configured seed (u64)")
    return parser


def load_config(kind: str, path: Path, seed: Optional[int] = None) -> ExperimentConfig:
    """
    Read and validate an experiment config.

    Raises:
        ConfigurationError: If the file is unreadable or its kind does not match.
        ValidationError: If pydantic rejects a field.
    """
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"cannot read config {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigurationError(f"config {path} must contain a JSON object")
    data.setdefault("kind", kind)
    if data["kind"] != kind:
        raise ConfigurationError(f"config {path} is a '{data['kind']}' experiment, not '{kind}'")
    if seed is not None:
        data["seed"] = seed
    return ExperimentConfig.model_validate(data)


def main(argv: Optional[List[str]] = None) -> int:
    settings = get_settings()
    logging.basicConfig(
        level=getattr(logging, settings.log_level.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    args = build_parser().parse_args(argv)

    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print(f"error: --seed must be an unsigned 64-bit integer, got {args.seed}", file=sys.stderr)
        return 2

    try:
        config = load_config(args.kind, args.config, args.seed)
    except ValidationError as e:
        print(f"error: invalid experiment config {args.config}", file=sys.stderr)
        for err in e.errors():
            location = ".".join(str(part) for part in err["loc"]) or "<root>"
            print(f"  {location}: {err['msg']}", file=sys.stderr)
        return 2
    except ConfigurationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2

    try:
        outcome = run(config, out_dir=args.out, settings=settings)
    except CapacityError as e:
        logger.error(f"Experiment '{config.name}' rejected: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 2

    if not outcome.converged:
        print("error: solver did not converge", file=sys.stderr)
        for stage in outcome.non_converged_stages():
            print(f"  {json.dumps(stage, sort_keys=True)}", file=sys.stderr)
    for check in outcome.checks:
        print(f"{'PASS' if check.passed else 'FAIL'} {check.name}")
    return outcome.exit_code


if __name__ == '__main__':
    sys.exit(main())
