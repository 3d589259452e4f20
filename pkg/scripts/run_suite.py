"""
Run every shipped experiment config twice and compare the report bytes.
Usage: python scripts/run_suite.py [--configs configs] [--out results/suite] [--skip-3d]
"""
import argparse
import filecmp
import json
import logging
import sys
import os
from pathlib import Path

sys.path.insert(0, os.path.dirname(os.path.dirname(__file__)))

from capkit.models.schemas import ExperimentConfig
from capkit.services.experiment_service import run

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

COMPARED_FILES = ("report.json", "summary.csv")


def run_suite(config_dir: Path, out_dir: Path, skip_3d: bool = False) -> int:
    """Returns the number of configs whose two runs differ or fail."""
    failures = 0
    for path in sorted(config_dir.glob("*.json")):
        config = ExperimentConfig.model_validate(json.loads(path.read_text(encoding="utf-8")))
        if skip_3d and config.domain.dimension == 3:
            logger.info(f"Skipping {path.name} (n=3)")
            continue
        first, second = out_dir / "first" / path.stem, out_dir / "second" / path.stem
        try:
            outcomes = [run(config, out_dir=target) for target in (first, second)]
        except Exception as e:
            logger.error(f"✗ {path.name} failed: {e}")
            failures += 1
            continue

        identical = all(filecmp.cmp(first / name, second / name, shallow=False) for name in COMPARED_FILES)
        status = "✓" if identical else "✗"
        logger.info(f"{status} {path.name}: exit code {outcomes[0].exit_code}, identical outputs: {identical}")
        if not identical:
            failures += 1
    return failures


def main() -> int:
    parser = argparse.ArgumentParser(description="Run all experiment configs twice and check determinism")
    parser.add_argument("--configs", type=Path, default=Path("configs"))
    parser.add_argument("--out", type=Path, default=Path("results") / "suite")
    parser.add_argument("--skip-3d", action="store_true", help="skip n=3 configs")
    args = parser.parse_args()

    failures = run_suite(args.configs, args.out, args.skip_3d)
    if failures:
        logger.error(f"{failures} config(s) failed or produced different outputs")
        return 1
    logger.info("All configs reproduced byte-identical outputs")
    return 0


if __name__ == "__main__":
    sys.exit(main())
