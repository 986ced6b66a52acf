#!/usr/bin/env python3
"""
Coverage study of Wald intervals built from extracted and bootstrap FIMs.
Simulates a linear mixed model with correlated random intercept and slope,
refits each dataset and prints the empirical coverage per parameter.

python scripts/run_coverage_study.py --R 200 --B 100 --workers 4
"""

import os
import sys
import argparse
import json
import logging

# Add the parent directory to sys.path to allow imports from conetest
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from config import Config
from conetest.errors import ConetestError
from conetest.inference.coverage import COVERAGE_MODES, CoverageConfig, run_coverage_study

# Configure logging
logging.basicConfig(level=Config.LOG_LEVEL, format=Config.LOG_FORMAT)
logger = logging.getLogger(__name__)


def setup_argparse():
    """Set up command line argument parsing"""
    parser = argparse.ArgumentParser(description="Empirical coverage of 95% Wald intervals")
    parser.add_argument("--R", type=int, default=200, help="Number of simulated datasets")
    parser.add_argument("--n", type=int, default=100, help="Individuals per dataset")
    parser.add_argument("--timepoints", type=int, default=20, help="Observations per individual")
    parser.add_argument("--B", type=int, default=100, help="Bootstrap sample size")
    parser.add_argument("--sigma", type=float, default=1.2, help="Residual standard deviation")
    parser.add_argument(
        "--modes",
        nargs="+",
        choices=COVERAGE_MODES,
        default=list(COVERAGE_MODES),
        help="FIM estimates to compare",
    )
    parser.add_argument("--seed", type=int, default=Config.SEED, help="Random seed")
    parser.add_argument("--workers", type=int, default=Config.WORKERS, help="Worker threads")
    parser.add_argument("--output", type=str, help="Also write the result as JSON to this file")
    return parser.parse_args()


def main():
    args = setup_argparse()
    try:
        config = CoverageConfig(
            sigma=args.sigma,
            n=args.n,
            timepoints=args.timepoints,
            R=args.R,
            B=args.B,
            modes=tuple(args.modes),
            seed=args.seed,
            workers=args.workers,
        )
        result = run_coverage_study(config)
    except ConetestError as e:
        logger.error(f"Coverage study failed: {e}")
        return 1

    print("EMPIRICAL COVERAGE OF 95% INTERVALS:")
    print("====================================")
    print(result.table())
    print(f"\nRepetitions: {result.R} ({result.failures} failed)")

    if args.output:
        with open(args.output, "w", encoding="utf-8") as f:
            json.dump(result.to_dict(), f, sort_keys=True, indent=2)
        logger.info(f"Wrote coverage table to {args.output}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
