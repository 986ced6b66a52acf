"""
Purpose: Main entry point for the command line
Features:
- Runs the conetest command group (test, test-summary, weights, coverage)
- Logging level comes from --log-level or CONETEST_LOG_LEVEL

python run.py test --config configs/orthodont_case1.env
"""

from conetest.cli.commands import cli

if __name__ == "__main__":
    cli()
