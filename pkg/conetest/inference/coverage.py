"""
Coverage of Wald confidence intervals built from each FIM estimate

Datasets are simulated from a linear mixed model with a random intercept and
slope, refitted, and each parameter's interval theta_hat +/- 1.96 sqrt(diag V)
is checked against the truth.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from tabulate import tabulate

from conetest.errors import ConetestError, StudyError, ValidationError
from conetest.inference.fim import bootstrap_fim, extract_fim
from conetest.models.dataset import Dataset, IndividualData
from conetest.models.mixed_model import (
    CovarianceLayout,
    FitOptions,
    LmmSpec,
    ParamVector,
    fit_ml,
    simulate,
)
from conetest.utils.parallel import ordered_map
from conetest.utils.rng import COVERAGE_TAG, derived_stream

logger = logging.getLogger(__name__)

Z_975 = 1.959963984540054
MAX_FAILURE_RATE = 0.10
COVERAGE_MODES = ("extract", "bootstrap")


@dataclass(frozen=True)
class CoverageConfig:
    beta: tuple = (5.0, 7.0)
    gamma: tuple = ((0.64, 0.4), (0.4, 1.0))
    sigma: float = 1.2
    n: int = 100
    timepoints: int = 20
    R: int = 1000
    B: int = 100
    modes: tuple = COVERAGE_MODES
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValidationError(f"sigma must be positive for simulation, got {self.sigma}")
        if self.R < 1:
            raise ValidationError(f"R must be at least 1, got {self.R}")
        if self.n < 2 or self.timepoints < 2:
            raise ValidationError("Need at least two individuals and two time points")
        unknown = [mode for mode in self.modes if mode not in COVERAGE_MODES]
        if unknown or not self.modes:
            raise ValidationError(f"Coverage modes must be among {COVERAGE_MODES}, got {self.modes}")

    def spec(self):
        return LmmSpec(("1", "t"), ("1", "t"), CovarianceLayout.full(2))

    def theta(self):
        return ParamVector(np.array(self.beta), (np.array(self.gamma),), self.sigma**2)

    def design(self):
        times = np.linspace(0.0, 1.0, self.timepoints)
        individuals = [
            IndividualData(id=f"s{i + 1:04d}", responses=np.zeros(self.timepoints), covariates=times)
            for i in range(self.n)
        ]
        return Dataset(individuals, ("t",))

    def mode_label(self, mode):
        return f"bootstrap (B={self.B})" if mode == "bootstrap" else "extracted"


@dataclass(frozen=True)
class CoverageResult:
    labels: tuple
    modes: tuple
    coverage: dict  # mode label -> per-parameter coverage fraction
    R: int
    failures: int
    warnings: tuple = field(default=())

    def table(self):
        rows = [
            [label] + [self.coverage[mode][k] for mode in self.modes]
            for k, label in enumerate(self.labels)
        ]
        return tabulate(rows, headers=["Parameter"] + list(self.modes), floatfmt=".3f")

    def to_dict(self):
        return {
            "labels": list(self.labels),
            "modes": list(self.modes),
            "coverage": {mode: [float(x) for x in values] for mode, values in self.coverage.items()},
            "R": self.R,
            "failures": self.failures,
            "warnings": list(self.warnings),
        }


def run_coverage_study(config):
    """
    Empirical coverage of nominal 95% intervals per parameter and FIM mode

    Raises:
        StudyError: More than 10% of the repetitions failed to fit or to
        produce a FIM
    """
    warnings = []
    if config.R < 50:
        message = f"R = {config.R} repetitions give a coarse coverage estimate"
        logger.warning(message)
        warnings.append(message)

    spec, truth, design = config.spec(), config.theta(), config.design()
    true_values = truth.flatten()
    opts = FitOptions(restarts=1, seed=config.seed)

    def repetition(r):
        sim = simulate(spec, truth, design, seed=derived_stream(config.seed, COVERAGE_TAG, r))
        try:
            fit = fit_ml(spec, sim, opts=opts)
            if not fit.converged:
                return None
            estimate = fit.theta_hat.flatten()
            covered = {}
            for mode in config.modes:
                if mode == "extract":
                    V = extract_fim(fit, sim).to_V()
                else:
                    boot_seed = int(derived_stream(config.seed, COVERAGE_TAG, r, 1).integers(2**62))
                    V = bootstrap_fim(fit, sim, config.B, boot_seed).to_V()
                half_width = Z_975 * np.sqrt(np.clip(np.diag(V), 0.0, None))
                covered[mode] = np.abs(estimate - true_values) <= half_width
            return covered
        except ConetestError as e:
            logger.debug(f"Coverage repetition {r} failed: {e}")
            return None

    logger.info(f"Coverage study: {config.R} repetitions, modes {', '.join(config.modes)}")
    outcomes = ordered_map(repetition, range(config.R), workers=config.workers)
    kept = [outcome for outcome in outcomes if outcome is not None]
    failures = config.R - len(kept)
    if failures > MAX_FAILURE_RATE * config.R:
        raise StudyError(f"{failures} of {config.R} repetitions failed")
    if failures:
        message = f"{failures} of {config.R} repetitions failed and were dropped"
        logger.warning(message)
        warnings.append(message)

    coverage = {
        config.mode_label(mode): np.mean([outcome[mode] for outcome in kept], axis=0)
        for mode in config.modes
    }
    return CoverageResult(
        labels=tuple(spec.parameter_labels()),
        modes=tuple(config.mode_label(mode) for mode in config.modes),
        coverage=coverage,
        R=config.R,
        failures=failures,
        warnings=tuple(warnings),
    )
