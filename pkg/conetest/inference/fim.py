"""
Fisher information estimates for the chi-bar-square covariance

Three sources: the observed information of a fitted model ("extracted"),
the covariance of parametric-bootstrap estimates ("bootstrap", an estimate of
the inverse information) and a matrix supplied by the user ("user").
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from conetest.errors import (
    BootstrapError,
    ConetestError,
    EvaluationError,
    FimInputError,
    MetricError,
    ValidationError,
)
from conetest.models.mixed_model import FitOptions, fit_ml, hessian_fim, simulate
from conetest.utils.linalg import repair_pd, symmetrize
from conetest.utils.parallel import ordered_map
from conetest.utils.rng import BOOTSTRAP_TAG, derived_stream

logger = logging.getLogger(__name__)

EXTRACTED = "extracted"
BOOTSTRAP = "bootstrap"
USER = "user"

MIN_BOOTSTRAP = 50
MAX_FAILURE_RATE = 0.10
ASYMMETRY_TOLERANCE = 1e-6
INDEFINITE_TOLERANCE = 1e-6


@dataclass(frozen=True)
class FimEstimate:
    matrix: np.ndarray
    kind: str
    is_inverse: bool = False
    theta_order: tuple = ()
    B: int = None

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise FimInputError(f"FIM must be square, got shape {matrix.shape}")
        scale = max(np.max(np.abs(matrix)), 1e-300)
        if np.max(np.abs(matrix - matrix.T)) > 1e-9 * scale:
            raise FimInputError("FIM is not symmetric")
        object.__setattr__(self, "matrix", symmetrize(matrix))
        object.__setattr__(self, "theta_order", tuple(self.theta_order))

    @property
    def q(self):
        return self.matrix.shape[0]

    def to_V(self):
        """Sampling covariance V = I^-1 (the matrix itself when it already estimates I^-1)"""
        if self.is_inverse:
            return self.matrix.copy()
        try:
            factor = cho_factor(self.matrix)
        except np.linalg.LinAlgError:
            raise MetricError("FIM is not positive definite") from None
        return symmetrize(cho_solve(factor, np.eye(self.q)))


def _repaired(matrix, what):
    try:
        repaired, raised = repair_pd(matrix)
    except ValueError:
        raise EvaluationError(f"{what} has no positive eigenvalue") from None
    if raised:
        logger.warning(f"{what}: raised {raised} eigenvalue(s) to the positive-definite floor")
    return repaired


def validate_fim_matrix(matrix, q, source):
    """
    Check a supplied information matrix and repair it to positive definite

    Raises:
        FimInputError: Wrong dimension, asymmetric beyond 1e-6 relative, or
        with a negative eigenvalue beyond 1e-6 relative to the largest
    """
    matrix = np.asarray(matrix, dtype=float)
    if matrix.shape != (q, q):
        raise FimInputError(f"{source}: expected a {q}x{q} matrix, got {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise FimInputError(f"{source}: matrix has non-finite entries")
    scale = max(np.max(np.abs(matrix)), 1e-300)
    asymmetry = np.max(np.abs(matrix - matrix.T)) / scale
    if asymmetry > ASYMMETRY_TOLERANCE:
        raise FimInputError(f"{source}: matrix is not symmetric (relative asymmetry {asymmetry:.3g})")
    matrix = symmetrize(matrix)
    eigvals = np.linalg.eigvalsh(matrix)
    if eigvals[-1] <= 0:
        raise FimInputError(f"{source}: matrix has no positive eigenvalue")
    if eigvals[0] < -INDEFINITE_TOLERANCE * eigvals[-1]:
        raise FimInputError(
            f"{source}: matrix is indefinite (smallest eigenvalue {eigvals[0]:.3g})"
        )
    repaired, raised = repair_pd(matrix)
    if raised:
        logger.warning(f"{source}: raised {raised} eigenvalue(s) to the positive-definite floor")
    return repaired


def load_fim(path, q, is_inverse=False):
    """Read a q x q whitespace-separated matrix from a text file"""
    try:
        matrix = np.loadtxt(path, ndmin=2)
    except OSError:
        raise FimInputError(f"FIM file not found: {path}") from None
    except ValueError as e:
        raise FimInputError(f"FIM file {path} is not a numeric matrix: {e}") from None
    matrix = validate_fim_matrix(matrix, q, f"FIM file {path}")
    logger.info(f"Loaded {q}x{q} {'inverse ' if is_inverse else ''}FIM from {path}")
    return FimEstimate(matrix, USER, is_inverse=is_inverse)


def extract_fim(fit, ds):
    """Observed information of the fitted model, repaired to positive definite"""
    matrix = _repaired(hessian_fim(fit, ds), "Observed information")
    return FimEstimate(matrix, EXTRACTED, is_inverse=False, theta_order=fit.spec.parameter_labels())


def bootstrap_fim(fit, ds, B, seed, workers=1):
    """
    Parametric-bootstrap estimate of the inverse information

    B datasets are simulated from theta_hat on the original covariates and
    refitted from theta_hat; the result is the empirical covariance (divisor B)
    of the refitted parameter vectors, with is_inverse = True.

    Raises:
        BootstrapError: More than 10% of the refits fail
    """
    if B < MIN_BOOTSTRAP:
        raise ValidationError(f"Bootstrap size B must be at least {MIN_BOOTSTRAP}, got {B}")
    if not fit.converged:
        raise ValidationError("Bootstrap needs a converged fit")

    opts = FitOptions(restarts=0, seed=seed)

    def replicate(b):
        sim = simulate(fit.spec, fit.theta_hat, ds, seed=derived_stream(seed, BOOTSTRAP_TAG, b))
        try:
            refit = fit_ml(fit.spec, sim, init=fit.theta_hat, opts=opts)
        except ConetestError as e:
            logger.debug(f"Bootstrap replicate {b} failed: {e}")
            return None
        return refit.theta_hat.flatten() if refit.converged else None

    logger.info(f"Running {B} bootstrap refits on {workers} worker(s)")
    results = ordered_map(replicate, range(B), workers=workers)
    estimates = [theta for theta in results if theta is not None]
    failures = B - len(estimates)
    if failures > MAX_FAILURE_RATE * B:
        raise BootstrapError(f"{failures} of {B} bootstrap refits failed", failures=failures)
    if failures:
        logger.warning(f"Dropped {failures} of {B} bootstrap refits that did not converge")

    covariance = np.cov(np.array(estimates), rowvar=False, bias=True)
    matrix = _repaired(np.atleast_2d(covariance), "Bootstrap covariance")
    return FimEstimate(
        matrix,
        BOOTSTRAP,
        is_inverse=True,
        theta_order=fit.spec.parameter_labels(),
        B=len(estimates),
    )
