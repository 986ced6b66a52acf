"""
Chi-bar-square distributions: sampling, mixture weights and p-values

A chi-bar-square variable is the squared V^-1 length of a Normal(0, V) vector
minus its squared V^-1 distance to a closed convex cone. It is a mixture of
chi-square distributions with degrees of freedom d1..df_max (df 0 being the
point mass at zero).
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import gammainc, gammaincc

from conetest.errors import EstimationError, MetricError, ProjectionError, ValidationError
from conetest.inference.cone import HALFLINE, Projector
from conetest.utils.parallel import chunked, ordered_map
from conetest.utils.rng import draw_stream

logger = logging.getLogger(__name__)

CLAMP_TOLERANCE = 1e-9
CONDITION_LIMIT = 1e12
WEIGHT_RANGE = (-0.02, 1.02)
DRAWS_PER_TASK = 250


def chi2_cdf(df, x):
    """P(X <= x) for X ~ chi-square(df); df = 0 is the point mass at zero"""
    if df < 0:
        raise ValueError(f"degrees of freedom must be non-negative, got {df}")
    if not np.isfinite(x):
        raise ValueError(f"x must be finite, got {x}")
    if df == 0:
        return 1.0 if x >= 0 else 0.0
    if x <= 0:
        return 0.0
    return float(gammainc(df / 2.0, x / 2.0))


def chi2_sf(df, x):
    """1 - chi2_cdf(df, x), from the upper incomplete gamma to keep tail accuracy"""
    if df < 0:
        raise ValueError(f"degrees of freedom must be non-negative, got {df}")
    if df == 0:
        return 0.0 if x >= 0 else 1.0
    if x <= 0:
        return 1.0
    return float(gammaincc(df / 2.0, x / 2.0))


@dataclass(frozen=True)
class ChiBarSample:
    draws: np.ndarray
    seed: int
    M: int

    def __post_init__(self):
        draws = np.asarray(self.draws, dtype=float)
        if len(draws) != self.M:
            raise ValidationError(f"Sample holds {len(draws)} draws, expected {self.M}")
        if np.any(draws < 0):
            raise ValidationError("Chi-bar-square draws must be non-negative")
        object.__setattr__(self, "draws", draws)


@dataclass(frozen=True)
class WeightEstimate:
    dfs: tuple
    weights: np.ndarray
    sd: np.ndarray
    exact: bool
    warnings: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "dfs", tuple(int(d) for d in self.dfs))
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))
        object.__setattr__(self, "sd", np.asarray(self.sd, dtype=float))
        if not len(self.dfs) == len(self.weights) == len(self.sd):
            raise ValidationError("dfs, weights and sd must have the same length")


def _sampling_metric(V):
    V = np.asarray(V, dtype=float)
    V = (V + V.T) / 2.0
    try:
        chol = np.linalg.cholesky(V)
        factor = cho_factor(V)
    except np.linalg.LinAlgError:
        raise MetricError("covariance V is not positive definite") from None
    W = cho_solve(factor, np.eye(len(V)))
    return chol, (W + W.T) / 2.0


def draw_sample(cone, V, M, seed, workers=1):
    """
    M chi-bar-square draws X_i = Z_i^T W Z_i - min over the cone of (Z_i - t)^T W (Z_i - t)

    Z_i ~ Normal(0, V) and W = V^-1. Draw i comes from its own counter-based
    stream keyed by (seed, i), so the sample does not depend on `workers`.
    """
    if M < 1:
        raise ValidationError(f"M must be at least 1, got {M}")
    if np.shape(V) != (cone.q, cone.q):
        raise MetricError(f"V must be {cone.q}x{cone.q}, got {np.shape(V)}")
    chol, W = _sampling_metric(V)
    projector = Projector(cone, W)

    def draw(index):
        z = chol @ draw_stream(seed, index).standard_normal(cone.q)
        norm = float(z @ W @ z)
        value = norm - projector.project(z).objective
        if value < 0:
            if value < -CLAMP_TOLERANCE * max(1.0, norm):
                raise ProjectionError(
                    f"draw {index}: projection is farther than the origin ({value:.3g})"
                )
            value = 0.0
        return value

    def run(span):
        return [draw(i) for i in range(*span)]

    logger.info(f"Drawing {M} chi-bar-square values on {workers} worker(s)")
    chunks = ordered_map(run, chunked(M, DRAWS_PER_TASK), workers=workers)
    draws = np.array([value for chunk in chunks for value in chunk])
    logger.debug(f"Sample mean {draws.mean():.6g}, share of zeros {np.mean(draws == 0):.4f}")
    return ChiBarSample(draws=draws, seed=seed, M=M)


def exact_weights(cone, dims):
    """
    Closed-form weights when the cone has no PSD factor and at most one half-line

    Returns:
        WeightEstimate or None: weight 1 at d1 for a linear cone, (1/2, 1/2)
        at (d1, d1 + 1) for a single half-line, None otherwise
    """
    if cone.has_psd:
        return None
    halflines = cone.count(HALFLINE)
    if halflines == 0:
        return WeightEstimate((dims.d1,), [1.0], [0.0], exact=True)
    if halflines == 1:
        return WeightEstimate((dims.d1, dims.d1 + 1), [0.5, 0.5], [0.0, 0.0], exact=True)
    return None


def weight_thresholds(sample, n_weights):
    """n_weights - 2 quantiles of the positive draws, evenly spaced inside [0.15, 0.85]"""
    positive = sample.draws[sample.draws > 0]
    if len(positive) == 0:
        raise EstimationError("every draw is zero; no thresholds can be placed")
    n = n_weights
    levels = [0.15 + 0.7 * (k + 1) / (n - 1) for k in range(n - 2)]
    return np.quantile(positive, levels)


def weight_system(dfs, thresholds):
    """
    Linear system A w = b for the weights

    Row 0 forces the weights to sum to one, row 1 forces the weights of the
    degrees of freedom with the parity of d1 to sum to 1/2, and each later row
    matches the mixture CDF at one threshold.
    """
    n = len(dfs)
    A = np.zeros((n, n))
    A[0] = 1.0
    A[1] = [1.0 if j % 2 == 0 else 0.0 for j in range(n)]
    for m, c in enumerate(thresholds, start=2):
        A[m] = [chi2_cdf(df, c) for df in dfs]
    return A


def solve_weights(dfs, thresholds, cdf_values, cdf_cov=None):
    """
    Weights and their standard deviations from CDF values at the thresholds

    Args:
        dfs (list): Degrees of freedom d1..df_max
        thresholds (array): n - 2 thresholds
        cdf_values (array): Estimated mixture CDF at each threshold
        cdf_cov (array, optional): Covariance of cdf_values

    Raises:
        EstimationError: The system is singular (condition number above 1e12)
    """
    n = len(dfs)
    A = weight_system(dfs, thresholds)
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise EstimationError(
            f"weight system is singular (condition {cond:.3g}); "
            "use a larger M or different thresholds"
        )
    rhs = np.concatenate([[1.0, 0.5], np.asarray(cdf_values, dtype=float)])
    weights = np.linalg.solve(A, rhs)

    cov_b = np.zeros((n, n))
    if cdf_cov is not None:
        cov_b[2:, 2:] = cdf_cov
    A_inv = np.linalg.inv(A)
    cov_w = A_inv @ cov_b @ A_inv.T
    sd = np.sqrt(np.clip(np.diag(cov_w), 0.0, None))
    return weights, sd


def estimate_weights(sample, dims):
    """
    Monte Carlo weights of the mixture

    The empirical CDF of the sample at n - 2 thresholds gives the last rows of
    the system; the covariance of the indicator vector over the draws gives the
    standard deviations.
    """
    n = dims.n_weights
    if n < 2:
        raise ValidationError("Monte Carlo weights need at least two mixture components")
    if sample.M < 100 * n:
        raise ValidationError(f"M = {sample.M} is too small for {n} weights (need {100 * n})")

    dfs = dims.dfs
    thresholds = weight_thresholds(sample, n)
    indicators = (sample.draws[:, None] <= thresholds[None, :]).astype(float)
    cdf_values = indicators.mean(axis=0)
    if n > 2:
        cdf_cov = np.atleast_2d(np.cov(indicators, rowvar=False)) / sample.M
    else:
        cdf_cov = None
    weights, sd = solve_weights(dfs, thresholds, cdf_values, cdf_cov)

    warnings = []
    low, high = WEIGHT_RANGE
    if np.any(weights < low) or np.any(weights > high):
        message = (
            f"estimated weights {np.round(weights, 6).tolist()} fall outside "
            f"[{low}, {high}]; consider a larger M"
        )
        logger.warning(message)
        warnings.append(message)
    logger.info(f"Estimated weights {np.round(weights, 6).tolist()} (sd {np.round(sd, 6).tolist()})")
    return WeightEstimate(dfs, weights, sd, exact=False, warnings=tuple(warnings))


def pvalue_from_weights(w, lrt):
    """Sum over components of w_j P(chi-square(df_j) >= lrt)"""
    if lrt < 0:
        raise ValueError(f"lrt must be non-negative, got {lrt}")
    return float(sum(weight * chi2_sf(df, lrt) for df, weight in zip(w.dfs, w.weights)))


def pvalue_from_sample(sample, lrt):
    """Share of draws at or above lrt"""
    if lrt < 0:
        raise ValueError(f"lrt must be non-negative, got {lrt}")
    pvalue = float(np.mean(sample.draws >= lrt))
    if pvalue == 0.0:
        logger.warning(
            f"No draw reaches LRT = {lrt:.7g}; the sample p-value is below 1/M = {1 / sample.M:.3g}"
        )
    return pvalue


def pvalue_bounds(lrt, dims):
    """
    Bounds on the mixture p-value that need no weights

    lower averages the survival functions at d1 and d1 + 1, upper those at
    df_max - 1 and df_max. A single-component mixture has lower = upper.
    """
    if lrt < 0:
        raise ValueError(f"lrt must be non-negative, got {lrt}")
    if dims.n_weights == 1:
        value = chi2_sf(dims.d1, lrt)
        return value, value
    lower = (chi2_sf(dims.d1, lrt) + chi2_sf(dims.d1 + 1, lrt)) / 2.0
    upper = (chi2_sf(dims.df_max - 1, lrt) + chi2_sf(dims.df_max, lrt)) / 2.0
    return lower, upper
