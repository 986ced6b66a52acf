"""
Linear mixed-effects models with block-diagonal random-effect covariance

y_i ~ Normal(X_i beta, Z_i Gamma Z_i^T + sigma2 I), individuals independent.

The likelihood is evaluated from per-individual sufficient statistics
(X^T X, Z^T Z, Z^T X, X^T y, Z^T y, y^T y) with the Woodbury identity
V^-1 = (I - Z K Z^T) / sigma2, K = Gamma (sigma2 I + Z^T Z Gamma)^-1,
so each evaluation costs O(n p^3) however long the individual series are.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from conetest.errors import EvaluationError, ValidationError
from conetest.models.dataset import INTERCEPT, design_columns, design_matrices
from conetest.utils.linalg import (
    numerical_hessian,
    psd_factor,
    symmetrize,
    vech,
    vech_pairs,
)
from conetest.utils.rng import RESTART_TAG, as_generator, derived_stream

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
PSD_TOLERANCE = 1e-10
SNAP_TOLERANCE = 1e-8
CONDITION_LIMIT = 1e12
# BFGS may stop on precision loss just short of gtol; within this multiple the fit counts as converged
ACCEPTED_GRADIENT_FACTOR = 100.0


@dataclass(frozen=True)
class CovarianceLayout:
    """Sizes of the full blocks of Gamma, in random-term order"""

    blocks: tuple = ()

    def __post_init__(self):
        blocks = tuple(int(r) for r in self.blocks)
        if any(r < 1 for r in blocks):
            raise ValidationError(f"Block sizes must be positive: {blocks}")
        object.__setattr__(self, "blocks", blocks)

    @classmethod
    def full(cls, p):
        return cls((p,) if p > 0 else ())

    @classmethod
    def diagonal(cls, p):
        return cls((1,) * p)

    @property
    def p(self):
        return sum(self.blocks)

    @property
    def n_params(self):
        return sum(r * (r + 1) // 2 for r in self.blocks)

    def term_offsets(self):
        """Index of the first random term of each block"""
        offsets, start = [], 0
        for r in self.blocks:
            offsets.append(start)
            start += r
        return offsets

    def param_offsets(self):
        """Index of each block's first half-vectorized entry within the Gamma part"""
        offsets, start = [], 0
        for r in self.blocks:
            offsets.append(start)
            start += r * (r + 1) // 2
        return offsets


@dataclass(frozen=True)
class LmmSpec:
    fixed_terms: tuple
    random_terms: tuple
    layout: CovarianceLayout
    group: str = None

    def __post_init__(self):
        fixed = list(self.fixed_terms)
        if INTERCEPT in fixed:
            fixed.remove(INTERCEPT)
            fixed.insert(0, INTERCEPT)
        object.__setattr__(self, "fixed_terms", tuple(fixed))
        object.__setattr__(self, "random_terms", tuple(self.random_terms))
        if len(self.random_terms) != self.layout.p:
            raise ValidationError(
                f"{len(self.random_terms)} random terms but the covariance layout "
                f"has {self.layout.p} random effects"
            )

    @property
    def b(self):
        return len(self.fixed_terms)

    @property
    def p(self):
        return self.layout.p

    @property
    def n_params(self):
        return self.b + self.layout.n_params + 1

    def resolve(self, ds):
        """
        Expand fixed terms to one term per design column

        Categorical terms with several levels become one term per indicator,
        so beta has exactly one entry per fixed term afterwards.
        """
        fixed = design_columns(ds, self.fixed_terms)
        random = design_columns(ds, self.random_terms, intercept_first=False)
        if len(random) != len(self.random_terms):
            raise ValidationError(
                "Random terms must map to one design column each; "
                f"got {random} for {list(self.random_terms)}"
            )
        if tuple(fixed) == self.fixed_terms:
            return self
        return replace(self, fixed_terms=tuple(fixed))

    def block_terms(self):
        """Random terms grouped by covariance block"""
        terms, start = [], 0
        for r in self.layout.blocks:
            terms.append(self.random_terms[start : start + r])
            start += r
        return terms

    def parameter_labels(self):
        """Labels of the canonical flattening (beta, vech of each block, sigma2)"""
        labels = [f"beta[{term}]" for term in self.fixed_terms]
        for terms in self.block_terms():
            for i, j in vech_pairs(len(terms)):
                if i == j:
                    labels.append(f"var[{terms[i]}]")
                else:
                    labels.append(f"cov[{terms[j]},{terms[i]}]")
        labels.append("sigma2")
        return labels


@dataclass(frozen=True)
class ParamVector:
    beta: np.ndarray
    gamma_blocks: tuple
    sigma2: float

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        blocks = tuple(np.atleast_2d(np.asarray(g, dtype=float)) for g in self.gamma_blocks)
        sigma2 = float(self.sigma2)
        if not np.all(np.isfinite(beta)):
            raise ValidationError("beta has non-finite entries")
        if not np.isfinite(sigma2) or sigma2 < 0:
            raise ValidationError(f"sigma2 must be non-negative, got {sigma2}")
        for k, g in enumerate(blocks):
            if g.shape[0] != g.shape[1] or not np.all(np.isfinite(g)):
                raise ValidationError(f"Gamma block {k} is not a finite square matrix")
            scale = max(np.max(np.abs(g)), 1e-300)
            if np.max(np.abs(g - g.T)) > 1e-10 * scale:
                raise ValidationError(f"Gamma block {k} is not symmetric")
            eigvals = np.linalg.eigvalsh(symmetrize(g))
            if eigvals[0] < -PSD_TOLERANCE * max(abs(eigvals[-1]), 1e-300):
                raise ValidationError(f"Gamma block {k} is not positive semidefinite")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "gamma_blocks", tuple(symmetrize(g) for g in blocks))
        object.__setattr__(self, "sigma2", sigma2)

    @property
    def layout(self):
        return CovarianceLayout(tuple(g.shape[0] for g in self.gamma_blocks))

    def gamma(self):
        """Full block-diagonal Gamma"""
        p = sum(g.shape[0] for g in self.gamma_blocks)
        full = np.zeros((p, p))
        start = 0
        for g in self.gamma_blocks:
            r = g.shape[0]
            full[start : start + r, start : start + r] = g
            start += r
        return full

    def flatten(self):
        parts = [self.beta] + [vech(g) for g in self.gamma_blocks] + [[self.sigma2]]
        return np.concatenate([np.asarray(part, dtype=float) for part in parts])

    @classmethod
    def from_flat(cls, values, layout, b):
        beta, gamma, sigma2 = unflatten(values, layout, b)
        return cls(beta, _split_blocks(gamma, layout), sigma2)

    def check_against(self, spec):
        if len(self.beta) != spec.b or self.layout != spec.layout:
            raise ValidationError(
                f"Parameter vector (b={len(self.beta)}, blocks={self.layout.blocks}) "
                f"does not match model (b={spec.b}, blocks={spec.layout.blocks})"
            )


@dataclass(frozen=True)
class FitResult:
    spec: LmmSpec
    theta_hat: ParamVector
    loglik: float
    converged: bool
    n_individuals: int
    iterations: int
    gradient_norm: float = float("nan")
    history: tuple = ()
    message: str = ""

    def __post_init__(self):
        if self.converged and not np.isfinite(self.loglik):
            raise ValidationError("A converged fit must have a finite log-likelihood")


@dataclass(frozen=True)
class FitOptions:
    max_iter: int = 500
    tol: float = 1e-8
    restarts: int = 3
    seed: int = 0


def unflatten(values, layout, b):
    """Split a canonical flat vector into (beta, full Gamma, sigma2) without validation"""
    values = np.asarray(values, dtype=float)
    expected = b + layout.n_params + 1
    if len(values) != expected:
        raise ValidationError(f"Expected {expected} parameters, got {len(values)}")
    beta = values[:b]
    gamma = np.zeros((layout.p, layout.p))
    pos, start = b, 0
    for r in layout.blocks:
        for i, j in vech_pairs(r):
            gamma[start + i, start + j] = values[pos]
            gamma[start + j, start + i] = values[pos]
            pos += 1
        start += r
    return beta, gamma, float(values[-1])


def _split_blocks(gamma, layout):
    blocks, start = [], 0
    for r in layout.blocks:
        blocks.append(gamma[start : start + r, start : start + r].copy())
        start += r
    return tuple(blocks)


@dataclass(frozen=True)
class SufficientStats:
    """Per-individual cross-products, stacked along the first axis"""

    ids: tuple
    n_obs: np.ndarray
    xtx: np.ndarray
    xty: np.ndarray
    ztz: np.ndarray
    ztz_sqrt: np.ndarray
    ztx: np.ndarray
    zty: np.ndarray
    yty: np.ndarray
    ols_beta: np.ndarray = field(default=None)
    ols_residual_var: float = float("nan")


def compute_sufficient_statistics(spec, ds):
    pairs = design_matrices(ds, spec.fixed_terms, spec.random_terms)
    b, p = spec.b, spec.p
    for ind, pair in zip(ds.individuals, pairs):
        if pair.X.shape[1] != b or pair.Z.shape[1] != p:
            raise ValidationError(
                f"Design of individual {ind.id} has {pair.X.shape[1]} fixed and "
                f"{pair.Z.shape[1]} random columns, model expects {b} and {p}"
            )
    ys = [ind.responses for ind in ds.individuals]
    n = len(pairs)
    xtx = np.array([pr.X.T @ pr.X for pr in pairs]).reshape(n, b, b)
    xty = np.array([pr.X.T @ y for pr, y in zip(pairs, ys)]).reshape(n, b)
    ztz = np.array([pr.Z.T @ pr.Z for pr in pairs]).reshape(n, p, p)
    ztx = np.array([pr.Z.T @ pr.X for pr in pairs]).reshape(n, p, b)
    zty = np.array([pr.Z.T @ y for pr, y in zip(pairs, ys)]).reshape(n, p)
    yty = np.array([y @ y for y in ys])

    if p:
        eigvals, eigvecs = np.linalg.eigh(ztz)
        root = np.sqrt(np.clip(eigvals, 0.0, None))
        ztz_sqrt = np.einsum("nij,nj,nkj->nik", eigvecs, root, eigvecs)
    else:
        ztz_sqrt = np.zeros((len(ys), 0, 0))

    x_all = np.vstack([pr.X for pr in pairs])
    y_all = np.concatenate(ys)
    if b:
        ols_beta = np.linalg.lstsq(x_all, y_all, rcond=None)[0]
        resid = y_all - x_all @ ols_beta
    else:
        ols_beta = np.zeros(0)
        resid = y_all
    return SufficientStats(
        ids=tuple(ind.id for ind in ds.individuals),
        n_obs=np.array([ind.n_obs for ind in ds.individuals], dtype=float),
        xtx=xtx,
        xty=xty,
        ztz=ztz,
        ztz_sqrt=ztz_sqrt,
        ztx=ztx,
        zty=zty,
        yty=yty,
        ols_beta=ols_beta,
        ols_residual_var=float(np.var(resid)),
    )


@dataclass
class _Evaluation:
    loglik: float
    d_beta: np.ndarray = None
    d_gamma: np.ndarray = None  # derivative w.r.t. the full symmetric matrix entries
    d_sigma2: float = None


def _evaluate(stats, beta, gamma, sigma2, gradient=False, check=False):
    """Log-likelihood (and gradient) at raw parameter arrays"""
    if not sigma2 > 0:
        raise EvaluationError(f"sigma2 must be positive, got {sigma2}")

    n_obs = stats.n_obs
    xr = stats.xty - np.einsum("nij,j->ni", stats.xtx, beta)
    w = stats.zty - np.einsum("nij,j->ni", stats.ztx, beta)
    s = stats.yty - 2.0 * stats.xty @ beta + np.einsum("i,nij,j->n", beta, stats.xtx, beta)
    p = gamma.shape[0]

    if p == 0:
        quad = s / sigma2
        logdet = n_obs * np.log(sigma2)
        loglik = -0.5 * float(np.sum(n_obs * LOG_2PI + logdet + quad))
        if not gradient:
            return _Evaluation(loglik)
        return _Evaluation(
            loglik,
            d_beta=xr.sum(axis=0) / sigma2,
            d_gamma=np.zeros((0, 0)),
            d_sigma2=0.5 * float(np.sum(s / sigma2**2 - n_obs / sigma2)),
        )

    eye = np.eye(p)
    # S = I + H Gamma H / sigma2 shares its determinant with V / sigma2
    scaled = eye + np.einsum("nij,jk,nkl->nil", stats.ztz_sqrt, gamma, stats.ztz_sqrt) / sigma2
    scaled = 0.5 * (scaled + np.transpose(scaled, (0, 2, 1)))
    try:
        chol = np.linalg.cholesky(scaled)
    except np.linalg.LinAlgError:
        eigmin = np.linalg.eigvalsh(scaled)[:, 0]
        bad = int(np.argmax(eigmin <= 0))
        raise EvaluationError(
            "marginal covariance is not positive definite", individual=stats.ids[bad]
        ) from None
    if check:
        eigvals = np.linalg.eigvalsh(scaled)
        cond = np.maximum(eigvals[:, -1], 1.0) / np.minimum(eigvals[:, 0], 1.0)
        if np.any(cond > CONDITION_LIMIT):
            bad = int(np.argmax(cond > CONDITION_LIMIT))
            raise EvaluationError(
                f"marginal covariance is numerically singular (condition {cond[bad]:.3g})",
                individual=stats.ids[bad],
            )
    logdet_scaled = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)

    system = sigma2 * eye + np.einsum("ij,njk->nik", gamma, stats.ztz)
    kmat = np.linalg.solve(system, np.broadcast_to(gamma, system.shape))
    kmat = 0.5 * (kmat + np.transpose(kmat, (0, 2, 1)))
    kw = np.einsum("nij,nj->ni", kmat, w)
    wkw = np.einsum("ni,ni->n", w, kw)

    quad = (s - wkw) / sigma2
    loglik = -0.5 * float(np.sum(n_obs * LOG_2PI + n_obs * np.log(sigma2) + logdet_scaled + quad))
    if not np.isfinite(loglik):
        raise EvaluationError("log-likelihood is not finite")
    if not gradient:
        return _Evaluation(loglik)

    akw = np.einsum("nij,nj->ni", stats.ztz, kw)
    u = (w - akw) / sigma2
    zvz = (stats.ztz - np.einsum("nij,njk,nkl->nil", stats.ztz, kmat, stats.ztz)) / sigma2
    d_gamma = 0.5 * (np.einsum("ni,nj->ij", u, u) - zvz.sum(axis=0))
    d_beta = (xr - np.einsum("npb,np->nb", stats.ztx, kw)).sum(axis=0) / sigma2
    trace_vinv = (n_obs - np.einsum("nij,nji->n", kmat, stats.ztz)) / sigma2
    rv2r = (s - 2.0 * wkw + np.einsum("ni,ni->n", kw, akw)) / sigma2**2
    d_sigma2 = 0.5 * float(np.sum(rv2r - trace_vinv))
    return _Evaluation(loglik, d_beta=d_beta, d_gamma=symmetrize(d_gamma), d_sigma2=d_sigma2)


def marginal_loglik(spec, theta, ds):
    """
    Log-likelihood of the dataset under the model at theta

    Raises:
        EvaluationError: A marginal covariance is singular or not positive definite
    """
    spec = spec.resolve(ds)
    theta.check_against(spec)
    stats = compute_sufficient_statistics(spec, ds)
    return _evaluate(stats, theta.beta, theta.gamma(), theta.sigma2, check=True).loglik


def _canonical_gradient(evaluation, layout):
    parts = [evaluation.d_beta]
    start = 0
    for r in layout.blocks:
        block = evaluation.d_gamma[start : start + r, start : start + r]
        parts.append(
            np.array([block[i, j] if i == j else 2.0 * block[i, j] for i, j in vech_pairs(r)])
        )
        start += r
    parts.append([evaluation.d_sigma2])
    return np.concatenate([np.asarray(part, dtype=float) for part in parts])


def loglik_gradient(spec, theta, ds):
    """Gradient of the log-likelihood in the canonical flattening"""
    spec = spec.resolve(ds)
    theta.check_against(spec)
    stats = compute_sufficient_statistics(spec, ds)
    evaluation = _evaluate(stats, theta.beta, theta.gamma(), theta.sigma2, gradient=True)
    return _canonical_gradient(evaluation, spec.layout)


class LmmObjective:
    """
    Negative log-likelihood over the unconstrained parametrization

    x = (beta, lower-triangular factor entries of each block in half-vectorized
    order, log sigma2); Gamma_k = L_k L_k^T is positive semidefinite for any x.
    """

    def __init__(self, spec, stats):
        self.spec = spec
        self.stats = stats
        self.b = spec.b
        self.layout = spec.layout
        self.size = spec.b + spec.layout.n_params + 1
        self._cache = {}

    def unpack(self, x):
        x = np.asarray(x, dtype=float)
        beta = x[: self.b]
        p = self.layout.p
        factor = np.zeros((p, p))
        pos, start = self.b, 0
        for r in self.layout.blocks:
            for i, j in vech_pairs(r):
                factor[start + i, start + j] = x[pos]
                pos += 1
            start += r
        log_sigma2 = float(np.clip(x[-1], -700.0, 700.0))
        return beta, factor, log_sigma2

    def pack(self, theta):
        """Unconstrained vector for a ParamVector (boundary blocks nudged inside)"""
        parts = [theta.beta]
        for g in theta.gamma_blocks:
            r = g.shape[0]
            shift = 1e-3 * max(theta.sigma2, float(np.mean(np.diag(g))), 1e-12)
            factor = np.linalg.cholesky(g + shift * np.eye(r))
            parts.append([factor[i, j] for i, j in vech_pairs(r)])
        parts.append([np.log(max(theta.sigma2, 1e-300))])
        return np.concatenate([np.asarray(part, dtype=float) for part in parts])

    def to_params(self, x):
        beta, factor, log_sigma2 = self.unpack(x)
        # Flip columns so every factor has a non-negative diagonal; L L^T is unchanged
        signs = np.where(np.diag(factor) < 0, -1.0, 1.0)
        factor = factor * signs
        gamma = factor @ factor.T
        return ParamVector(beta, _split_blocks(gamma, self.layout), np.exp(log_sigma2))

    def value_and_grad(self, x):
        beta, factor, log_sigma2 = self.unpack(x)
        sigma2 = np.exp(log_sigma2)
        gamma = factor @ factor.T
        evaluation = _evaluate(self.stats, beta, gamma, sigma2, gradient=True)

        grad = [evaluation.d_beta]
        d_factor = 2.0 * evaluation.d_gamma @ factor
        start = 0
        for r in self.layout.blocks:
            grad.append([d_factor[start + i, start + j] for i, j in vech_pairs(r)])
            start += r
        grad.append([sigma2 * evaluation.d_sigma2])
        grad = np.concatenate([np.asarray(part, dtype=float) for part in grad])

        value = -evaluation.loglik
        self._cache[np.asarray(x, dtype=float).tobytes()] = value
        if len(self._cache) > 64:
            self._cache.pop(next(iter(self._cache)))
        return value, -grad

    def cached_value(self, x):
        key = np.asarray(x, dtype=float).tobytes()
        if key not in self._cache:
            self.value_and_grad(x)
        return self._cache[key]


def default_start(spec, stats):
    """OLS beta, Gamma_k = 0.1 Var(residuals) I, sigma2 = 0.9 Var(residuals)"""
    var = stats.ols_residual_var if stats.ols_residual_var > 0 else 1.0
    blocks = tuple(0.1 * var * np.eye(r) for r in spec.layout.blocks)
    return ParamVector(stats.ols_beta, blocks, 0.9 * var)


def _perturbed(objective, x0, rng):
    x = x0.copy()
    b = objective.b
    n_gamma = objective.layout.n_params
    scale = np.abs(x[b : b + n_gamma]).max() if n_gamma else 0.0
    x[b : b + n_gamma] += rng.normal(scale=0.5 * max(scale, 1e-3), size=n_gamma)
    x[-1] += rng.normal(scale=0.5)
    return x


def _snap_boundary(theta):
    """Truncate Gamma eigenvalues below SNAP_TOLERANCE * sigma2 to exactly zero"""
    blocks = []
    for g in theta.gamma_blocks:
        eigvals, eigvecs = np.linalg.eigh(g)
        if np.any(eigvals < SNAP_TOLERANCE * theta.sigma2):
            eigvals = np.where(eigvals < SNAP_TOLERANCE * theta.sigma2, 0.0, eigvals)
            g = symmetrize((eigvecs * eigvals) @ eigvecs.T)
            if not np.any(eigvals):
                g = np.zeros_like(g)
        blocks.append(g)
    return ParamVector(theta.beta, tuple(blocks), theta.sigma2)


def fit_ml(spec, ds, init=None, opts=None):
    """
    Maximum-likelihood fit by quasi-Newton over the unconstrained parametrization

    Args:
        spec (LmmSpec): Model to fit
        ds (Dataset): Data
        init (ParamVector, optional): Starting point; the default start otherwise
        opts (FitOptions, optional): max_iter, tol, restarts, seed

    Returns:
        FitResult: Best local maximizer over the start and `restarts` perturbed
        starts; converged=False when no attempt met the gradient tolerance
    """
    opts = opts or FitOptions()
    spec = spec.resolve(ds)
    stats = compute_sufficient_statistics(spec, ds)
    objective = LmmObjective(spec, stats)

    start = init if init is not None else default_start(spec, stats)
    start.check_against(spec)
    x0 = objective.pack(start)

    starts = [x0]
    if opts.restarts:
        base = objective.pack(default_start(spec, stats))
        rng = derived_stream(opts.seed, RESTART_TAG)
        starts += [_perturbed(objective, base, rng) for _ in range(opts.restarts)]

    scale = max(1.0, abs(objective.cached_value(x0)))
    gtol = opts.tol * scale
    best = None
    for attempt, x_start in enumerate(starts):
        history = [-objective.cached_value(x_start)]

        def record(xk):
            history.append(-objective.cached_value(xk))

        try:
            result = minimize(
                objective.value_and_grad,
                x_start,
                jac=True,
                method="BFGS",
                callback=record,
                options={"gtol": gtol, "maxiter": opts.max_iter},
            )
        except EvaluationError as e:
            logger.warning(f"Fit attempt {attempt} failed: {e}")
            continue

        grad_norm = float(np.max(np.abs(result.jac))) if result.jac.size else 0.0
        converged = bool(result.success) or grad_norm <= ACCEPTED_GRADIENT_FACTOR * gtol
        candidate = (converged, -float(result.fun), result, grad_norm, tuple(history))
        logger.debug(
            f"Fit attempt {attempt}: loglik={-result.fun:.8g} iterations={result.nit} "
            f"grad={grad_norm:.2e} converged={converged}"
        )
        if best is None or (candidate[0], candidate[1]) > (best[0], best[1]):
            best = candidate

    if best is None:
        raise EvaluationError("every fit attempt failed")

    converged, _, result, grad_norm, history = best
    theta = _snap_boundary(objective.to_params(result.x))
    loglik = _evaluate(stats, theta.beta, theta.gamma(), theta.sigma2).loglik
    if not converged:
        logger.warning(
            f"Fit did not converge after {opts.max_iter} iterations "
            f"(gradient {grad_norm:.2e}): {result.message}"
        )
    return FitResult(
        spec=spec,
        theta_hat=theta,
        loglik=loglik,
        converged=converged,
        n_individuals=ds.n_individuals,
        iterations=int(result.nit),
        gradient_norm=grad_norm,
        history=history,
        message=str(result.message),
    )


def constrain(spec, null):
    """
    Model under the null hypothesis described by a TestStructure

    Tested fixed effects are dropped; fully tested blocks are removed;
    sub-block tests keep the leading r - s terms; covariance-only tests split
    the block along its partition.
    """
    if null.b != spec.b or null.layout != spec.layout:
        raise ValidationError(
            f"Test structure (b={null.b}, blocks={null.layout.blocks}) does not match "
            f"model (b={spec.b}, blocks={spec.layout.blocks})"
        )
    fixed = tuple(
        term for k, term in enumerate(spec.fixed_terms) if k not in set(null.tested_fixed)
    )
    random_terms, blocks = [], []
    for terms, test in zip(spec.block_terms(), null.block_tests):
        if test.kind == "untested":
            random_terms.extend(terms)
            blocks.append(len(terms))
        elif test.kind == "full":
            continue
        elif test.kind == "subblock":
            kept = terms[: len(terms) - test.s]
            random_terms.extend(kept)
            blocks.append(len(kept))
        else:
            random_terms.extend(terms)
            blocks.extend(test.effective_partition(len(terms)))

    reduced = LmmSpec(fixed, tuple(random_terms), CovarianceLayout(tuple(blocks)), spec.group)
    dropped = spec.n_params - reduced.n_params
    if dropped != null.n_tested:
        raise ValidationError(
            f"Constrained model drops {dropped} parameters, test structure tests {null.n_tested}"
        )
    return reduced


def simulate(spec, theta, design, seed=0):
    """
    Draw responses y_i = X_i beta + Z_i b_i + e_i on the covariates of `design`

    b_i ~ Normal(0, Gamma) and e_i ~ Normal(0, sigma2 I); seed may be an int,
    a tuple key or a numpy Generator.
    """
    spec = spec.resolve(design)
    theta.check_against(spec)
    rng = as_generator(seed)
    factor = psd_factor(theta.gamma()) if spec.p else np.zeros((0, 0))
    sigma = np.sqrt(theta.sigma2)
    responses = []
    for pair in design_matrices(design, spec.fixed_terms, spec.random_terms):
        mean = pair.X @ theta.beta
        effects = factor @ rng.standard_normal(spec.p)
        noise = sigma * rng.standard_normal(len(mean))
        responses.append(mean + pair.Z @ effects + noise)
    return design.with_responses(responses)


def hessian_steps(values):
    return np.maximum(1e-5 * np.abs(values), 1e-7)


def hessian_fim(fit, ds):
    """
    Observed information: minus the Hessian of the log-likelihood at theta_hat

    Central differences of the analytic gradient in the canonical flattening,
    with step max(1e-5 |theta_j|, 1e-7), symmetrized as (H + H^T) / 2.
    """
    if not fit.converged:
        raise ValidationError("Observed information needs a converged fit")
    spec = fit.spec.resolve(ds)
    stats = compute_sufficient_statistics(spec, ds)
    layout, b = spec.layout, spec.b

    def gradient(values):
        beta, gamma, sigma2 = unflatten(values, layout, b)
        evaluation = _evaluate(stats, beta, gamma, sigma2, gradient=True)
        return _canonical_gradient(evaluation, layout)

    theta = fit.theta_hat.flatten()
    hess = numerical_hessian(None, theta, hessian_steps(theta), grad=gradient)
    if not np.all(np.isfinite(hess)):
        raise EvaluationError("observed information has non-finite entries")
    asymmetry = np.max(np.abs(hess - hess.T)) / max(np.max(np.abs(hess)), 1e-300)
    logger.debug(f"Finite-difference Hessian relative asymmetry {asymmetry:.2e}")
    return -symmetrize(hess)
