"""
Closed convex cones built from a test structure, and metric projections onto them

A cone is a product of factors over the canonical coordinates:
zero coordinates, free (linear) coordinates, half-lines and positive
semidefinite sub-blocks. Projections minimize (z - theta)^T W (z - theta).
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize

from conetest.errors import MetricError, ProjectionError
from conetest.models.structure import tested_index_sets
from conetest.utils.linalg import invech, symmetrize, vech, vech_pairs

logger = logging.getLogger(__name__)

ZERO = "zero"
LINEAR = "linear"
HALFLINE = "halfline"
PSD = "psd"

MEMBERSHIP_TOLERANCE = 1e-9
ACTIVE_TOLERANCE = 1e-8


@dataclass(frozen=True)
class ConeFactor:
    kind: str
    indices: tuple
    size: int = 0
    rectangle: tuple = ()

    @property
    def count(self):
        return len(self.indices)


@dataclass(frozen=True)
class ProjectionResult:
    point: np.ndarray
    objective: float
    active_dimension: int


@dataclass(frozen=True)
class Cone:
    q: int
    factors: tuple

    def __post_init__(self):
        covered = sorted(i for factor in self.factors for i in factor.indices)
        if covered != list(range(self.q)):
            raise ValueError("Cone factors must partition the coordinates")

    @classmethod
    def from_structure(cls, ts):
        index_map = tested_index_sets(ts)
        factors = []
        if index_map.zero:
            factors.append(ConeFactor(ZERO, index_map.zero))
        if index_map.linear:
            factors.append(ConeFactor(LINEAR, index_map.linear))
        if index_map.halflines:
            factors.append(ConeFactor(HALFLINE, index_map.halflines))
        for descriptor in index_map.psd:
            factors.append(
                ConeFactor(PSD, descriptor.indices, descriptor.size, descriptor.rectangle)
            )
        return cls(index_map.q, tuple(factors))

    @classmethod
    def build(cls, q, zero=(), linear=(), halflines=(), psd=()):
        """Cone from explicit coordinate lists; psd holds (size, indices) pairs"""
        factors = []
        if len(zero):
            factors.append(ConeFactor(ZERO, tuple(zero)))
        if len(linear):
            factors.append(ConeFactor(LINEAR, tuple(linear)))
        if len(halflines):
            factors.append(ConeFactor(HALFLINE, tuple(halflines)))
        for size, indices in psd:
            factors.append(ConeFactor(PSD, tuple(indices), size))
        return cls(q, tuple(factors))

    def indices(self, kind):
        return tuple(i for factor in self.factors if factor.kind == kind for i in factor.indices)

    def psd_factors(self):
        return [factor for factor in self.factors if factor.kind == PSD]

    @property
    def has_psd(self):
        return bool(self.psd_factors())

    def count(self, kind):
        return len(self.indices(kind))


def membership(cone, v):
    """
    Whether v lies in the cone: zero coordinates vanish, half-lines are
    non-negative and every PSD factor has min eigenvalue >= -1e-9 (1 + max|entry|)
    """
    v = np.asarray(v, dtype=float)
    if len(v) != cone.q:
        raise ValueError(f"Expected a vector of length {cone.q}, got {len(v)}")
    zero = list(cone.indices(ZERO))
    if zero and np.any(np.abs(v[zero]) > MEMBERSHIP_TOLERANCE):
        return False
    halflines = list(cone.indices(HALFLINE))
    if halflines and np.any(v[halflines] < -MEMBERSHIP_TOLERANCE):
        return False
    for factor in cone.psd_factors():
        block = invech(v[list(factor.indices)], factor.size)
        tolerance = MEMBERSHIP_TOLERANCE * (1.0 + np.max(np.abs(block)))
        if np.linalg.eigvalsh(block)[0] < -tolerance:
            return False
    return True


def solve_bound_qp(Q, c, lower):
    """
    Minimize (c - x)^T Q (c - x) subject to x_i >= 0 for i in `lower`

    Primal active-set method started from the feasible point with every
    bounded coordinate at zero. Q must be symmetric positive definite.

    Returns:
        tuple: (x, number of iterations)
    """
    n = len(c)
    lower = np.zeros(n, dtype=bool) if lower is None else np.asarray(lower, dtype=bool)
    if not lower.any():
        return c.copy(), 0

    active = lower.copy()
    x = np.zeros(n)

    def solve_free(active):
        free = ~active
        x_new = np.zeros(n)
        if free.any():
            # Minimizer over the free coordinates with the active ones held at zero
            rhs = Q[np.ix_(free, free)] @ c[free] + Q[np.ix_(free, active)] @ c[active]
            x_new[free] = np.linalg.solve(Q[np.ix_(free, free)], rhs)
        return x_new

    x = solve_free(active)
    for iteration in range(1, 10 * n + 20):
        x_new = solve_free(active)
        blocking = lower & ~active & (x_new < 0)
        if blocking.any():
            steps = np.where(blocking, x / np.where(blocking, x - x_new, 1.0), np.inf)
            k = int(np.argmin(steps))
            alpha = float(np.clip(steps[k], 0.0, 1.0))
            x = x + alpha * (x_new - x)
            x[k] = 0.0
            active[k] = True
            continue

        x = x_new
        gradient = 2.0 * Q @ (x - c)
        candidates = np.where(active, gradient, np.inf)
        k = int(np.argmin(candidates))
        scale = 1.0 + np.max(np.abs(gradient))
        if not active.any() or candidates[k] >= -1e-12 * scale:
            return x, iteration
        active[k] = False
    raise ProjectionError("active-set iteration did not terminate")


class Projector:
    """
    Projections onto one cone under one metric

    Factorizations that depend only on (cone, W) are computed once, so
    projecting many vectors costs one small solve each.
    """

    def __init__(self, cone, W, seed=0):
        W = np.asarray(W, dtype=float)
        if W.shape != (cone.q, cone.q):
            raise MetricError(f"Metric must be {cone.q}x{cone.q}, got {W.shape}")
        self.cone = cone
        self.W = symmetrize(W)
        try:
            cho_factor(self.W)
        except np.linalg.LinAlgError:
            raise MetricError("metric is not positive definite") from None
        self.seed = seed

        zero = set(cone.indices(ZERO))
        self.free = np.array([i for i in range(cone.q) if i not in zero], dtype=int)
        self.zero = np.array(sorted(zero), dtype=int)
        self.W_ff = self.W[np.ix_(self.free, self.free)]
        self.W_ff_factor = cho_factor(self.W_ff) if len(self.free) else None
        self.W_fz = self.W[np.ix_(self.free, self.zero)]

        position = {index: k for k, index in enumerate(self.free)}
        self.lower = np.zeros(len(self.free), dtype=bool)
        for index in cone.indices(HALFLINE):
            self.lower[position[index]] = True
        self.psd = [
            (factor.size, np.array([position[i] for i in factor.indices], dtype=int))
            for factor in cone.psd_factors()
        ]

    def _target(self, z):
        """Unconstrained minimizer over the free coordinates"""
        if len(self.zero) == 0:
            return z[self.free].copy()
        return z[self.free] + cho_solve(self.W_ff_factor, self.W_fz @ z[self.zero])

    def objective(self, z, point):
        d = z - point
        return float(d @ self.W @ d)

    def project(self, z):
        z = np.asarray(z, dtype=float)
        if len(z) != self.cone.q:
            raise ValueError(f"Expected a vector of length {self.cone.q}, got {len(z)}")
        point = np.zeros(self.cone.q)
        if len(self.free):
            target = self._target(z)
            if self.psd:
                x = self._solve_psd(target)
            else:
                x, _ = solve_bound_qp(self.W_ff, target, self.lower)
            point[self.free] = x
        objective = max(self.objective(z, point), 0.0)
        return ProjectionResult(point, objective, self._active_dimension(point, z))

    def _active_dimension(self, point, z):
        scale = ACTIVE_TOLERANCE * (1.0 + np.max(np.abs(z)))
        dimension = self.cone.count(LINEAR)
        halflines = list(self.cone.indices(HALFLINE))
        dimension += int(np.sum(point[halflines] > scale)) if halflines else 0
        for factor in self.cone.psd_factors():
            eigvals = np.linalg.eigvalsh(invech(point[list(factor.indices)], factor.size))
            dimension += int(np.sum(eigvals > scale))
        return dimension

    def _unpack(self, y, n_free):
        """Free-coordinate vector from optimizer variables (PSD entries as factors)"""
        x = y[:n_free].copy()
        pos = n_free
        factors = []
        for size, local in self.psd:
            n = size * (size + 1) // 2
            factor = np.zeros((size, size))
            for value, (i, j) in zip(y[pos : pos + n], vech_pairs(size)):
                factor[i, j] = value
            x[local] = vech(factor @ factor.T)
            factors.append(factor)
            pos += n
        return x, factors

    def _solve_psd(self, target):
        n_free = len(self.free)
        psd_local = np.concatenate([local for _, local in self.psd])
        bounds = [(0.0, None) if self.lower[k] else (None, None) for k in range(n_free)]
        for k in psd_local:
            bounds[k] = (0.0, 0.0)  # placeholder slot, overwritten by the factor entries
        for size, _ in self.psd:
            bounds.extend([(None, None)] * (size * (size + 1) // 2))

        def fun(y):
            x, factors = self._unpack(y, n_free)
            residual = target - x
            grad_x = -2.0 * self.W_ff @ residual
            grad = grad_x.copy()
            grad[psd_local] = 0.0
            parts = [grad]
            for (size, local), factor in zip(self.psd, factors):
                g = invech(grad_x[local], size)
                # Off-diagonal vech entries appear twice in the symmetric matrix
                g = np.where(np.eye(size, dtype=bool), g, g / 2.0)
                d_factor = 2.0 * g @ factor
                parts.append(np.array([d_factor[i, j] for i, j in vech_pairs(size)]))
            return float(residual @ self.W_ff @ residual), np.concatenate(parts)

        base = np.where(self.lower, np.maximum(target, 0.0), target)
        base[psd_local] = 0.0
        zero_start = [base]
        eigen_start = [base]
        for size, local in self.psd:
            block = invech(target[local], size)
            eigvals, eigvecs = np.linalg.eigh(block)
            clipped = (eigvecs * np.clip(eigvals, 0.0, None)) @ eigvecs.T
            jitter = 1e-12 * (1.0 + np.trace(np.abs(clipped)))
            factor = np.linalg.cholesky(clipped + jitter * np.eye(size))
            zero_start.append(np.zeros(size * (size + 1) // 2))
            eigen_start.append(np.array([factor[i, j] for i, j in vech_pairs(size)]))
        zero_start = np.concatenate(zero_start)
        eigen_start = np.concatenate(eigen_start)
        rng = np.random.default_rng(self.seed)
        perturbed = eigen_start.copy()
        perturbed[n_free:] += rng.normal(
            scale=1e-2 * (1.0 + np.max(np.abs(eigen_start[n_free:]))),
            size=len(perturbed) - n_free,
        )

        best = None
        for start in (zero_start, eigen_start, perturbed):
            try:
                result = minimize(
                    fun,
                    start,
                    jac=True,
                    method="L-BFGS-B",
                    bounds=bounds,
                    options={"maxiter": 2000, "ftol": 1e-15, "gtol": 1e-12},
                )
            except (ValueError, np.linalg.LinAlgError) as e:
                logger.debug(f"Projection start failed: {e}")
                continue
            if not np.isfinite(result.fun):
                continue
            if best is None or result.fun < best.fun:
                best = result
        if best is None:
            raise ProjectionError("every projection start failed")
        x, _ = self._unpack(best.x, n_free)
        return x


def project(cone, z, W):
    """
    Metric projection of z onto the cone

    Args:
        cone (Cone): Target cone
        z (np.ndarray): Point to project, length q
        W (np.ndarray): Symmetric positive-definite q x q metric

    Returns:
        ProjectionResult: argmin over the cone of (z - theta)^T W (z - theta)

    Raises:
        MetricError: W is not positive definite
        ProjectionError: No optimizer start succeeded
    """
    return Projector(cone, W).project(z)
