import logging

import numpy as np

logger = logging.getLogger(__name__)


def vech_pairs(r):
    """
    (row, col) pairs of the half-vectorization of an r x r symmetric matrix

    Column-major lower triangle: (0,0), (1,0), ..., (r-1,0), (1,1), (2,1), ...
    """
    return [(i, j) for j in range(r) for i in range(j, r)]


def vech(matrix):
    matrix = np.asarray(matrix, dtype=float)
    return np.array([matrix[i, j] for i, j in vech_pairs(matrix.shape[0])])


def invech(values, r=None):
    values = np.asarray(values, dtype=float)
    if r is None:
        r = int(round((np.sqrt(8 * len(values) + 1) - 1) / 2))
    matrix = np.zeros((r, r))
    for value, (i, j) in zip(values, vech_pairs(r)):
        matrix[i, j] = value
        matrix[j, i] = value
    return matrix


def symmetrize(matrix):
    matrix = np.asarray(matrix, dtype=float)
    return (matrix + matrix.T) / 2.0


def psd_factor(matrix):
    """Factor F with F F^T = matrix, eigenvalues clipped at zero"""
    eigvals, eigvecs = np.linalg.eigh(symmetrize(matrix))
    return eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))


def repair_pd(matrix, relative_floor=1e-10):
    """
    Symmetrize and floor eigenvalues at relative_floor * largest eigenvalue

    A matrix already above the floor is returned unchanged, so repairing twice
    is the same as repairing once.

    Returns:
        tuple: (repaired matrix, number of eigenvalues raised to the floor)
    """
    sym = symmetrize(matrix)
    eigvals, eigvecs = np.linalg.eigh(sym)
    largest = eigvals[-1]
    if not np.isfinite(largest) or largest <= 0:
        raise ValueError("matrix has no positive eigenvalue")

    floor = relative_floor * largest
    if eigvals[0] >= 0.5 * floor:
        return sym, 0

    raised = int(np.sum(eigvals < floor))
    repaired = (eigvecs * np.maximum(eigvals, floor)) @ eigvecs.T
    return symmetrize(repaired), raised


def numerical_hessian(func, x, steps, grad=None):
    """
    Central finite-difference Hessian

    With grad given, the Hessian is built from central differences of the
    gradient; otherwise from the four-point second difference of func.
    The result is not symmetrized.
    """
    x = np.asarray(x, dtype=float)
    steps = np.asarray(steps, dtype=float)
    q = len(x)
    hess = np.empty((q, q))

    if grad is not None:
        for j in range(q):
            e = np.zeros(q)
            e[j] = steps[j]
            hess[:, j] = (np.asarray(grad(x + e)) - np.asarray(grad(x - e))) / (
                2.0 * steps[j]
            )
        return hess

    for j in range(q):
        ej = np.zeros(q)
        ej[j] = steps[j]
        for k in range(j, q):
            ek = np.zeros(q)
            ek[k] = steps[k]
            value = (
                func(x + ej + ek)
                - func(x + ej - ek)
                - func(x - ej + ek)
                + func(x - ej - ek)
            ) / (4.0 * steps[j] * steps[k])
            hess[j, k] = value
            hess[k, j] = value
    return hess
