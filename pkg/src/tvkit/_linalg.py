"""Small shared helpers for dense symmetric linear algebra."""

import numpy as np


class NumericError(RuntimeError):
    """A matrix that must be positive definite is not, or a solve failed."""


def symmetrize(a):
    """Average a (stack of) square matrix with its transpose."""
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def floor_eigenvalues(a, floor):
    """Clamp the eigenvalues of a symmetric matrix at ``floor``.

    Returns the reconstructed matrix and a flag telling whether any
    eigenvalue was actually clamped.
    """
    vals, vecs = np.linalg.eigh(a)
    clamped = bool(np.any(vals < floor))
    vals = np.maximum(vals, floor)
    return (vecs * vals) @ vecs.T, clamped


def chol_logdet(chol_factor):
    """log-determinant from a Cholesky factor (as returned by cho_factor)."""
    return 2.0 * float(np.sum(np.log(np.diag(chol_factor))))
