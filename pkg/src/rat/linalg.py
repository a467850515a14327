"""Dense float64 linear algebra shared by the solver, policy and oracle code.

Vectors and matrices are plain ``numpy.ndarray`` objects; the helpers here
only add the validation and the error types the rest of the package relies on.
"""

import numpy as np
from scipy.linalg import cho_factor, cho_solve


class ShapeError(ValueError):
    """Raised when operands have inconsistent dimensions."""


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when a matrix expected to be positive definite is not."""


def as_vector(x, name="vector"):
    v = np.asarray(x, dtype=np.float64)
    if v.ndim == 0:
        v = v.reshape(1)
    if v.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {v.shape}")
    if v.size < 1:
        raise ShapeError(f"{name} must have at least one entry")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite entries")
    return v


def as_matrix(x, name="matrix"):
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def matmul(a, b):
    """Matrix product with an explicit shape check."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def gram(h):
    """Return ``h @ h.T``, symmetrised so that it is exactly symmetric."""
    h = as_matrix(h, "h")
    g = h @ h.T
    return 0.5 * (g + g.T)


def solve_spd(m, rhs):
    """Solve ``m x = rhs`` for symmetric positive definite ``m`` by Cholesky.

    No jitter is added: a non-positive pivot raises
    :class:`SingularMatrixError`, which usually means the damping supplied by
    the caller is too small.
    """
    m = as_matrix(m, "m")
    rhs = np.asarray(rhs, dtype=np.float64)
    if m.shape[0] != m.shape[1]:
        raise ShapeError(f"matrix must be square, got {m.shape}")
    if rhs.shape[0] != m.shape[0]:
        raise ShapeError(f"rhs of length {rhs.shape[0]} does not match {m.shape}")
    try:
        factor = cho_factor(m, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(f"matrix is not positive definite: {exc}") from None
    return cho_solve(factor, rhs, check_finite=False)


def damped(m, lam):
    """Return ``m + lam * I``."""
    out = np.array(m, dtype=np.float64, copy=True)
    out[np.diag_indices_from(out)] += lam
    return out


def sym_eigvalsh(m):
    """Eigenvalues of a symmetric matrix in ascending order."""
    m = as_matrix(m, "m")
    return np.linalg.eigvalsh(0.5 * (m + m.T))


def cosine(u, v):
    u = np.ravel(u)
    v = np.ravel(v)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(u @ v / (nu * nv))
