"""Dense complex-matrix helpers shared by the solvers, codec and network.

Matrices are plain ``numpy`` arrays of dtype ``complex128``. Hermitian
positive definite systems are always handled through a Cholesky factor;
no function here forms an explicit inverse.
"""
import numpy as np
import scipy.linalg as sla

HERMITIAN_TOL = 1e-10


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Cholesky factorization hit a non-positive pivot."""


class NotSquare(ValueError):
    pass


def as_cmat(a):
    """Return ``a`` as a finite 2-D complex128 array."""
    m = np.asarray(a, dtype=np.complex128)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    return m


def hermitize(a):
    return 0.5 * (a + a.conj().T)


def gram(h):
    """H @ H^H."""
    h = np.asarray(h)
    return h @ h.conj().T


def trace_real(a):
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise NotSquare(f"trace of non-square matrix {a.shape}")
    t = np.trace(a)
    scale = max(1.0, float(np.abs(a).max(initial=0.0)))
    assert abs(t.imag) <= 1e-12 * scale * a.shape[0], "trace has imaginary residue"
    return float(t.real)


def _check_hermitian(a):
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise NotSquare(f"expected a square matrix, got {a.shape}")
    scale = max(1.0, float(np.abs(a).max(initial=0.0)))
    if np.abs(a - a.conj().T).max(initial=0.0) > HERMITIAN_TOL * scale:
        raise ValueError("matrix is not Hermitian")


def cho_factor(a):
    """Lower Cholesky factor of the symmetrized Hermitian matrix ``a``."""
    a = np.asarray(a, dtype=np.complex128)
    _check_hermitian(a)
    try:
        return sla.cho_factor(hermitize(a), lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None


def cho_solve(factor, b):
    return sla.cho_solve(factor, b, check_finite=False)


def herm_solve(a, b):
    """Solve ``a @ x = b`` for Hermitian positive definite ``a``.

    Raises NotPositiveDefinite when the factorization breaks down.
    """
    b = np.asarray(b)
    if b.shape[0] != np.shape(a)[0]:
        raise ValueError(f"rhs has {b.shape[0]} rows, matrix has {np.shape(a)[0]}")
    return cho_solve(cho_factor(a), b)


def logdet_hpd(a):
    """Natural-log determinant of a Hermitian positive definite matrix."""
    c, _ = cho_factor(a)
    diag = np.diagonal(c).real
    if np.any(diag <= 0.0):
        raise NotPositiveDefinite("non-positive Cholesky pivot")
    return 2.0 * float(np.sum(np.log(diag)))
