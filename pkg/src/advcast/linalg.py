"""Dense numerical kernels: SPD solves, symmetric eigenvalue extremes, and
finite-difference gradient oracles.

Everything here operates on plain float64 numpy arrays and is pure, so the
functions are safe to call from multiple workers.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import (
    DimensionMismatch,
    NonFiniteEvaluation,
    NonSymmetric,
    NotPositiveDefinite,
)

DEFAULT_FD_STEP = 1e-5


def _as_matrix(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got shape {M.shape}")
    return M


class CholeskyFactor:
    """Cached Cholesky factorization of an SPD matrix.

    Reused heavily by the QP solver and implicit differentiation, where the
    same Hessian is solved against many right-hand sides.
    """

    def __init__(self, M: np.ndarray):
        M = _as_matrix(M)
        try:
            self._c_and_lower = scipy.linalg.cho_factor(M, lower=True, check_finite=False)
        except scipy.linalg.LinAlgError as exc:
            raise NotPositiveDefinite(str(exc)) from None
        diag = np.diag(self._c_and_lower[0])
        if np.any(diag * diag <= 1e-14):
            raise NotPositiveDefinite("pivot below 1e-14")
        self.shape = M.shape

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve M x = b; b may be a vector or a stack of columns."""
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.shape[0]:
            raise DimensionMismatch(
                f"rhs length {b.shape[0]} vs matrix size {self.shape[0]}"
            )
        return scipy.linalg.cho_solve(self._c_and_lower, b, check_finite=False)


def solve_psd(M: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve M x = b for symmetric positive-definite M via Cholesky.

    Raises NotPositiveDefinite if the factorization fails or a pivot is
    effectively zero, NonSymmetric if M is visibly asymmetric.
    """
    M = _as_matrix(M)
    b = np.asarray(b, dtype=float)
    scale = max(1.0, float(np.max(np.abs(M))) if M.size else 1.0)
    if np.max(np.abs(M - M.T)) > 1e-12 * scale:
        raise NonSymmetric("matrix is not symmetric within 1e-12")
    return CholeskyFactor(M).solve(b)


def sym_eig_extremes(M: np.ndarray) -> tuple[float, float]:
    """Return (lambda_min, lambda_max) of a symmetric matrix."""
    M = _as_matrix(M)
    scale = max(1.0, float(np.max(np.abs(M))) if M.size else 1.0)
    if np.max(np.abs(M - M.T)) > 1e-10 * scale:
        raise NonSymmetric("matrix is not symmetric within 1e-10")
    w = np.linalg.eigvalsh(0.5 * (M + M.T))
    return float(w[0]), float(w[-1])


def finite_diff_grad(f, x: np.ndarray, h: float = DEFAULT_FD_STEP) -> np.ndarray:
    """Central-difference gradient of scalar f at x, one coordinate at a time.

    Exact on affine functions; the default step balances truncation and
    rounding error for unit-scaled float64 inputs.
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        fp = float(f(x + e))
        fm = float(f(x - e))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteEvaluation(f"f returned a non-finite value near coordinate {i}")
        g.flat[i] = (fp - fm) / (2.0 * h)
    return g
