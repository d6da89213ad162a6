"""Dense linear-algebra helpers shared across the package."""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import NotPositiveDefinite, SingularInformation

#: Relative singular-value cutoff for pseudo-inverses and rank decisions.
PINV_RTOL = 1e-12


def symmetrize(M: np.ndarray) -> np.ndarray:
    """Average a square matrix with its transpose.

    Applied after every covariance-producing operation so rounding asymmetry
    cannot compound across the fixed-point iteration.
    """
    return 0.5 * (M + M.T)


def pinv_sym(M: np.ndarray, rtol: float = PINV_RTOL) -> np.ndarray:
    """Moore-Penrose pseudo-inverse of a symmetric matrix via SVD.

    Singular values below ``rtol`` times the largest are treated as zero.
    """
    out = np.linalg.pinv(symmetrize(np.asarray(M, dtype=float)), rcond=rtol)
    return symmetrize(out)


def require_spd(M, name: str = "matrix") -> np.ndarray:
    """Return M as a float array, raising unless it is symmetric positive definite."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise NotPositiveDefinite(f"{name} must be square, got shape {M.shape}")
    if M.size:
        scale = max(1.0, float(np.abs(M).max()))
        if float(np.abs(M - M.T).max()) > 1e-9 * scale:
            raise NotPositiveDefinite(f"{name} is not symmetric")
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite(f"{name} is not positive definite") from None
    return M


def is_spd(M) -> bool:
    try:
        require_spd(M)
    except NotPositiveDefinite:
        return False
    return True


def solve_info(info: np.ndarray, rhs: np.ndarray, node: int | None = None) -> np.ndarray:
    """Solve ``info @ x = rhs`` for a symmetric positive definite information matrix.

    Raises SingularInformation when the Cholesky factorization fails, which
    for a positive semidefinite information matrix means the estimate is not
    determined by the available information.
    """
    try:
        factor = cho_factor(np.asarray(info, dtype=float), lower=True)
    except np.linalg.LinAlgError:
        where = f" at node {node}" if node is not None else ""
        raise SingularInformation(f"information matrix{where} is singular", node=node) from None
    return cho_solve(factor, rhs)


def inv_info(info: np.ndarray, node: int | None = None) -> np.ndarray:
    """Invert an information matrix into a covariance, symmetrized."""
    return symmetrize(solve_info(info, np.eye(info.shape[0]), node=node))


def spectral_radius(M: np.ndarray) -> float:
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(M))))


def toleranced_rank(M, rtol: float = PINV_RTOL) -> int:
    """Numerical rank: count of singular values above ``rtol`` times the largest."""
    sv = np.linalg.svd(np.asarray(M), compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return 0
    return int(np.count_nonzero(sv > rtol * sv[0]))
