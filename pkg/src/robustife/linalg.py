"""Dense matrix kernels: thin SVD, rank truncation, singular value
soft-thresholding and the norms used by the bias bounds."""

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericalError

# singular values below this fraction of s_1 count as exact zeros
RANK_RTOL = 1e-12


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD ``m = u @ diag(s) @ v.T`` with ``s`` nonincreasing."""

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray

    def reconstruct(self, s=None) -> np.ndarray:
        s = self.s if s is None else np.asarray(s, dtype=float)
        return (self.u * s) @ self.v.T


def _as_matrix(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2:
        raise DataError(f"invalid matrix: expected 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise DataError("invalid matrix: non-finite entries")
    return m


def svd(m) -> SvdFactors:
    m = _as_matrix(m)
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise NumericalError(f"svd failed: {exc}") from exc
    return SvdFactors(u=u, s=s, v=vt.T)


def numerical_rank(s: np.ndarray) -> int:
    s = np.asarray(s)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > RANK_RTOL * s[0]))


def truncate_rank(m, r: int) -> np.ndarray:
    """Best rank-``r`` approximation of ``m`` in Frobenius norm.

    When ``s_r == s_{r+1}`` the minimizer is not unique and the returned
    matrix depends on the basis LAPACK hands back; only the objective value
    is stable in that case.
    """
    m = _as_matrix(m)
    r = int(r)
    if r < 0:
        raise DataError("rank must be nonnegative")
    if r > min(m.shape):
        raise DataError(f"rank too large: r={r} exceeds min(N, T)={min(m.shape)}")
    if r == 0:
        return np.zeros_like(m)
    if r == min(m.shape):
        return m.copy()
    f = svd(m)
    return (f.u[:, :r] * f.s[:r]) @ f.v[:, :r].T


def soft_threshold_svd(m, mu: float):
    """Proximal map of ``mu * ||.||_*`` at ``m``.

    Returns ``(pi, omega)`` with ``pi`` the shrunken matrix, whose singular
    values are ``max(s_j - mu, 0)``, and ``omega = m - pi``, whose singular
    values are ``min(s_j, mu)``.
    """
    if mu < 0:
        raise DataError("negative threshold")
    f = svd(m)
    pi = f.reconstruct(np.maximum(f.s - mu, 0.0))
    omega = f.reconstruct(np.minimum(f.s, mu))
    return pi, omega


def singular_values(m) -> np.ndarray:
    return np.linalg.svd(_as_matrix(m), compute_uv=False)


def spectral_norm(m) -> float:
    s = singular_values(m)
    return float(s[0]) if s.size else 0.0


def nuclear_norm(m) -> float:
    return float(np.sum(singular_values(m)))


def frobenius_inner(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DataError(f"dimension error: {a.shape} vs {b.shape}")
    return float(np.vdot(a, b))
