"""Least-squares estimator for panel regressions with interactive fixed
effects, computed by alternating between an OLS step for the coefficients
and a rank-R truncated SVD step for the factor matrix."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericalError
from .linalg import truncate_rank
from .panel import PanelData


@dataclass(frozen=True)
class LsOptions:
    max_iter: int = 1000
    tol: float = 1e-10
    n_random_starts: int = 4
    seed: int = 0


@dataclass
class LsFit:
    beta: float
    delta: np.ndarray
    gamma_matrix: np.ndarray
    residuals: np.ndarray
    objective: float
    n_iterations: int
    converged: bool
    n_starts_used: int
    rank: int
    objective_trace: list = field(default_factory=list, repr=False)

    @property
    def coefficients(self) -> np.ndarray:
        return np.concatenate([[self.beta], self.delta])


def stack_regressors(panel: PanelData) -> np.ndarray:
    """NT x (1+K) matrix with columns vec(X), vec(Z_1), ..."""
    return np.column_stack([panel.x.reshape(-1)] + [zk.reshape(-1) for zk in panel.z])


class _OlsSolver:
    """Least squares on a fixed design through a thin QR factorization."""

    def __init__(self, w: np.ndarray, what: str):
        self.q, self.r = np.linalg.qr(w)
        diag = np.abs(np.diag(self.r))
        scale = np.linalg.norm(w, axis=0)
        if np.any(diag <= 1e-10 * np.maximum(scale, np.finfo(float).tiny)):
            raise NumericalError(what)

    def __call__(self, v: np.ndarray) -> np.ndarray:
        return np.linalg.solve(self.r, self.q.T @ v)


def _alternate(y, w, solver, r, gamma0, opts):
    n, t = y.shape
    gamma = gamma0
    trace = []
    converged = False
    it = 0
    for it in range(1, opts.max_iter + 1):
        coef = solver((y - gamma).reshape(-1))
        e = y - (w @ coef).reshape(n, t)
        gamma = truncate_rank(e, r)
        obj = float(np.sum((e - gamma) ** 2))
        if trace and trace[-1] - obj <= opts.tol * trace[-1]:
            trace.append(obj)
            converged = True
            break
        trace.append(obj)
        if obj == 0.0:
            converged = True
            break
    return coef, gamma, trace, it, converged


def ls_interactive_fe(panel: PanelData, r: int, opts: LsOptions | None = None) -> LsFit:
    """Minimize ``||Y - X b - Z.d - G||_F^2`` over ``b``, ``d`` and ``rank(G) <= r``.

    The objective is nonconvex in the factor part, so the alternation is run
    from several starts: ``Gamma = 0``, the rank-r principal components of Y,
    and ``opts.n_random_starts`` random rank-r matrices whose entry scale
    starts at the pooled OLS residual standard deviation and doubles each
    time. The fit with the lowest objective is returned (ties go to the
    earlier start).
    """
    opts = opts or LsOptions()
    n, t = panel.shape
    r = int(r)
    if r < 0:
        raise DataError("rank must be nonnegative")
    if r >= min(n, t):
        raise DataError(f"rank too large: r={r} must be below min(N, T)={min(n, t)}")
    y = panel.y
    w = stack_regressors(panel)
    solver = _OlsSolver(w, "collinear covariates after factor removal")

    starts = [np.zeros((n, t))]
    if r > 0:
        # principal components of Y, then random starts at doubling scales
        starts.append(truncate_rank(y, r))
        ols_resid = y.reshape(-1) - w @ solver(y.reshape(-1))
        sd = float(np.std(ols_resid))
        rng = np.random.default_rng(opts.seed)
        for i in range(opts.n_random_starts):
            starts.append(truncate_rank(rng.normal(0.0, sd * 2.0**i, size=(n, t)), r))

    best = None
    for idx, g0 in enumerate(starts):
        run = _alternate(y, w, solver, r, g0, opts)
        obj = run[2][-1]
        if best is None or obj < best[2][-1] * (1 - 1e-12):
            best = run
    coef, gamma, trace, n_iter, converged = best
    resid = y - (w @ coef).reshape(n, t) - gamma
    return LsFit(
        beta=float(coef[0]),
        delta=np.asarray(coef[1:], dtype=float),
        gamma_matrix=gamma,
        residuals=resid,
        objective=float(np.sum(resid**2)),
        n_iterations=n_iter,
        converged=converged,
        n_starts_used=len(starts),
        rank=r,
        objective_trace=trace,
    )


def ls_influence_weights(panel: PanelData, fit: LsFit) -> np.ndarray:
    """Weights ``A`` with ``beta_LS - beta ~ <A, U>`` to first order.

    Each regressor is projected off the column and row spaces of the
    estimated factor matrix (``M_lambda X M_f``) and the weight on X is the
    corresponding row of the OLS map on the projected regressors.
    """
    n, t = panel.shape
    mats = [panel.x, *panel.z]
    if fit.rank > 0:
        u, s, vt = np.linalg.svd(fit.gamma_matrix, full_matrices=False)
        k = int(np.sum(s > 1e-12 * max(s[0], np.finfo(float).tiny)))
        lam, f = u[:, :k], vt[:k].T
        mats = [m - lam @ (lam.T @ m) for m in mats]
        mats = [m - (m @ f) @ f.T for m in mats]
    w = np.column_stack([m.reshape(-1) for m in mats])
    gram = w.T @ w
    try:
        rows = np.linalg.solve(gram, w.T)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("collinear covariates after factor removal") from exc
    return rows[0].reshape(n, t)
