"""Augmented linear estimators, worst-case bias bounds and bias-aware
confidence intervals, plus the full debiasing pipeline for panels with
interactive fixed effects."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import optimize, stats

from .errors import DataError, NumericalError
from .factor_ls import LsFit, LsOptions, ls_influence_weights, ls_interactive_fe, stack_regressors
from .linalg import spectral_norm, truncate_rank
from .panel import PanelData
from .weights import WeightMatrix, select_weights

CONSTRAINT_RTOL = 1e-8


@dataclass
class DebiasFit:
    beta: float
    ci: tuple
    se: float
    worst_case_bias: float
    c_hat: float
    epsilon: float
    alpha: float
    b_used: float
    r: int
    weights: WeightMatrix
    beta_pre: float
    delta_pre: np.ndarray
    gamma_pre: np.ndarray
    u_pre: np.ndarray
    ls_fit: Optional[LsFit]
    ls_se: float = float("nan")
    ls_ci: tuple = (float("nan"), float("nan"))
    interval: str = "bias_aware"
    se_residuals: str = "pre"
    diagnostics: dict = field(default_factory=dict)

    @property
    def width(self) -> float:
        return self.ci[1] - self.ci[0]

    def to_dict(self) -> dict:
        """JSON-ready result document."""
        ls = {"beta": None, "delta": [], "se": None, "ci": None}
        if self.ls_fit is not None:
            ls = {
                "beta": self.ls_fit.beta,
                "delta": [float(d) for d in self.ls_fit.delta],
                "se": self.ls_se,
                "ci": [float(self.ls_ci[0]), float(self.ls_ci[1])],
            }
        return {
            "beta": self.beta,
            "ci": [float(self.ci[0]), float(self.ci[1])],
            "se": self.se,
            "worst_case_bias": self.worst_case_bias,
            "c_hat": self.c_hat,
            "b_used": self.b_used,
            "r": self.r,
            "epsilon": self.epsilon,
            "alpha": self.alpha,
            "interval": self.interval,
            "se_residuals": self.se_residuals,
            "beta_pre": self.beta_pre,
            "delta_pre": [float(d) for d in self.delta_pre],
            "ls": ls,
            "diagnostics": dict(self.diagnostics),
        }


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise DataError("alpha must lie in (0, 1)")


def _matrix(a):
    return a.a if isinstance(a, WeightMatrix) else np.asarray(a, dtype=float)


def augmented_linear(a, y_tilde) -> float:
    """``<A, Y_tilde>``: the estimate implied by weights ``a``."""
    a = _matrix(a)
    y_tilde = np.asarray(y_tilde, dtype=float)
    if a.shape != y_tilde.shape:
        raise DataError(f"dimension error: weights {a.shape} vs outcome {y_tilde.shape}")
    return float(np.vdot(a, y_tilde))


def check_constraints(a, x, z=(), rtol: float = CONSTRAINT_RTOL) -> bool:
    a = _matrix(a)
    x = np.asarray(x, dtype=float)
    if abs(np.vdot(a, x) - 1.0) > rtol:
        return False
    fro = np.linalg.norm(a)
    return all(abs(np.vdot(a, zk)) <= rtol * fro * np.linalg.norm(zk) for zk in z)


def worst_case_bias(c: float, a, x=None, z=()) -> float:
    """Largest bias ``<A, G>`` over ``||G||_* <= c``, which is ``c s_1(A)``.

    If ``x`` is given, the linear constraints on ``a`` are checked first:
    without them the bias over unrestricted coefficients is unbounded.
    """
    if c < 0:
        raise DataError("bias bound c must be nonnegative")
    if x is not None and not check_constraints(a, x, z):
        raise NumericalError("unbounded worst-case bias: weights violate the linear constraints")
    s1 = a.s1 if isinstance(a, WeightMatrix) else spectral_norm(a)
    return float(c * s1)


def robust_se(a, u_hat) -> float:
    """Heteroskedasticity-robust standard error ``sqrt(sum A^2 U^2)``."""
    a = _matrix(a)
    u_hat = np.asarray(u_hat, dtype=float)
    if a.shape != u_hat.shape:
        raise DataError(f"dimension error: weights {a.shape} vs residuals {u_hat.shape}")
    return float(np.sqrt(np.sum((a * u_hat) ** 2)))


def bias_aware_ci(beta: float, bias: float, se: float, alpha: float = 0.05) -> tuple:
    _check_alpha(alpha)
    if bias < 0 or se < 0:
        raise DataError("bias and se must be nonnegative")
    half = bias + stats.norm.ppf(1 - alpha / 2) * se
    return (beta - half, beta + half)


def folded_normal_cdf(c: float, t: float) -> float:
    return float(stats.norm.cdf(c - t) - stats.norm.cdf(-c - t))


def folded_normal_cv(t: float, alpha: float = 0.05) -> float:
    """``1 - alpha`` quantile of ``|N(t, 1)|``."""
    _check_alpha(alpha)
    if t < 0:
        raise DataError("t must be nonnegative")
    lo = stats.norm.ppf(1 - alpha)
    hi = t + stats.norm.ppf(1 - alpha / 2) + 1.0
    return float(optimize.brentq(lambda c: folded_normal_cdf(c, t) - (1 - alpha), lo, hi, xtol=1e-12, rtol=1e-14))


def fixed_bias_ci(beta: float, bias: float, se: float, alpha: float = 0.05) -> tuple:
    """Interval for a non-random bias bounded by ``bias``; never wider than
    :func:`bias_aware_ci`. With ``se == 0`` it degenerates to ``beta +- bias``."""
    _check_alpha(alpha)
    if bias < 0 or se < 0:
        raise DataError("bias and se must be nonnegative")
    if se == 0:
        return (beta - bias, beta + bias)
    half = folded_normal_cv(bias / se, alpha) * se
    return (beta - half, beta + half)


def b_tracy_widom(r: int, n: int, t: int) -> float:
    """Default bias-to-noise calibration ``4 R (sqrt(N) + sqrt(T))``."""
    return 4.0 * r * (np.sqrt(n) + np.sqrt(t))


def _coefficient_weights(panel: PanelData, b: float, criterion: str, alpha: float, lind_cap):
    """Weights for beta and, with X and Z_j swapped, for each delta_j."""
    kw = dict(criterion=criterion, alpha=alpha)
    a_x, _ = select_weights(panel.x, list(panel.z), b, lind_cap=lind_cap, **kw)
    a_z = []
    for j, zj in enumerate(panel.z):
        others = [panel.x] + [zk for k, zk in enumerate(panel.z) if k != j]
        a_z.append(select_weights(zj, others, b, **kw)[0])
    return a_x, a_z


def _ls_inference(panel, fit, alpha):
    a_ls = ls_influence_weights(panel, fit)
    se = robust_se(a_ls, fit.residuals)
    return se, bias_aware_ci(fit.beta, 0.0, se, alpha)


def debiased_estimate(
    panel: PanelData,
    r: int,
    alpha: float = 0.05,
    epsilon: float = 0.0,
    b_override: Optional[float] = None,
    criterion: str = "mse",
    ls_options: Optional[LsOptions] = None,
    lind_cap: Optional[float] = None,
    se_residuals: str = "pre",
) -> DebiasFit:
    """Debiased estimate of beta with a bias-aware confidence interval.

    1. Least squares with a rank-``r`` factor matrix.
    2. Preliminary coefficients from minimax weights applied to the outcome
       net of the LS factor matrix.
    3. Re-estimate the factor matrix as the rank-``r`` truncation of the
       residual at the preliminary coefficients.
    4. Apply the weights again to the outcome net of that factor matrix;
       the nuclear-norm bound is ``(4 + epsilon) r s_1(U_pre)``.

    The weights use ``b = 4 r (sqrt(N) + sqrt(T))`` unless ``b_override`` is
    given; the bound on the factor error does not depend on ``b``.
    ``se_residuals`` chooses the residuals in the standard error: ``"pre"``
    (from step 3) or ``"ls"`` (from step 1).
    """
    _check_alpha(alpha)
    if epsilon < 0:
        raise DataError("epsilon must be nonnegative")
    if se_residuals not in ("pre", "ls"):
        raise DataError("se_residuals must be 'pre' or 'ls'")
    n, t = panel.shape
    r = int(r)
    if r < 1 or r > min(n, t) - 1:
        raise DataError(f"rank too large: r must lie in [1, {min(n, t) - 1}]")

    ls = ls_interactive_fe(panel, r, ls_options)
    b = b_tracy_widom(r, n, t) if b_override is None else float(b_override)
    if b < 0:
        raise DataError("b must be nonnegative")

    a_x, a_z = _coefficient_weights(panel, b, criterion, alpha, lind_cap)
    y_pre = panel.y - ls.gamma_matrix
    beta_pre = augmented_linear(a_x, y_pre)
    delta_pre = np.array([augmented_linear(a, y_pre) for a in a_z])

    fitted = panel.x * beta_pre + sum((zk * d for zk, d in zip(panel.z, delta_pre)), np.zeros((n, t)))
    gamma_pre = truncate_rank(panel.y - fitted, r)
    u_pre = panel.y - fitted - gamma_pre

    beta = augmented_linear(a_x, panel.y - gamma_pre)
    c_hat = (4.0 + epsilon) * r * spectral_norm(u_pre)
    bias = worst_case_bias(c_hat, a_x)
    se = robust_se(a_x, u_pre if se_residuals == "pre" else ls.residuals)
    ci = bias_aware_ci(beta, bias, se, alpha)
    ls_se, ls_ci = _ls_inference(panel, ls, alpha)
    rms = float(np.sqrt(np.mean(u_pre**2)))
    return DebiasFit(
        beta=beta,
        ci=ci,
        se=se,
        worst_case_bias=bias,
        c_hat=c_hat,
        epsilon=epsilon,
        alpha=alpha,
        b_used=b,
        r=r,
        weights=a_x,
        beta_pre=beta_pre,
        delta_pre=delta_pre,
        gamma_pre=gamma_pre,
        u_pre=u_pre,
        ls_fit=ls,
        ls_se=ls_se,
        ls_ci=ls_ci,
        interval="bias_aware",
        se_residuals=se_residuals,
        diagnostics={
            "lind": a_x.lind,
            "lind_violation": a_x.lind_violation,
            "mu_star": a_x.mu,
            "s1_a": a_x.s1,
            "fro_a": a_x.fro,
            "c_over_sigma_proxy": c_hat / rms if rms > 0 else float("nan"),
            "iterations": ls.n_iterations,
            "ls_converged": ls.converged,
        },
    )


def pooled_ols_sigma(panel: PanelData) -> float:
    w = stack_regressors(panel)
    coef, *_ = np.linalg.lstsq(w, panel.y.reshape(-1), rcond=None)
    return float(np.std(panel.y.reshape(-1) - w @ coef))


def known_bound_estimate(
    panel: PanelData,
    c_known: float,
    alpha: float = 0.05,
    b_override: Optional[float] = None,
    criterion: str = "mse",
    lind_cap: Optional[float] = None,
) -> DebiasFit:
    """Linear estimator when ``||Gamma||_* <= c_known`` is known a priori.

    No preliminary factor estimate is subtracted. The weights use
    ``b = c_known / sigma_hat`` with ``sigma_hat`` the pooled OLS residual
    standard deviation, and the reported interval exploits that the bias is
    non-random (folded normal critical value).
    """
    _check_alpha(alpha)
    if c_known < 0:
        raise DataError("c_known must be nonnegative")
    n, t = panel.shape
    if b_override is not None:
        b = float(b_override)
    else:
        sigma = pooled_ols_sigma(panel)
        if sigma == 0.0:
            raise NumericalError("pooled OLS residuals are identically zero; pass b_override")
        b = c_known / sigma
    a_x, a_z = _coefficient_weights(panel, b, criterion, alpha, lind_cap)
    beta = augmented_linear(a_x, panel.y)
    delta = np.array([augmented_linear(a, panel.y) for a in a_z])
    fitted = panel.x * beta + sum((zk * d for zk, d in zip(panel.z, delta)), np.zeros((n, t)))
    u_hat = panel.y - fitted
    bias = worst_case_bias(c_known, a_x)
    se = robust_se(a_x, u_hat)
    ci = fixed_bias_ci(beta, bias, se, alpha)
    return DebiasFit(
        beta=beta,
        ci=ci,
        se=se,
        worst_case_bias=bias,
        c_hat=float(c_known),
        epsilon=0.0,
        alpha=alpha,
        b_used=b,
        r=0,
        weights=a_x,
        beta_pre=beta,
        delta_pre=delta,
        gamma_pre=np.zeros((n, t)),
        u_pre=u_hat,
        ls_fit=None,
        interval="fixed_bias",
        diagnostics={
            "lind": a_x.lind,
            "lind_violation": a_x.lind_violation,
            "mu_star": a_x.mu,
            "s1_a": a_x.s1,
            "fro_a": a_x.fro,
            "iterations": 0,
        },
    )
