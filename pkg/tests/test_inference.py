import numpy as np
import pytest
from scipy import integrate, stats

from robustife.errors import DataError, NumericalError
from robustife.factor_ls import LsOptions
from robustife.inference import (
    augmented_linear,
    b_tracy_widom,
    bias_aware_ci,
    debiased_estimate,
    fixed_bias_ci,
    folded_normal_cv,
    known_bound_estimate,
    robust_se,
    worst_case_bias,
)
from robustife.linalg import nuclear_norm, spectral_norm, svd
from robustife.montecarlo import DgpSpec, simulate_dgp
from robustife.panel import PanelData
from robustife.weights import select_weights

Z975 = 1.959963984540054


def test_augmented_linear():
    x = np.random.default_rng(0).normal(size=(6, 5))
    assert augmented_linear(x / np.sum(x * x), x) == pytest.approx(1.0)
    assert augmented_linear(x, np.zeros_like(x)) == 0.0
    wm, _ = select_weights(x, None, 3.0)
    assert augmented_linear(wm, 0.7 * x) == pytest.approx(0.7, abs=1e-9)
    with pytest.raises(DataError):
        augmented_linear(x, np.zeros((2, 2)))


def test_worst_case_bias():
    a = np.diag([0.5, 0.1])
    assert worst_case_bias(2.0, a) == pytest.approx(1.0)
    assert worst_case_bias(0.0, a) == 0.0
    x = np.random.default_rng(1).normal(size=(6, 5))
    wm, _ = select_weights(x, None, 3.0)
    c = 2.5
    bound = worst_case_bias(c, wm, x)
    rng = np.random.default_rng(2)
    for _ in range(200):
        g = np.outer(rng.normal(size=6), rng.normal(size=5))
        g *= c / nuclear_norm(g)
        assert np.vdot(wm.a, g) <= bound * (1 + 1e-12)
    f = svd(wm.a)
    assert np.vdot(wm.a, c * np.outer(f.u[:, 0], f.v[:, 0])) == pytest.approx(bound, rel=1e-10)
    with pytest.raises(NumericalError, match="unbounded worst-case bias"):
        worst_case_bias(c, 2 * wm.a, x)


def test_robust_se():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(5, 4))
    assert robust_se(a, np.full((5, 4), 2.0)) == pytest.approx(2.0 * np.linalg.norm(a))
    assert robust_se(a, np.zeros((5, 4))) == 0.0
    draws = np.array([robust_se(a, rng.standard_normal((5, 4))) ** 2 for _ in range(2000)])
    target = np.sum(a * a)
    assert abs(draws.mean() - target) <= 3 * draws.std() / np.sqrt(len(draws))


def test_bias_aware_ci_arithmetic():
    lo, hi = bias_aware_ci(1.0, 0.0, 1.0, 0.05)
    assert hi - 1.0 == pytest.approx(1.959964, abs=1e-6)
    assert bias_aware_ci(1.0, 0.3, 0.0) == (0.7, 1.3)
    lo, hi = bias_aware_ci(0.0, 0.1, 0.02, 0.05)
    assert hi == pytest.approx(0.139199, abs=1e-6)
    with pytest.raises(DataError):
        bias_aware_ci(0.0, 0.1, 0.02, 1.5)


def _folded_cv_by_quadrature(t, alpha=0.05):
    # bisection on the trapezoid-integrated density of |N(t, 1)|
    def cdf(c):
        grid = np.linspace(0.0, c, 20001)
        dens = stats.norm.pdf(grid - t) + stats.norm.pdf(grid + t)
        return integrate.trapezoid(dens, grid)

    lo, hi = 0.0, t + 10.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if cdf(mid) < 1 - alpha else (lo, mid)
    return 0.5 * (lo + hi)


def test_folded_normal_cv():
    assert folded_normal_cv(0.0) == pytest.approx(1.959964, abs=1e-6)
    assert folded_normal_cv(10.0) == pytest.approx(10.0 + 1.644854, abs=1e-6)
    # value frozen from an mpmath root solve of the folded-normal CDF
    assert folded_normal_cv(1.0) == pytest.approx(2.646145548, abs=1e-8)
    for t in (0.3, 1.0, 2.5):
        assert folded_normal_cv(t) == pytest.approx(_folded_cv_by_quadrature(t), abs=1e-6)
        assert folded_normal_cv(t) == pytest.approx(stats.foldnorm.ppf(0.95, t), abs=1e-8)
    with pytest.raises(DataError):
        folded_normal_cv(-1.0)


def test_fixed_bias_ci():
    assert fixed_bias_ci(0.5, 0.0, 0.2) == pytest.approx(bias_aware_ci(0.5, 0.0, 0.2))
    lo, hi = fixed_bias_ci(0.0, 0.02, 0.02)
    assert hi == pytest.approx(2.646145548 * 0.02, abs=1e-9)
    assert fixed_bias_ci(1.0, 0.3, 0.0) == (0.7, 1.3)
    for t in np.linspace(0, 8, 33):
        lo, hi = fixed_bias_ci(0.0, t, 1.0)
        lo2, hi2 = bias_aware_ci(0.0, t, 1.0)
        assert lo2 <= lo and hi <= hi2


def test_b_tracy_widom():
    assert b_tracy_widom(1, 100, 50) == pytest.approx(4 * (10 + np.sqrt(50)))
    assert b_tracy_widom(2, 16, 9) == 56.0


def _draw(seed, n=100, t=50, kappa=1.0):
    return simulate_dgp(DgpSpec(n=n, t=t, kappa=(kappa,), seed=seed))


def test_debiased_fit_invariants():
    panel, truth = _draw(0)
    fit = debiased_estimate(panel, 1, epsilon=0.5)
    assert abs(fit.beta - truth["beta"]) < 0.1
    assert fit.c_hat > nuclear_norm(fit.gamma_pre - truth["gamma"])
    assert fit.c_hat / spectral_norm(fit.u_pre) == pytest.approx(4.5, rel=1e-12)
    assert fit.worst_case_bias == pytest.approx(fit.c_hat * spectral_norm(fit.weights.a), rel=1e-10)
    np.testing.assert_allclose(fit.u_pre, panel.y - fit.beta_pre * panel.x - fit.gamma_pre, rtol=1e-10, atol=1e-12)
    half = fit.worst_case_bias + Z975 * fit.se
    assert fit.ci[0] == pytest.approx(fit.beta - half, rel=1e-12)
    assert fit.ci[1] == pytest.approx(fit.beta + half, rel=1e-12)
    assert fit.b_used == pytest.approx(b_tracy_widom(1, 100, 50))
    assert np.linalg.matrix_rank(fit.gamma_pre) == 1
    doc = fit.to_dict()
    for key in ("beta", "ci", "se", "worst_case_bias", "c_hat", "b_used", "r", "epsilon", "alpha", "beta_pre",
                "delta_pre", "ls", "diagnostics"):
        assert key in doc
    assert {"lind", "mu_star", "iterations"} <= set(doc["diagnostics"])


def test_controls_and_se_residual_option():
    rng = np.random.default_rng(5)
    panel, _ = _draw(1, n=30, t=20)
    z = rng.normal(size=panel.shape)
    panel = PanelData(y=panel.y + 0.4 * z, x=panel.x, z=[z])
    pre = debiased_estimate(panel, 1)
    ls = debiased_estimate(panel, 1, se_residuals="ls")
    assert pre.delta_pre.shape == (1,)
    assert pre.delta_pre[0] == pytest.approx(0.4, abs=0.15)
    assert pre.beta == ls.beta and pre.se != ls.se
    assert ls.se == pytest.approx(robust_se(ls.weights, ls.ls_fit.residuals))


def test_noiseless_collapse():
    rng = np.random.default_rng(6)
    lam, f = rng.normal(size=(20, 1)), rng.normal(size=(12, 1))
    x = lam @ f.T + rng.normal(size=(20, 12))
    y = 0.3 * x + lam @ f.T
    fit = debiased_estimate(PanelData(y=y, x=x), 1, ls_options=LsOptions(tol=1e-15, max_iter=20000))
    assert fit.beta == pytest.approx(0.3, abs=1e-8)
    assert np.max(np.abs(fit.u_pre)) < 1e-7
    assert fit.c_hat < 1e-6
    assert fit.width < 1e-6


def test_translation_equivariance():
    panel, _ = _draw(2, n=40, t=30, kappa=0.5)
    opts = LsOptions(tol=1e-15, max_iter=20000)
    a = debiased_estimate(panel, 1, ls_options=opts)
    b = debiased_estimate(panel.replace(y=panel.y + 2.0 * panel.x), 1, ls_options=opts)
    assert b.beta_pre - a.beta_pre == pytest.approx(2.0, abs=1e-8)
    assert b.beta - a.beta == pytest.approx(2.0, abs=1e-8)
    assert b.ci[0] - a.ci[0] == pytest.approx(2.0, abs=1e-8)
    assert b.ci[1] - a.ci[1] == pytest.approx(2.0, abs=1e-8)


def test_coverage_mechanics_draw_by_draw():
    z = stats.norm.ppf(0.975)
    for seed in range(30):
        panel, truth = _draw(100 + seed, n=40, t=25, kappa=0.2 * (seed % 6))
        fit = debiased_estimate(panel, 1)
        u = panel.y - truth["beta"] * panel.x - truth["gamma"]
        bound_ok = nuclear_norm(fit.gamma_pre - truth["gamma"]) <= fit.c_hat
        noise_ok = abs(np.vdot(fit.weights.a, u)) <= z * fit.se
        if bound_ok and noise_ok:
            assert fit.ci[0] <= truth["beta"] <= fit.ci[1]


def test_overspecified_rank_with_no_factor():
    panel, truth = _draw(7, n=50, t=30, kappa=0.0)
    assert np.all(truth["gamma"] == 0)
    fit = debiased_estimate(panel, 1)
    assert fit.ci[0] <= 0.0 <= fit.ci[1]


def test_debiased_errors():
    panel, _ = _draw(8, n=10, t=8)
    with pytest.raises(DataError, match="rank too large"):
        debiased_estimate(panel, 8)
    with pytest.raises(DataError, match="rank too large"):
        debiased_estimate(panel, 0)
    with pytest.raises(DataError):
        debiased_estimate(panel, 1, epsilon=-1)
    with pytest.raises(DataError):
        debiased_estimate(panel, 1, se_residuals="hc3")


def test_b_override_does_not_rescale_c_hat():
    panel, _ = _draw(9, n=30, t=20)
    a = debiased_estimate(panel, 1)
    b = debiased_estimate(panel, 1, b_override=1.0)
    assert b.b_used == 1.0
    assert b.c_hat == pytest.approx(4 * spectral_norm(b.u_pre))
    assert a.ls_fit.beta == b.ls_fit.beta


def test_known_bound_zero_is_plain_linear():
    panel, _ = _draw(10, n=20, t=15)
    fit = known_bound_estimate(panel, 0.0)
    assert fit.worst_case_bias == 0.0
    assert fit.ci[1] - fit.beta == pytest.approx(Z975 * fit.se, rel=1e-10)
    x = panel.x
    assert fit.beta == pytest.approx(np.vdot(x, panel.y) / np.vdot(x, x), rel=1e-9)
    assert fit.interval == "fixed_bias"


def test_known_bound_width_grows_with_c():
    panel, _ = _draw(11, n=20, t=15, kappa=0.5)
    widths = [known_bound_estimate(panel, c).width for c in (0.0, 0.5, 2.0, 8.0, 30.0, 100.0, 1000.0)]
    assert all(w2 > w1 for w1, w2 in zip(widths, widths[1:]))


def test_known_bound_coverage():
    rng = np.random.default_rng(12)
    n, t = 30, 20
    lam, f = rng.normal(size=(n, 1)), rng.normal(size=(t, 1))
    gamma = 0.5 * lam @ f.T
    c = nuclear_norm(gamma)
    hits = 0
    for _ in range(500):
        x = lam @ f.T + rng.normal(size=(n, t))
        y = x * 1.0 + gamma + rng.normal(size=(n, t))
        lo, hi = known_bound_estimate(PanelData(y=y, x=x), c).ci
        hits += lo <= 1.0 <= hi
    assert hits / 500 >= 0.93
