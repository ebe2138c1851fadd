import numpy as np
import pytest
from scipy import optimize

from robustife.errors import DataError, NumericalError
from robustife.factor_ls import LsOptions, ls_interactive_fe
from robustife.linalg import nuclear_norm, singular_values, spectral_norm
from robustife.montecarlo import DgpSpec, simulate_dgp
from robustife.panel import PanelData


def _panel(seed, n=8, t=6, k=0, kappa=1.0, beta=0.5):
    rng = np.random.default_rng(seed)
    lam, f = rng.normal(size=(n, 1)), rng.normal(size=(t, 1))
    x = lam @ f.T + rng.normal(size=(n, t))
    z = [rng.normal(size=(n, t)) for _ in range(k)]
    y = beta * x + kappa * lam @ f.T + sum(0.3 * zk for zk in z) + rng.normal(size=(n, t))
    return PanelData(y=y, x=x, z=z)


def test_rank_zero_is_pooled_ols():
    panel = _panel(0, k=2)
    fit = ls_interactive_fe(panel, 0)
    w = np.column_stack([panel.x.ravel(), *(z.ravel() for z in panel.z)])
    coef = np.linalg.lstsq(w, panel.y.ravel(), rcond=None)[0]
    np.testing.assert_allclose(fit.coefficients, coef, rtol=1e-10)
    assert np.all(fit.gamma_matrix == 0)


def test_noiseless_recovery():
    rng = np.random.default_rng(1)
    gamma = rng.normal(size=(12, 2)) @ rng.normal(size=(2, 9))
    x = rng.normal(size=(12, 9))
    fit = ls_interactive_fe(PanelData(y=1.5 * x + gamma, x=x), 2, LsOptions(tol=1e-14, max_iter=5000))
    assert fit.beta == pytest.approx(1.5, abs=1e-6)
    assert fit.objective < 1e-10


def _profiled(panel, beta):
    s = singular_values(panel.y - beta * panel.x)
    return float(np.sum(s[1:] ** 2))


@pytest.mark.parametrize("seed", range(5))
def test_matches_profiled_grid_oracle(seed):
    panel = _panel(seed)
    grid = np.linspace(-3, 3, 1201)
    vals = [_profiled(panel, b) for b in grid]
    i = int(np.argmin(vals))
    res = optimize.minimize_scalar(
        lambda b: _profiled(panel, b), bracket=(grid[i - 1], grid[i], grid[i + 1]), method="golden", tol=1e-10
    )
    fit = ls_interactive_fe(panel, 1, LsOptions(tol=1e-14, max_iter=20000))
    assert fit.beta == pytest.approx(res.x, abs=1e-5)
    assert fit.objective <= res.fun * (1 + 1e-8)


def test_fit_invariants():
    panel = _panel(7, n=15, t=10, k=1)
    fit = ls_interactive_fe(panel, 2)
    s = singular_values(fit.gamma_matrix)
    assert s[2] <= 1e-8 * s[0]
    resid = panel.y - fit.beta * panel.x - fit.delta[0] * panel.z[0] - fit.gamma_matrix
    np.testing.assert_allclose(fit.residuals, resid, rtol=1e-10, atol=1e-12)
    assert fit.objective == pytest.approx(np.sum(resid**2), rel=1e-10)
    trace = np.array(fit.objective_trace)
    assert np.all(np.diff(trace) <= 1e-12 * trace[:-1])
    assert fit.converged and fit.n_starts_used == 6


def test_permutation_equivariance():
    panel = _panel(3, n=12, t=8, k=1)
    perm = np.random.default_rng(0).permutation(12)
    shuffled = PanelData(y=panel.y[perm], x=panel.x[perm], z=[panel.z[0][perm]])
    opts = LsOptions(tol=1e-14, max_iter=5000)
    a, b = ls_interactive_fe(panel, 1, opts), ls_interactive_fe(shuffled, 1, opts)
    assert b.beta == pytest.approx(a.beta, abs=1e-9)
    np.testing.assert_allclose(b.delta, a.delta, atol=1e-9)
    assert b.objective == pytest.approx(a.objective, rel=1e-9)
    np.testing.assert_allclose(b.gamma_matrix, a.gamma_matrix[perm], atol=1e-7)


def test_scale_equivariance():
    panel = _panel(4, n=10, t=7, k=1)
    c = 3.0
    a = ls_interactive_fe(panel, 1)
    b = ls_interactive_fe(panel.replace(y=c * panel.y), 1)
    assert b.beta == pytest.approx(c * a.beta, rel=1e-8)
    np.testing.assert_allclose(b.delta, c * a.delta, rtol=1e-8)
    np.testing.assert_allclose(b.gamma_matrix, c * a.gamma_matrix, atol=1e-7 * c * np.abs(a.gamma_matrix).max())
    assert b.objective == pytest.approx(c * c * a.objective, rel=1e-8)


def test_fixed_point_nuclear_bound_on_simulated_draws():
    for j in range(20):
        spec = DgpSpec(n=40, t=25, kappa=(0.3 + 0.1 * j,), seed=j)
        panel, truth = simulate_dgp(spec)
        fit = ls_interactive_fe(panel, 1)
        lhs = nuclear_norm(fit.gamma_matrix - truth["gamma"])
        rhs = 4 * spectral_norm(panel.y - fit.beta * panel.x - truth["gamma"])
        assert lhs <= rhs + 1e-8


def test_errors():
    panel = _panel(0)
    with pytest.raises(DataError, match="rank too large"):
        ls_interactive_fe(panel, 6)
    with pytest.raises(NumericalError, match="collinear covariates"):
        ls_interactive_fe(PanelData(y=panel.y, x=panel.x, z=[2 * panel.x]), 1)
