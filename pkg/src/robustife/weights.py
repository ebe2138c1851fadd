"""Minimax linear weights for the coefficient on X.

The weight matrix ``A`` minimizes ``b^2 s_1(A)^2 + ||A||_F^2`` subject to
``<A, X> = 1`` and ``<A, Z_k> = 0``. The solutions for all ``b`` lie on a
one-parameter path indexed by a nuclear-norm penalty ``mu``: regress X on
the controls and a penalized low-rank matrix ``Pi``, take the residual
``Omega`` and normalize it, ``A_mu = Omega / <Omega, X>``. Selecting the
weights for a given ``b`` is then a scalar search over ``mu``.

Without controls the path is available in closed form from the SVD of X:
the residual keeps the singular vectors of X and caps its singular values
at ``mu``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np
from scipy import optimize, stats

from .errors import DataError, NumericalError
from .linalg import RANK_RTOL, nuclear_norm, soft_threshold_svd, spectral_norm, svd

DEGENERATE_RTOL = 1e-10
DEGENERATE_MSG = "degenerate weights: X has no variation outside controls and factor directions"


class LindebergWarning(UserWarning):
    pass


def lindeberg(a) -> float:
    """Largest squared weight as a share of the total squared weight."""
    a = np.asarray(a, dtype=float)
    sq = a * a
    total = float(sq.sum())
    if total == 0.0:
        raise DataError("undefined Lindeberg ratio: zero weight matrix")
    return float(sq.max() / total)


@dataclass
class WeightMatrix:
    a: np.ndarray
    s1: float
    fro_sq: float
    lind: float
    mu: Union[float, str]
    pi_zero: bool = False
    lind_violation: bool = False

    @classmethod
    def from_matrix(cls, a: np.ndarray, mu, **kw) -> "WeightMatrix":
        a = np.asarray(a, dtype=float)
        return cls(
            a=a,
            s1=spectral_norm(a),
            fro_sq=float(np.sum(a * a)),
            lind=lindeberg(a),
            mu=mu,
            **kw,
        )

    @property
    def fro(self) -> float:
        return float(np.sqrt(self.fro_sq))

    def objective(self, b: float) -> float:
        return b * b * self.s1 * self.s1 + self.fro_sq

    def criterion(self, b: float, kind: str = "mse", alpha: float = 0.05) -> float:
        return _criterion(kind, b, alpha)(self.s1, self.fro_sq)


@dataclass
class WeightPathPoint:
    mu: float
    psi: np.ndarray
    pi_nuclear: float
    omega_x_inner: float
    bbar: float
    var_factor: float
    s1_a: float
    lind: float
    objective: float
    criterion: float = float("nan")
    anchor: bool = False

    @property
    def fro_sq(self) -> float:
        return self.var_factor


class PartialOut(NamedTuple):
    pi: np.ndarray
    psi: np.ndarray
    omega: np.ndarray
    objective: float
    n_iterations: int


def _criterion(kind: str, b: float, alpha: float):
    if b < 0:
        raise DataError("bias weight b must be nonnegative")
    kind = kind.replace("-", "_")
    if kind == "mse":
        return lambda s1, fro_sq: b * b * s1 * s1 + fro_sq
    if kind == "ci_length":
        if not 0 < alpha < 1:
            raise DataError("alpha must lie in (0, 1)")
        z = stats.norm.ppf(1 - alpha)
        return lambda s1, fro_sq: b * s1 + z * np.sqrt(fro_sq)
    raise DataError(f"unknown criterion {kind!r}")


def _controls(z, shape) -> np.ndarray:
    z = [np.asarray(zk, dtype=float) for zk in (z or [])]
    for zk in z:
        if zk.shape != shape:
            raise DataError(f"dimension error: control of shape {zk.shape}, expected {shape}")
    if not z:
        return np.zeros((int(np.prod(shape)), 0))
    return np.column_stack([zk.reshape(-1) for zk in z])


class _ZProjector:
    def __init__(self, zmat: np.ndarray, msg: str = "collinear controls"):
        self.k = zmat.shape[1]
        self.zmat = zmat
        if self.k:
            self.q, self.r = np.linalg.qr(zmat)
            diag = np.abs(np.diag(self.r))
            if np.any(diag <= 1e-10 * np.maximum(np.linalg.norm(zmat, axis=0), np.finfo(float).tiny)):
                raise NumericalError(msg)

    def coef(self, v: np.ndarray) -> np.ndarray:
        if not self.k:
            return np.zeros(0)
        return np.linalg.solve(self.r, self.q.T @ v.reshape(-1))

    def fitted(self, psi: np.ndarray, shape) -> np.ndarray:
        if not self.k:
            return np.zeros(shape)
        return (self.zmat @ psi).reshape(shape)


def partial_out_nuclear(
    x,
    z=None,
    mu: float = 0.0,
    max_iter: int = 2000,
    tol: float = 1e-12,
    pi0: Optional[np.ndarray] = None,
    _projector: Optional[_ZProjector] = None,
) -> PartialOut:
    """Solve ``min ||X - Z.psi - Pi||_F^2 / 2 + mu ||Pi||_*`` over ``psi, Pi``.

    Without controls this is a single singular value soft-threshold. With
    controls, ``psi`` (an OLS fit) and ``Pi`` (a soft-threshold) are updated
    in turn, with Nesterov momentum on ``Pi``, until the relative change of
    the objective drops below ``tol``.
    ``psi`` is refreshed after the last ``Pi`` update so that the residual is
    exactly orthogonal to every control.
    """
    x = np.asarray(x, dtype=float)
    if mu < 0:
        raise DataError("negative threshold")
    proj = _projector or _ZProjector(_controls(z, x.shape))
    if not proj.k:
        pi, omega = soft_threshold_svd(x, mu)
        obj = 0.5 * float(np.sum(omega**2)) + mu * nuclear_norm(pi)
        return PartialOut(pi, np.zeros(0), omega, obj, 1)

    def objective(p, p_nuc):
        psi = proj.coef(x - p)
        return 0.5 * float(np.sum((x - proj.fitted(psi, x.shape) - p) ** 2)) + mu * p_nuc

    # each Pi update is a proximal gradient step with unit step length on
    # the objective with psi profiled out; momentum with function-value
    # restarts keeps the block updates monotone while cutting the iteration
    # count when mu is small
    pi = np.zeros_like(x) if pi0 is None else np.array(pi0, dtype=float)
    obj = objective(pi, nuclear_norm(pi))
    anchor, momentum = pi, 1.0
    scale = max(float(np.linalg.norm(x)), np.finfo(float).tiny)
    for it in range(1, max_iter + 1):
        psi = proj.coef(x - anchor)
        f = svd(x - proj.fitted(psi, x.shape))
        shrunk = np.maximum(f.s - mu, 0.0)
        new_pi = f.reconstruct(shrunk)
        new_obj = objective(new_pi, float(shrunk.sum()))
        if new_obj > obj:
            if anchor is pi:
                # a plain step cannot increase the objective beyond round-off
                break
            # restart from the last accepted iterate without momentum
            anchor, momentum = pi, 1.0
            change = np.inf
            continue
        step = float(np.linalg.norm(new_pi - pi))
        change = obj - new_obj
        nxt = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * momentum * momentum))
        anchor = new_pi + ((momentum - 1.0) / nxt) * (new_pi - pi)
        momentum = nxt
        pi, obj = new_pi, new_obj
        if change <= tol * max(abs(obj), np.finfo(float).tiny) and step <= np.sqrt(tol) * scale:
            break
    else:
        raise NumericalError(
            f"path solve failed: objective still changing after {max_iter} iterations (last change {change:.3e})"
        )
    psi = proj.coef(x - pi)
    omega = x - proj.fitted(psi, x.shape) - pi
    obj = 0.5 * float(np.sum(omega**2)) + mu * nuclear_norm(pi)
    return PartialOut(pi, psi, omega, obj, it)


def _normalize(omega: np.ndarray, x: np.ndarray) -> float:
    d = float(np.vdot(omega, x))
    if abs(d) <= DEGENERATE_RTOL * np.linalg.norm(omega) * np.linalg.norm(x) or d == 0.0:
        raise NumericalError(DEGENERATE_MSG)
    return d


def weights_for_mu(x, z=None, mu: float = 0.0, **opts) -> WeightMatrix:
    """Weights ``Omega_mu / <Omega_mu, X>`` from the penalized partialling out."""
    x = np.asarray(x, dtype=float)
    po = partial_out_nuclear(x, z, mu, **opts)
    d = _normalize(po.omega, x)
    top = spectral_norm(_partialled(x, z)) if z else spectral_norm(x)
    return WeightMatrix.from_matrix(po.omega / d, float(mu), pi_zero=bool(mu >= top))


def _partialled(x, z) -> np.ndarray:
    proj = _ZProjector(_controls(z, x.shape))
    return x - proj.fitted(proj.coef(x), x.shape)


def _mu_grid(s: np.ndarray, n_infill: int):
    """Anchor points at the distinct singular values with geometric infill
    between neighbours and below the smallest one."""
    pos = s[s > RANK_RTOL * s[0]]
    anchors = []
    for v in sorted(pos):
        if not anchors or v > anchors[-1] * (1 + 1e-12):
            anchors.append(float(v))
    pts = [(anchors[0] * np.geomspace(1e-2, 1.0, n_infill + 1)[:-1], False)]
    for lo, hi in zip(anchors[:-1], anchors[1:]):
        pts.append((np.geomspace(lo, hi, n_infill + 2)[1:-1], False))
    mus = np.concatenate([p for p, _ in pts] + [np.asarray(anchors)])
    anchor = np.concatenate([np.zeros(sum(len(p) for p, _ in pts), bool), np.ones(len(anchors), bool)])
    order = np.argsort(mus, kind="stable")
    return mus[order], anchor[order]


class _ClosedFormPath:
    """Path quantities without controls, from the singular values of X."""

    def __init__(self, x: np.ndarray):
        self.x = x
        self.f = svd(x)
        self.s = self.f.s

    def top(self) -> float:
        return float(self.s[0])

    def stats(self, mu):
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        w = np.minimum(self.s[None, :], mu[:, None])
        shrunk = np.maximum(self.s[None, :] - mu[:, None], 0.0)
        d = (w * self.s[None, :]).sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            s1_a = w[:, 0] / d
            fro_sq = (w * w).sum(axis=1) / d**2
            bbar = (w * shrunk).sum(axis=1) / d
        return dict(d=d, s1_a=s1_a, fro_sq=fro_sq, pi_nuclear=shrunk.sum(axis=1), bbar=bbar)

    def weights(self, mu: float) -> np.ndarray:
        w = np.minimum(self.s, mu)
        d = float(w @ self.s)
        if d <= DEGENERATE_RTOL * np.sqrt(w @ w) * np.linalg.norm(self.x) or d == 0.0:
            raise NumericalError(DEGENERATE_MSG)
        return self.f.reconstruct(w / d)

    def psi(self, mu):
        return np.zeros(0)


class _IterativePath:
    """Path quantities with controls; each point is an iterative solve,
    warm-started from the nearest point already computed."""

    def __init__(self, x: np.ndarray, z, opts: dict):
        self.x = x
        self.proj = _ZProjector(_controls(z, x.shape))
        self.xt = x - self.proj.fitted(self.proj.coef(x), x.shape)
        self.opts = opts
        self.cache = {}
        self.s = svd(self.xt).s

    def top(self) -> float:
        return float(self.s[0])

    def _solve(self, mu: float) -> PartialOut:
        if mu in self.cache:
            return self.cache[mu]
        pi0 = None
        if self.cache:
            near = min(self.cache, key=lambda m: abs(np.log(m / mu)) if m > 0 and mu > 0 else abs(m - mu))
            pi0 = self.cache[near].pi
        po = partial_out_nuclear(self.x, None, mu, pi0=pi0, _projector=self.proj, **self.opts)
        self.cache[mu] = po
        return po

    def stats(self, mu):
        mus = np.atleast_1d(np.asarray(mu, dtype=float))
        out = {k: np.empty(len(mus)) for k in ("d", "s1_a", "fro_sq", "pi_nuclear", "bbar")}
        for i, m in enumerate(mus):
            po = self._solve(float(m))
            d = float(np.vdot(po.omega, self.x))
            out["d"][i] = d
            with np.errstate(divide="ignore", invalid="ignore"):
                out["s1_a"][i] = spectral_norm(po.omega) / abs(d) if d else np.nan
                out["fro_sq"][i] = float(np.sum(po.omega**2)) / d**2 if d else np.nan
                out["bbar"][i] = float(np.vdot(po.omega, po.pi)) / d if d else np.nan
            out["pi_nuclear"][i] = nuclear_norm(po.pi)
        return out

    def weights(self, mu: float) -> np.ndarray:
        po = self._solve(float(mu))
        return po.omega / _normalize(po.omega, self.x)

    def psi(self, mu):
        return self._solve(float(mu)).psi


def _path_for(x, z, opts):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise DataError("invalid matrix: non-finite entries")
    return _ClosedFormPath(x) if not z else _IterativePath(x, z, opts)


def select_weights(
    x,
    z=None,
    b: float = 0.0,
    criterion: str = "mse",
    alpha: float = 0.05,
    lind_cap: Optional[float] = None,
    n_infill: int = 30,
    rel_width: float = 1e-6,
    path_lind: bool = False,
    solver_opts: Optional[dict] = None,
):
    """Pick the point on the ``mu`` path that minimizes the criterion.

    ``criterion`` is ``"mse"`` (``b^2 s_1(A)^2 + ||A||_F^2``) or
    ``"ci_length"`` (``b s_1(A) + z_{1-alpha} ||A||_F``). The grid is
    searched first and the best bracket is then refined by a bounded scalar
    minimization to a relative width of ``rel_width``.

    Returns ``(weights, path)`` where ``path`` lists every grid point.
    Lindeberg ratios of the grid points are only computed when ``path_lind``
    is set (each one needs the full weight matrix); otherwise they are NaN.

    When ``lind_cap`` is given and the selected weights exceed it, a
    :class:`LindebergWarning` is issued and ``lind_violation`` is set; the
    weights themselves are left unchanged.
    """
    crit = _criterion(criterion, b, alpha)
    path = _path_for(x, z, solver_opts or {})
    x = path.x
    top = path.top()
    if top == 0.0:
        raise NumericalError(DEGENERATE_MSG)
    mus, anchor = _mu_grid(path.s, n_infill)
    st = path.stats(mus)
    vals = crit(st["s1_a"], st["fro_sq"])
    vals = np.where(np.isfinite(vals), vals, np.inf)
    if not np.any(np.isfinite(vals)):
        raise NumericalError(DEGENERATE_MSG)
    # lexicographic (criterion, mu) tie-break
    best = int(np.lexsort((mus, vals))[0])
    mu_best, val_best = float(mus[best]), float(vals[best])

    lo = float(mus[best - 1]) if best > 0 else float(mus[0])
    hi = float(mus[best + 1]) if best + 1 < len(mus) else float(mus[-1])
    if hi > lo:

        def f(m):
            s = path.stats(m)
            v = crit(s["s1_a"], s["fro_sq"])[0]
            return v if np.isfinite(v) else np.inf

        res = optimize.minimize_scalar(
            f, bounds=(lo, hi), method="bounded", options={"xatol": rel_width * mu_best}
        )
        if res.fun < val_best:
            mu_best, val_best = float(res.x), float(res.fun)

    a = path.weights(mu_best)
    wm = WeightMatrix.from_matrix(a, mu_best, pi_zero=bool(mu_best >= top))
    if lind_cap is not None and wm.lind > lind_cap:
        wm.lind_violation = True
        warnings.warn(
            f"Lindeberg ratio {wm.lind:.4g} exceeds cap {lind_cap:.4g}; weights left unchanged",
            LindebergWarning,
            stacklevel=2,
        )

    points = []
    for i, m in enumerate(mus):
        lind_i = lindeberg(path.weights(float(m))) if path_lind else float("nan")
        d = float(st["d"][i])
        points.append(
            WeightPathPoint(
                mu=float(m),
                psi=path.psi(float(m)),
                pi_nuclear=float(st["pi_nuclear"][i]),
                omega_x_inner=d,
                bbar=float(st["bbar"][i]),
                var_factor=float(st["fro_sq"][i]),
                s1_a=float(st["s1_a"][i]),
                lind=lind_i,
                objective=float(b * b * st["s1_a"][i] ** 2 + st["fro_sq"][i]),
                criterion=float(vals[i]),
                anchor=bool(anchor[i]),
            )
        )
    return wm, points


def _affine_system(x: np.ndarray, z) -> np.ndarray:
    w = np.column_stack([x.reshape(-1)] + [np.asarray(zk, float).reshape(-1) for zk in (z or [])])
    if np.linalg.matrix_rank(w, tol=1e-10 * np.linalg.norm(w, 2)) < w.shape[1]:
        raise NumericalError("no feasible weights: X lies in the span of the controls")
    return w


def _affine_projector(w: np.ndarray):
    e = np.zeros(w.shape[1])
    e[0] = 1.0
    gram_inv = np.linalg.inv(w.T @ w)

    def project(a_vec):
        return a_vec - w @ (gram_inv @ (w.T @ a_vec - e))

    return project, w @ (gram_inv @ e)


def oracle_weights_small(
    x,
    z=None,
    b: float = 0.0,
    lind_cap: Optional[float] = None,
    method: str = "conic",
    n_iter: int = 20000,
    eta0: Optional[float] = None,
) -> WeightMatrix:
    """Solve the weight problem directly, without the ``mu`` path.

    Intended for verification on small panels (``N*T <= 100``).

    ``method="conic"`` hands the convex program to cvxpy (spectral norm
    epigraph as a semidefinite constraint). ``method="subgradient"`` runs
    projected subgradient descent on the affine constraint set with steps
    ``eta0 / sqrt(k)`` and keeps the best iterate; it is slow to reach high
    accuracy. A ``lind_cap`` forces the subgradient method and adds a
    clip-and-reproject step onto the (nonconvex) Lindeberg cap, which is a
    heuristic only.
    """
    x = np.asarray(x, dtype=float)
    n, t = x.shape
    if n * t > 100:
        raise DataError("oracle_weights_small is limited to N*T <= 100")
    if b < 0:
        raise DataError("bias weight b must be nonnegative")
    z = list(z or [])
    w = _affine_system(x, z)
    project, a_ls = _affine_projector(w)
    if lind_cap is not None:
        method = "subgradient"

    if method == "conic":
        import cvxpy as cp

        a = cp.Variable((n, t))
        cons = [cp.sum(cp.multiply(a, x)) == 1]
        cons += [cp.sum(cp.multiply(a, zk)) == 0 for zk in z]
        obj = cp.sum_squares(a)
        if b > 0:
            obj = obj + b * b * cp.square(cp.sigma_max(a))
        prob = cp.Problem(cp.Minimize(obj), cons)
        with warnings.catch_warnings():
            # tight tolerances often end as "optimal_inaccurate"; the result
            # is projected onto the constraints below either way
            warnings.simplefilter("ignore", UserWarning)
            prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12)
        if a.value is None or prob.status not in ("optimal", "optimal_inaccurate"):
            raise NumericalError(f"conic solve failed: {prob.status}")
        a_vec = project(np.asarray(a.value).reshape(-1))
        return WeightMatrix.from_matrix(a_vec.reshape(n, t), "direct")

    if method != "subgradient":
        raise DataError(f"unknown oracle method {method!r}")

    def value(v):
        m = v.reshape(n, t)
        return b * b * spectral_norm(m) ** 2 + float(v @ v)

    eta0 = eta0 if eta0 is not None else 0.5 / (1.0 + b * b)
    a_vec = a_ls.copy()
    best_vec, best_val = a_vec.copy(), value(a_vec)
    for k in range(1, n_iter + 1):
        f = svd(a_vec.reshape(n, t))
        g = 2.0 * a_vec + 2.0 * b * b * f.s[0] * np.outer(f.u[:, 0], f.v[:, 0]).reshape(-1)
        a_vec = project(a_vec - eta0 / np.sqrt(k) * g)
        if lind_cap is not None:
            cap = np.sqrt(lind_cap * float(a_vec @ a_vec))
            a_vec = project(np.clip(a_vec, -cap, cap))
        val = value(a_vec)
        ok = lind_cap is None or lindeberg(a_vec) <= lind_cap * (1 + 1e-9)
        if ok and val < best_val:
            best_vec, best_val = a_vec.copy(), val
    return WeightMatrix.from_matrix(best_vec.reshape(n, t), "direct")
