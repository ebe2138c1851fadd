"""Monte Carlo designs, replication engine and table summaries.

Replication ``j`` of a study with base seed ``s`` draws from
``numpy.random.Generator(PCG64(SeedSequence([s, j])))``; every draw is thus
fixed by ``(s, j)`` alone and results do not depend on how replications are
scheduled across worker processes.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .errors import DataError, RobustIfeError
from .factor_ls import LsOptions, ls_influence_weights, ls_interactive_fe
from .inference import bias_aware_ci, debiased_estimate, robust_se
from .linalg import nuclear_norm, svd
from .panel import DeterministicSpec, PanelData, profile_out
from .weights import lindeberg

GENERATOR = "numpy.random.PCG64 seeded by SeedSequence([base_seed, replication])"
ESTIMATORS = ("ls", "debiased")


def replication_rng(base_seed: int, j: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(base_seed), int(j)])))


@dataclass(frozen=True)
class DgpSpec:
    """Factor design ``Y = X beta + sum_r kappa_r lambda_ir f_tr + U`` with
    ``X = sum_r lambda_ir f_tr + V`` and all draws independent normals."""

    n: int
    t: int
    r_true: int = 1
    kappa: tuple = (0.0,)
    sigma_u: float = 1.0
    sigma_v: float = 1.0
    beta_true: float = 0.0
    seed: int = 0

    def __post_init__(self):
        kappa = tuple(float(k) for k in np.atleast_1d(self.kappa))
        if len(kappa) == 1 and self.r_true > 1:
            kappa = kappa * self.r_true
        object.__setattr__(self, "kappa", kappa)
        if self.n < 1 or self.t < 1 or self.r_true < 0:
            raise DataError("n, t must be positive and r_true nonnegative")
        if len(kappa) != self.r_true:
            raise DataError(f"kappa has {len(kappa)} entries for r_true={self.r_true}")
        if any(k < 0 for k in kappa):
            raise DataError("kappa entries must be nonnegative")
        if self.sigma_u <= 0 or self.sigma_v <= 0:
            raise DataError("sigma_u and sigma_v must be positive")


def simulate_dgp(spec: DgpSpec, rng: Optional[np.random.Generator] = None):
    """Draw one panel; returns ``(panel, truth)`` with ``truth`` holding the
    factor matrix ``gamma`` and ``beta``."""
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    n, t, r = spec.n, spec.t, spec.r_true
    lam = rng.standard_normal((n, r))
    f = rng.standard_normal((t, r))
    u = rng.standard_normal((n, t))
    v = rng.standard_normal((n, t))
    common = lam @ f.T
    gamma = (lam * np.asarray(spec.kappa)) @ f.T
    x = common + spec.sigma_v * v
    y = x * spec.beta_true + gamma + spec.sigma_u * u
    return PanelData(y=y, x=x), {"gamma": gamma, "beta": spec.beta_true}


@dataclass(frozen=True)
class CalibratedBase:
    """Fixed parts of an empirically calibrated design: the (profiled)
    regressor, a rank-one direction and the noise level."""

    x: np.ndarray
    loading: np.ndarray
    factor: np.ndarray
    beta_hat: float
    sigma_u: float

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.shape != (len(self.loading), len(self.factor)):
            raise DataError(
                f"dimension error: x is {x.shape}, loading/factor give {(len(self.loading), len(self.factor))}"
            )
        if self.sigma_u <= 0:
            raise DataError("sigma_u must be positive")


@dataclass(frozen=True)
class CalibratedSource:
    base: CalibratedBase
    kappa: float = 0.0
    seed: int = 0

    @property
    def beta_true(self) -> float:
        return self.base.beta_hat


def simulate_calibrated(base: CalibratedBase, kappa: float, seed=None, rng=None):
    """``Y = X beta_hat + kappa loading factor' + U`` with fresh
    ``U ~ N(0, sigma_u^2)``; everything else is held fixed."""
    rng = rng if rng is not None else np.random.default_rng(seed)
    x = np.asarray(base.x, dtype=float)
    gamma = kappa * np.outer(base.loading, base.factor)
    u = base.sigma_u * rng.standard_normal(x.shape)
    y = x * base.beta_hat + gamma + u
    return PanelData(y=y, x=x), {"gamma": gamma, "beta": base.beta_hat}


def calibrate_from_panel(panel: PanelData, sigma_u: Optional[float] = None) -> CalibratedBase:
    """Build a calibrated design from an already profiled single-regressor
    panel: OLS slope, residual variance and the leading principal component
    of X as the rank-one direction."""
    x, y = panel.x, panel.y
    beta = float(np.vdot(x, y) / np.vdot(x, x))
    resid = y - x * beta
    f = svd(x)
    scale = np.sqrt(f.s[0])
    loading, factor = f.u[:, 0] * scale, f.v[:, 0] * scale
    if loading.sum() < 0:
        loading, factor = -loading, -factor
    sig = float(np.sqrt(np.mean(resid**2))) if sigma_u is None else float(sigma_u)
    return CalibratedBase(x=x, loading=loading, factor=factor, beta_hat=beta, sigma_u=sig)


# Ratio s_1(X) / sigma_u of the synthetic policy panel; sets the scale at
# which the rank-one direction turns from weak to strong.
SYNTHETIC_SIGNAL_TO_NOISE = 10.5


def synthetic_policy_base(n: int = 48, t: int = 33, seed: int = 0, beta: float = 0.0) -> CalibratedBase:
    """Calibrated design built from a simulated staggered-adoption dummy.

    About 60% of units switch the policy on at a random period in the middle
    third of the sample and keep it on. Unit effects, unit quadratic trends and
    period effects are profiled out of the dummy before the leading principal
    component is extracted.
    """
    rng = np.random.default_rng(seed)
    lo, hi = t // 3, 2 * t // 3
    adopt = np.where(rng.random(n) < 0.6, rng.integers(lo, hi + 1, n), t + 1)
    dummy = (np.arange(t)[None, :] >= adopt[:, None]).astype(float)
    prof = profile_out(PanelData(y=np.zeros((n, t)), x=dummy), DeterministicSpec(True, True, 2))
    f = svd(prof.x)
    base = calibrate_from_panel(prof, sigma_u=float(f.s[0]) / SYNTHETIC_SIGNAL_TO_NOISE)
    return replace(base, beta_hat=float(beta))


@dataclass
class StudySummary:
    estimator: str
    kappa: tuple
    bias: float
    std: float
    rmse: float
    size: float
    length: float
    coverage: float
    n_reps: int
    failures: int = 0
    mean_lind: float = float("nan")
    bound_hold_rate: float = float("nan")
    n: int = 0
    t: int = 0


@dataclass
class _Rep:
    index: int
    values: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)


def _draw(source, j: int):
    rng = replication_rng(source.seed, j)
    if isinstance(source, DgpSpec):
        return simulate_dgp(source, rng)
    return simulate_calibrated(source.base, source.kappa, rng=rng)


def _one_rep(args):
    source, j, estimators, r_est, alpha, epsilon, ls_opts = args
    panel, truth = _draw(source, j)
    rep = _Rep(j)
    ls_fit = None
    if "debiased" in estimators:
        try:
            fit = debiased_estimate(panel, r_est, alpha=alpha, epsilon=epsilon, ls_options=ls_opts)
            gap = nuclear_norm(fit.gamma_pre - truth["gamma"])
            rep.values["debiased"] = dict(
                beta=fit.beta, lo=fit.ci[0], hi=fit.ci[1], lind=fit.weights.lind, bound=gap <= fit.c_hat
            )
            ls_fit = fit.ls_fit
        except (RobustIfeError, np.linalg.LinAlgError) as exc:
            rep.errors["debiased"] = f"{type(exc).__name__}: {exc}"
    if "ls" in estimators:
        try:
            if ls_fit is None:
                ls_fit = ls_interactive_fe(panel, r_est, ls_opts)
            a_ls = ls_influence_weights(panel, ls_fit)
            se = robust_se(a_ls, ls_fit.residuals)
            lo, hi = bias_aware_ci(ls_fit.beta, 0.0, se, alpha)
            rep.values["ls"] = dict(beta=ls_fit.beta, lo=lo, hi=hi, lind=lindeberg(a_ls), bound=np.nan)
        except (RobustIfeError, np.linalg.LinAlgError) as exc:
            rep.errors["ls"] = f"{type(exc).__name__}: {exc}"
    return rep


def summarize(estimator: str, records: Sequence[dict], beta_true: float, failures: int = 0, **design) -> StudySummary:
    """Aggregate per-replication ``beta``/``lo``/``hi`` records. ``std`` is the
    population standard deviation, so ``rmse^2 = bias^2 + std^2``."""
    if not records:
        nan = float("nan")
        return StudySummary(estimator, design.get("kappa", ()), nan, nan, nan, nan, nan, nan, 0, failures,
                            n=design.get("n", 0), t=design.get("t", 0))
    err = np.array([r["beta"] for r in records]) - beta_true
    lo = np.array([r["lo"] for r in records])
    hi = np.array([r["hi"] for r in records])
    covered = (lo <= beta_true) & (beta_true <= hi)
    bias = float(err.mean())
    std = float(err.std())
    bounds = np.array([r.get("bound", np.nan) for r in records], dtype=float)
    linds = np.array([r.get("lind", np.nan) for r in records], dtype=float)
    return StudySummary(
        estimator=estimator,
        kappa=tuple(design.get("kappa", ())),
        bias=bias,
        std=std,
        rmse=float(np.sqrt(bias * bias + std * std)),
        size=float(1.0 - covered.mean()),
        length=float((hi - lo).mean()),
        coverage=float(covered.mean()),
        n_reps=len(records),
        failures=failures,
        mean_lind=float(np.mean(linds)) if np.all(np.isfinite(linds)) else float("nan"),
        bound_hold_rate=float(np.mean(bounds)) if np.all(np.isfinite(bounds)) else float("nan"),
        n=design.get("n", 0),
        t=design.get("t", 0),
    )


def run_study(
    source: Union[DgpSpec, CalibratedSource],
    n_reps: int,
    estimators: Iterable[str] = ESTIMATORS,
    r_est: int = 1,
    alpha: float = 0.05,
    epsilon: float = 0.0,
    ls_options: Optional[LsOptions] = None,
    threads: int = 1,
    return_failures: bool = False,
):
    """Replicate the design ``n_reps`` times and summarize each estimator.

    ``"ls"`` is the least-squares estimator with a conventional interval
    from its robust plug-in standard error; ``"debiased"`` is the debiased
    estimator with its bias-aware interval. Failed replications are
    excluded from the statistics and counted in ``failures``; with
    ``return_failures`` the error messages are returned as well.
    """
    if n_reps < 1:
        raise DataError("n_reps must be at least 1")
    estimators = tuple(e for e in ESTIMATORS if e in set(estimators))
    if not estimators:
        raise DataError("no known estimator requested")
    jobs = [(source, j, estimators, r_est, alpha, epsilon, ls_options) for j in range(n_reps)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            reps = list(pool.map(_one_rep, jobs, chunksize=max(1, n_reps // (4 * threads))))
    else:
        reps = [_one_rep(job) for job in jobs]
    reps.sort(key=lambda r: r.index)

    if isinstance(source, DgpSpec):
        design = dict(kappa=source.kappa, n=source.n, t=source.t)
    else:
        n, t = np.asarray(source.base.x).shape
        design = dict(kappa=(float(source.kappa),), n=n, t=t)
    out, errors = [], {}
    for est in estimators:
        records = [r.values[est] for r in reps if est in r.values]
        errors[est] = [(r.index, r.errors[est]) for r in reps if est in r.errors]
        out.append(summarize(est, records, source.beta_true, failures=len(errors[est]), **design))
    return (out, errors) if return_failures else out


REPORT_STATS = ("bias", "std", "rmse", "size", "length", "coverage", "bound_hold_rate", "mean_lind")


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return ""
    return f"{v:.4f}"


def report_rows(summaries: Sequence[StudySummary]):
    """Header and formatted rows: kappa columns first, sorted by kappa then
    estimator order."""
    if not summaries:
        raise DataError("no summaries to report")
    width = max(len(s.kappa) for s in summaries)
    kcols = ["kappa"] if width <= 1 else [f"kappa_{i + 1}" for i in range(width)]
    header = kcols + ["estimator", *REPORT_STATS, "n_reps", "failures"]
    order = {e: i for i, e in enumerate(ESTIMATORS)}
    ranked = sorted(summaries, key=lambda s: (tuple(s.kappa), order.get(s.estimator, len(order))))
    rows = []
    for s in ranked:
        kap = list(s.kappa) + [float("nan")] * (width - len(s.kappa))
        rows.append(
            [_fmt(k) for k in kap[: len(kcols)]]
            + [s.estimator]
            + [_fmt(getattr(s, c)) for c in REPORT_STATS]
            + [str(s.n_reps), str(s.failures)]
        )
    return header, rows


def format_report(summaries: Sequence[StudySummary], fmt: str = "csv") -> str:
    header, rows = report_rows(summaries)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return buf.getvalue()
    if fmt in ("markdown", "md"):
        lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
        lines += ["| " + " | ".join(r) + " |" for r in rows]
        return "\n".join(lines) + "\n"
    raise DataError(f"unknown report format {fmt!r}")


def emit_report(summaries: Sequence[StudySummary], path, fmt: str = "csv", metadata: Optional[dict] = None) -> Path:
    """Write the report to ``path`` and its metadata (random generator,
    numpy version, any extra ``metadata``) to ``path + '.meta.json'``."""
    path = Path(path)
    path.write_text(format_report(summaries, fmt), encoding="utf-8")
    meta = {"generator": GENERATOR, "numpy": np.__version__, **(metadata or {})}
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
