"""Bias-aware inference for panel regressions with interactive fixed effects.

The main entry points are :func:`debiased_estimate` (debiased estimator with a
bias-aware confidence interval), :func:`ls_interactive_fe` (least squares with
a low-rank factor component) and :func:`select_weights` (minimax weight
matrices along the nuclear-norm regularization path).
"""

__version__ = "0.1.0"

from .errors import DataError, NumericalError, RobustIfeError
from .factor_ls import LsFit, LsOptions, ls_influence_weights, ls_interactive_fe
from .inference import (
    DebiasFit,
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
from .linalg import nuclear_norm, soft_threshold_svd, spectral_norm, svd, truncate_rank
from .montecarlo import (
    DgpSpec,
    StudySummary,
    calibrate_from_panel,
    emit_report,
    run_study,
    simulate_calibrated,
    simulate_dgp,
    synthetic_policy_base,
)
from .panel import DeterministicSpec, PanelData, load_panel_csv, profile_out, save_panel_csv
from .weights import (
    LindebergWarning,
    WeightMatrix,
    lindeberg,
    oracle_weights_small,
    partial_out_nuclear,
    select_weights,
    weights_for_mu,
)

__all__ = [
    name for name, obj in globals().items() if not name.startswith("_") and getattr(obj, "__module__", "").startswith("robustife")
]
