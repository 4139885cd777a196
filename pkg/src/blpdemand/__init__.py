"""Random-coefficients logit demand estimation from aggregate shares.

The package estimates the mixed logit demand model on market-level data
with three interchangeable drivers: ``fit_npgmm`` searches over outside
probabilities and solves mean utilities in closed form, ``fit_ablp``
iterates an approximate inversion map between searches, and ``fit_nfxp``
solves the inversion exactly inside every objective evaluation. All three
share the moment construction, analytic gradients, and reporting code.

Typical use::

    from blpdemand import DgpConfig, generate_dataset, run_multistart

    dataset, truth, _ = generate_dataset(DgpConfig(seed=3))
    best, attempts = run_multistart(dataset, "npgmm", seed=3)
    print(best.theta_hat.as_vector())
"""

from .dataio import load_config, load_dataset, save_dataset
from .dgp import DgpConfig, generate_dataset
from .estimators import (
    StartPoint,
    fit_ablp,
    fit_nfxp,
    fit_npgmm,
    logit_start,
    multi_start_select,
    random_starts,
    run_multistart,
)
from .exceptions import InputError, NonConvergenceError, NumericalError
from .gmm import (
    build_weight_matrix,
    criterion_G,
    criterion_Q,
    criterion_Q_ablp,
    criterion_Q_ablp_gradient,
    criterion_Q_gradient,
    linear_iv_gmm_beta,
)
from .inference import lambda_jacobian, npgmm_variance
from .inversion import solve_delta
from .shares import (
    closed_form_delta,
    delta_param_gradients,
    h_function,
    outside_probs,
    predict_shares,
)
from .types import (
    FitResult,
    InversionSettings,
    MarketDataset,
    ModelParameters,
    SolverConfig,
    VarianceReport,
)

__version__ = "0.1.0"

__all__ = [
    "DgpConfig",
    "FitResult",
    "InputError",
    "InversionSettings",
    "MarketDataset",
    "ModelParameters",
    "NonConvergenceError",
    "NumericalError",
    "SolverConfig",
    "StartPoint",
    "VarianceReport",
    "build_weight_matrix",
    "closed_form_delta",
    "criterion_G",
    "criterion_Q",
    "criterion_Q_ablp",
    "criterion_Q_ablp_gradient",
    "criterion_Q_gradient",
    "delta_param_gradients",
    "fit_ablp",
    "fit_nfxp",
    "fit_npgmm",
    "generate_dataset",
    "h_function",
    "lambda_jacobian",
    "linear_iv_gmm_beta",
    "load_config",
    "load_dataset",
    "logit_start",
    "multi_start_select",
    "npgmm_variance",
    "outside_probs",
    "predict_shares",
    "random_starts",
    "run_multistart",
    "save_dataset",
    "solve_delta",
    "__version__",
]
