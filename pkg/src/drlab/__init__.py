"""drlab: Z-estimation with plug-in nuisance parameters.

A numerical laboratory around doubly robust estimating equations: moment
functions with analytic derivatives, rate-controlled nuisance estimators, a
damped-Newton Z-solver, the naive sandwich variance, and a Monte Carlo
engine that turns asymptotic claims about nuisance rates into desk-scale
experiments.
"""

__version__ = "0.1.0"

from .data import Dataset, Observation
from .dgp import DGPSpec, sample, substream, truth
from .moments import (
    MomentFunction,
    NuisanceSplit,
    PositivityError,
    aipw_moment,
    ipw_moment,
    make_moment,
    or_moment,
    verify_dr_derivative,
)
from .nuisance import (
    DegradeSpec,
    NuisanceFit,
    SeparationError,
    apply_strategy,
    degrade,
    fit_logistic_mle,
    fit_misspecified,
    fit_ols_outcome,
    parse_strategy,
)
from .sandwich import SandwichResult, sandwich_variance, z_quantile
from .simlab import (
    RateSlope,
    ReplicationRecord,
    ScenarioAbortError,
    ScenarioConfig,
    SimSummary,
    fit_rate_slope,
    rate_sweep,
    run_scenario,
    taylor_probe,
)
from .zsolver import (
    SolveReport,
    SolveSettings,
    empirical_moment,
    jacobian_psi,
    jacobian_theta,
    solve,
)

__all__ = [
    "__version__",
    "Dataset", "Observation",
    "DGPSpec", "sample", "substream", "truth",
    "MomentFunction", "NuisanceSplit", "PositivityError",
    "aipw_moment", "ipw_moment", "or_moment", "make_moment", "verify_dr_derivative",
    "DegradeSpec", "NuisanceFit", "SeparationError",
    "apply_strategy", "degrade", "fit_logistic_mle", "fit_misspecified",
    "fit_ols_outcome", "parse_strategy",
    "SandwichResult", "sandwich_variance", "z_quantile",
    "RateSlope", "ReplicationRecord", "ScenarioAbortError", "ScenarioConfig",
    "SimSummary", "fit_rate_slope", "rate_sweep", "run_scenario", "taylor_probe",
    "SolveReport", "SolveSettings", "empirical_moment",
    "jacobian_psi", "jacobian_theta", "solve",
]
