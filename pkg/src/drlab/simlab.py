"""Monte Carlo engine: desk-scale experiments on plug-in Z-estimators.

A scenario fixes a DGP, a moment function, a nuisance strategy, a grid of
sample sizes, and a replication count. Each replication draws its own data,
fits the nuisance, solves for psi-hat, and records the sandwich CI together
with diagnostics:

* ``theta_err``, the realized nuisance error norm;
* ``taylor_term``, the probe n^(1/4) * max |P_n dU/dtheta| at the estimates,
  the empirical size of the expansion term that must vanish for nuisance
  estimation to be ignorable. The probe is evaluated at (psi-hat, theta-hat)
  as a proxy for the mean-value intermediate points, which are not
  computable but share the same limit.

Replications are independent work items with RNG substreams pre-assigned by
(base_seed, scenario, n, rep), so results are identical for any worker
count. Failed replications (separation, positivity violations, singular
systems, non-convergence) are excluded from aggregates and counted; a
scenario aborts only when more than 5% of a cell's replications fail.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import dgp as dgplib
from ._linalg import SingularMatrixError
from .data import Dataset
from .moments import MomentFunction, PositivityError, make_moment
from .nuisance import SeparationError, Strategy, apply_strategy, parse_strategy
from .sandwich import sandwich_variance
from .zsolver import SolveSettings, jacobian_theta, solve

FAILURE_BUDGET = 0.05


class ScenarioAbortError(RuntimeError):
    """More than the tolerated share of replications failed in one cell."""


@dataclass(frozen=True)
class ScenarioConfig:
    """Declarative description of one simulation scenario."""

    scenario_id: str
    dgp: dgplib.DGPSpec
    moment: str
    nuisance: str
    n_grid: tuple[int, ...]
    reps: int
    ci_level: float = 0.95
    base_seed: int = 0
    probe_taylor: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "n_grid", tuple(int(n) for n in self.n_grid))
        if not self.scenario_id:
            raise ValueError("scenario_id must be nonempty")
        if not self.n_grid or any(n < 1 for n in self.n_grid):
            raise ValueError("n_grid must contain positive sample sizes")
        if any(b >= c for b, c in zip(self.n_grid, self.n_grid[1:])):
            raise ValueError(f"n_grid must be strictly increasing, got {self.n_grid}")
        if self.reps < 1:
            raise ValueError(f"reps must be at least 1, got {self.reps}")
        if not (0.0 < self.ci_level < 1.0):
            raise ValueError(f"ci_level must lie in (0, 1), got {self.ci_level}")
        make_moment(self.moment)      # validates the moment id
        parse_strategy(self.nuisance)  # validates the strategy string


@dataclass(frozen=True)
class ReplicationRecord:
    """One replication's estimate, interval, and diagnostics."""

    scenario_id: str
    n: int
    rep: int
    psi_hat: float
    se: float
    ci_lower: float
    ci_upper: float
    covered: bool
    theta_err: float
    taylor_term: float | None
    converged: bool


@dataclass(frozen=True)
class SummaryRow:
    """Aggregates for one (scenario, n) cell, over converged replications."""

    n: int
    reps: int
    failures: int
    mean_bias: float
    sd_psi: float
    mean_se: float
    se_sd_ratio: float
    coverage: float
    coverage_se: float
    sqrt_n_abs_bias: float
    taylor_median: float | None
    taylor_q90: float | None
    nuisance_rmse: float


@dataclass(frozen=True)
class SimSummary:
    scenario_id: str
    moment: str
    nuisance: str
    ci_level: float
    psi_star: float
    rows: tuple[SummaryRow, ...]


def taylor_probe(
    moment: MomentFunction,
    psi_hat: np.ndarray | float,
    theta: np.ndarray,
    data: Dataset,
) -> float:
    """n^(1/4) times the largest |entry| of P_n dU/dtheta at the estimates.

    Under double robustness with nuisances estimated at rate n^(1/4) or
    faster this quantity drifts to zero; for a non-DR moment it grows like
    n^(1/4). A theta-free moment returns 0 by convention.
    """
    jt = jacobian_theta(moment, psi_hat, theta, data)
    if jt.size == 0:
        return 0.0
    return float(data.n ** 0.25 * np.max(np.abs(jt)))


def _truth_for(moment: MomentFunction, spec: dgplib.DGPSpec) -> tuple[float, np.ndarray]:
    psi_star, theta1_star, theta2_star = dgplib.truth(spec)
    if moment.estimand == "overall_mean":
        psi_star = dgplib.mean_outcome(spec)
    return psi_star, moment.assemble_theta(theta1_star, theta2_star)


_FAILURE_ERRORS = (PositivityError, SeparationError, SingularMatrixError)


def _replicate(
    config: ScenarioConfig,
    moment: MomentFunction,
    strategy: Strategy,
    psi_star: float,
    theta_star: np.ndarray,
    n: int,
    rep: int,
) -> ReplicationRecord:
    stream = dgplib.substream(config.base_seed, config.scenario_id, n, rep)
    data = dgplib.sample(config.dgp, n, stream)
    nan = float("nan")
    theta_err = nan
    try:
        fit = apply_strategy(strategy, moment, data, theta_star, stream)
        theta_err = float(np.linalg.norm(fit.theta - theta_star))
        report = solve(moment, fit, data, SolveSettings())
        if not report.converged:
            raise SeparationError("solver did not converge")
        sw = sandwich_variance(moment, report.psi_hat, fit, data, config.ci_level)
        psi_hat = float(report.psi_hat[0])
        se = float(sw.se[0])
        lo, hi = float(sw.ci_lower[0]), float(sw.ci_upper[0])
        taylor = (
            taylor_probe(moment, report.psi_hat, fit.theta, data)
            if config.probe_taylor else None
        )
        return ReplicationRecord(
            scenario_id=config.scenario_id, n=n, rep=rep,
            psi_hat=psi_hat, se=se, ci_lower=lo, ci_upper=hi,
            covered=bool(lo <= psi_star <= hi),
            theta_err=theta_err, taylor_term=taylor, converged=True,
        )
    except _FAILURE_ERRORS:
        return ReplicationRecord(
            scenario_id=config.scenario_id, n=n, rep=rep,
            psi_hat=nan, se=nan, ci_lower=nan, ci_upper=nan,
            covered=False, theta_err=theta_err, taylor_term=None, converged=False,
        )


def _replicate_chunk(args: tuple[ScenarioConfig, int, int, int]) -> list[ReplicationRecord]:
    config, n, lo, hi = args
    moment = make_moment(config.moment)
    strategy = parse_strategy(config.nuisance)
    psi_star, theta_star = _truth_for(moment, config.dgp)
    return [
        _replicate(config, moment, strategy, psi_star, theta_star, n, rep)
        for rep in range(lo, hi)
    ]


def summarize(
    records: list[ReplicationRecord],
    *,
    scenario_id: str,
    moment: str,
    nuisance: str,
    ci_level: float,
    psi_star: float,
) -> SimSummary:
    """Aggregate replication records into per-n summary rows.

    Aggregates use converged replications only; failures are counted. Raises
    ScenarioAbortError when failures exceed the 5% budget in any cell.
    """
    rows = []
    for n in sorted({r.n for r in records}):
        cell = [r for r in records if r.n == n]
        ok = [r for r in cell if r.converged]
        failures = len(cell) - len(ok)
        if failures > FAILURE_BUDGET * len(cell):
            raise ScenarioAbortError(
                f"scenario {scenario_id!r}, n={n}: {failures}/{len(cell)} replications "
                f"failed, above the {FAILURE_BUDGET:.0%} budget"
            )
        psi = np.array([r.psi_hat for r in ok])
        se = np.array([r.se for r in ok])
        covered = np.array([r.covered for r in ok], dtype=float)
        theta_err = np.array([r.theta_err for r in ok])
        mean_bias = float(psi.mean() - psi_star)
        sd_psi = float(psi.std(ddof=1)) if len(ok) >= 2 else float("nan")
        mean_se = float(se.mean())
        cov = float(covered.mean())
        taylor = [r.taylor_term for r in ok if r.taylor_term is not None]
        rows.append(SummaryRow(
            n=n,
            reps=len(cell),
            failures=failures,
            mean_bias=mean_bias,
            sd_psi=sd_psi,
            mean_se=mean_se,
            se_sd_ratio=mean_se / sd_psi if sd_psi > 0 else float("nan"),
            coverage=cov,
            coverage_se=math.sqrt(cov * (1.0 - cov) / len(ok)) if ok else float("nan"),
            sqrt_n_abs_bias=math.sqrt(n) * abs(mean_bias),
            taylor_median=float(np.median(taylor)) if taylor else None,
            taylor_q90=float(np.quantile(taylor, 0.9)) if taylor else None,
            nuisance_rmse=float(np.sqrt(np.mean(theta_err ** 2))),
        ))
    return SimSummary(
        scenario_id=scenario_id, moment=moment, nuisance=nuisance,
        ci_level=ci_level, psi_star=psi_star, rows=tuple(rows),
    )


def run_scenario(
    config: ScenarioConfig,
    workers: int = 1,
) -> tuple[list[ReplicationRecord], SimSummary]:
    """Run all replications of a scenario and aggregate them.

    The result is bit-identical for any ``workers`` value: every replication
    derives its RNG substream from (base_seed, scenario, n, rep) and records
    are sorted by (n, rep) before aggregation.
    """
    moment = make_moment(config.moment)
    if moment.d != 1:
        raise ValueError("simulation records are defined for scalar-psi moments")
    psi_star, _ = _truth_for(moment, config.dgp)

    chunk = max(1, math.ceil(config.reps / max(1, workers) / 4))
    work = [
        (config, n, lo, min(lo + chunk, config.reps))
        for n in config.n_grid
        for lo in range(0, config.reps, chunk)
    ]
    if workers <= 1:
        chunks = map(_replicate_chunk, work)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_replicate_chunk, work))
    records = [rec for block in chunks for rec in block]
    records.sort(key=lambda r: (r.n, r.rep))
    summary = summarize(
        records,
        scenario_id=config.scenario_id, moment=config.moment,
        nuisance=config.nuisance, ci_level=config.ci_level, psi_star=psi_star,
    )
    return records, summary


def rate_sweep(
    config: ScenarioConfig,
    alphas: list[float],
    workers: int = 1,
) -> dict[float, tuple[list[ReplicationRecord], SimSummary]]:
    """Re-run a scenario across a grid of degradation rates alpha.

    Each alpha uses fixed-direction degradation (deterministic nuisance error
    c * n^(-alpha)), keeping the scale c of the base strategy when that is
    already a degraded one and c = 1 otherwise.
    """
    if not alphas:
        raise ValueError("alpha grid must be nonempty")
    for alpha in alphas:
        if not (0.0 < alpha <= 0.5):
            raise ValueError(f"alpha ∈ (0, 0.5] required, got {alpha}")
    base = parse_strategy(config.nuisance)
    c = base.c if base.kind == "degraded" else 1.0
    out: dict[float, tuple[list[ReplicationRecord], SimSummary]] = {}
    for alpha in alphas:
        variant = replace(
            config,
            scenario_id=f"{config.scenario_id}_a{alpha:g}",
            nuisance=f"degraded:alpha={alpha:g},mode=fixed,c={c:g}",
        )
        out[alpha] = run_scenario(variant, workers=workers)
    return out


@dataclass(frozen=True)
class RateSlope:
    slope: float
    stderr: float


def fit_rate_slope(pairs: list[tuple[float, float]]) -> RateSlope:
    """Least-squares slope of log(rmse) on log(n), with its standard error."""
    if len(pairs) < 3:
        raise ValueError(f"need at least 3 (n, rmse) pairs, got {len(pairs)}")
    ns = np.array([p[0] for p in pairs], dtype=float)
    rmses = np.array([p[1] for p in pairs], dtype=float)
    if np.any(ns <= 0) or np.any(rmses <= 0):
        raise ValueError("all n and rmse values must be positive")
    x = np.log(ns)
    y = np.log(rmses)
    xc = x - x.mean()
    sxx = float(xc @ xc)
    if sxx == 0.0:
        raise ValueError("sample sizes must not all be equal")
    slope = float(xc @ y) / sxx
    resid = y - y.mean() - slope * xc
    dof = len(pairs) - 2
    sigma2 = float(resid @ resid) / dof if dof > 0 else 0.0
    return RateSlope(slope=slope, stderr=math.sqrt(sigma2 / sxx))
