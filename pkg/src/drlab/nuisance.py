"""Nuisance-parameter estimators at controllable quality.

Four ways to produce theta-hat = (theta1-hat, theta2-hat):

* exact parametric fits (logistic MLE for the propensity, OLS for the
  treated-outcome model), converging at the root-n rate;
* ``degrade``, which manufactures an estimator with exactly known error
  ``c * n**(-alpha)`` around the true value, so the rate exponent alpha is
  under direct experimental control;
* misspecified fits that drop the covariate and converge to a wrong limit;
* the oracle, plugging in the truth.

Strategies are selected by a compact string (see ``parse_strategy``) so
simulation configs and the CLI can name them declaratively.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._linalg import SingularMatrixError, solve_pivoted
from .data import Dataset
from .moments import MomentFunction, expit

SCORE_TOL = 1e-10
MAX_ITER = 100
MAX_HALVINGS = 30
SEPARATION_NORM = 1e3
SATURATION_W = 1e-9
OLS_RTOL = 1e-10

STRATEGY_GRAMMAR = (
    '"oracle" | "mle" | "degraded:alpha=<float>,mode=<fixed|random>,c=<float>" | '
    '"misspecified:<propensity|outcome|both>" | "fixed:<v1,v2,...>"'
)


class SeparationError(RuntimeError):
    """The logistic MLE diverged (separated data or iteration budget hit)."""


@dataclass(frozen=True)
class NuisanceFit:
    """An estimated nuisance vector with provenance metadata."""

    theta: np.ndarray
    method: str  # oracle | mle | ols | degraded | misspecified | fixed
    alpha: float | None = None
    converged: bool = True
    iterations: int = 0

    def __post_init__(self) -> None:
        theta = np.atleast_1d(np.asarray(self.theta, dtype=float))
        object.__setattr__(self, "theta", theta)
        if not np.isfinite(theta).all():
            raise ValueError("theta must be finite")
        if self.alpha is not None and not (0.0 < self.alpha <= 0.5):
            raise ValueError(f"alpha must lie in (0, 0.5], got {self.alpha}")


@dataclass(frozen=True)
class DegradeSpec:
    """Recipe for a constructed rate-n^(-alpha) estimator around theta*."""

    alpha: float
    mode: str  # "fixed" | "random"
    c: float = 1.0
    direction: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not (0.0 < self.alpha <= 0.5):
            raise ValueError(f"alpha ∈ (0, 0.5] required, got {self.alpha}")
        if self.mode not in ("fixed", "random"):
            raise ValueError(f"mode must be 'fixed' or 'random', got {self.mode!r}")
        if self.c < 0:
            raise ValueError(f"scale c must be nonnegative, got {self.c}")
        if self.direction is not None:
            d = np.atleast_1d(np.asarray(self.direction, dtype=float))
            object.__setattr__(self, "direction", d)
            if abs(np.linalg.norm(d) - 1.0) > 1e-9:
                raise ValueError("direction must be a unit vector")
        elif self.mode == "fixed" and self.c > 0:
            raise ValueError("fixed-mode degradation needs a direction")


def _embed(coef: np.ndarray, cols: tuple[int, ...], p: int) -> np.ndarray:
    theta = np.zeros(p)
    theta[list(cols)] = coef
    return theta


def fit_logistic_mle(
    data: Dataset,
    feature_selector: tuple[int, ...] | None = None,
) -> NuisanceFit:
    """Logistic regression of the treatment on (selected columns of) x.

    Damped Newton-Raphson on the mean score, run until the score sup-norm
    drops below 1e-10. Separation raises: either the parameter norm escapes
    past 1e3 during iteration, or the score converges with every fitted
    probability saturated at 0/1 (a perfect fit, so the MLE does not exist).
    A singular information matrix raises
    :class:`~drlab._linalg.SingularMatrixError`.
    """
    cols = tuple(range(data.p)) if feature_selector is None else tuple(feature_selector)
    xs = data.x[:, list(cols)]
    n, q = xs.shape
    if n < q + 1:
        raise ValueError(f"need at least {q + 1} rows to fit {q} coefficients, got {n}")
    if not (np.any(data.a == 1.0) and np.any(data.a == 0.0)):
        raise SeparationError("both treatment classes must be present")

    theta = np.zeros(q)
    prob = expit(xs @ theta)
    score = xs.T @ (data.a - prob) / n
    norm = float(np.max(np.abs(score)))
    for it in range(1, MAX_ITER + 1):
        if norm < SCORE_TOL:
            if float(np.max(prob * (1.0 - prob))) < SATURATION_W:
                raise SeparationError(
                    "every fitted probability is saturated at 0 or 1; "
                    "the data are separated and the MLE does not exist"
                )
            return NuisanceFit(
                theta=_embed(theta, cols, data.p), method="mle",
                converged=True, iterations=it - 1,
            )
        w = prob * (1.0 - prob)
        info = (xs * w[:, None]).T @ xs / n
        try:
            step = solve_pivoted(info, score)
        except SingularMatrixError as exc:
            raise SingularMatrixError(f"singular information matrix: {exc}") from exc
        scale = 1.0
        for _ in range(MAX_HALVINGS + 1):
            cand = theta + scale * step
            cand_prob = expit(xs @ cand)
            cand_score = xs.T @ (data.a - cand_prob) / n
            cand_norm = float(np.max(np.abs(cand_score)))
            if cand_norm < norm or cand_norm < SCORE_TOL:
                break
            scale *= 0.5
        else:
            raise SeparationError("step-halving budget exhausted in logistic fit")
        theta, prob, score, norm = cand, cand_prob, cand_score, cand_norm
        if np.linalg.norm(theta) > SEPARATION_NORM:
            raise SeparationError(
                f"parameter norm exceeded {SEPARATION_NORM:g}; data are (quasi-)separated"
            )
    raise SeparationError(f"logistic fit did not converge in {MAX_ITER} iterations")


def _ols(xs: np.ndarray, y: np.ndarray) -> np.ndarray:
    n = xs.shape[0]
    gram = xs.T @ xs / n
    rhs = xs.T @ y / n
    try:
        return solve_pivoted(gram, rhs, rtol=OLS_RTOL)
    except SingularMatrixError as exc:
        raise SingularMatrixError(f"rank-deficient design matrix: {exc}") from exc


def fit_ols_outcome(data: Dataset, on_treated_only: bool = True) -> NuisanceFit:
    """Least-squares fit of the outcome on x, optionally on treated rows only."""
    if on_treated_only:
        keep = data.a == 1.0
        if not np.any(keep):
            raise ValueError("no treated rows to fit the outcome model on")
        xs, y = data.x[keep], data.y[keep]
    else:
        xs, y = data.x, data.y
    return NuisanceFit(theta=_ols(xs, y), method="ols", converged=True, iterations=0)


def degrade(
    theta_star: np.ndarray,
    n: int,
    spec: DegradeSpec,
    stream: np.random.Generator | None = None,
) -> NuisanceFit:
    """Constructed estimator theta* + c * n^(-alpha) * D.

    In fixed mode D is the configured unit direction and the output is a
    deterministic function of (theta*, n, spec); in random mode D is drawn
    uniformly from the unit sphere, one draw per call. Either way the error
    norm is exactly c * n^(-alpha), so n^(1/4) (theta-hat - theta*) is
    bounded precisely when alpha >= 1/4.
    """
    theta_star = np.atleast_1d(np.asarray(theta_star, dtype=float))
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    k = theta_star.size
    if k == 0 or spec.c == 0.0:
        return NuisanceFit(theta=theta_star.copy(), method="degraded", alpha=spec.alpha)
    if spec.mode == "fixed":
        direction = spec.direction
        if direction.size != k:
            raise ValueError(f"direction has length {direction.size}, expected {k}")
    else:
        if stream is None:
            raise ValueError("random-mode degradation needs an rng stream")
        g = stream.standard_normal(k)
        direction = g / np.linalg.norm(g)
    theta = theta_star + spec.c * float(n) ** (-spec.alpha) * direction
    return NuisanceFit(theta=theta, method="degraded", alpha=spec.alpha)


def fit_misspecified(data: Dataset, which: str) -> NuisanceFit:
    """Intercept-only fit of one model, converging to a wrong limit.

    ``which="propensity"`` fits treatment by an intercept-only logistic model
    (its MLE is the logit of the treated fraction); ``which="outcome"`` fits
    the mean outcome among the treated. The dropped-covariate slots are zero.
    """
    if which == "propensity":
        fit = fit_logistic_mle(data, feature_selector=(0,))
        return NuisanceFit(
            theta=fit.theta, method="misspecified",
            converged=fit.converged, iterations=fit.iterations,
        )
    if which == "outcome":
        keep = data.a == 1.0
        if not np.any(keep):
            raise ValueError("no treated rows to fit the outcome model on")
        coef = _ols(data.x[keep][:, :1], data.y[keep])
        return NuisanceFit(theta=_embed(coef, (0,), data.p), method="misspecified")
    raise ValueError(f"which must be 'propensity' or 'outcome', got {which!r}")


@dataclass(frozen=True)
class Strategy:
    """Parsed nuisance strategy: how theta-hat is produced for a scenario."""

    kind: str
    alpha: float | None = None
    mode: str = "random"
    c: float = 1.0
    which: str | None = None
    values: tuple[float, ...] | None = None

    @property
    def needs_truth(self) -> bool:
        return self.kind in ("oracle", "degraded")


def parse_strategy(text: str) -> Strategy:
    """Parse a nuisance strategy string.

    Grammar: "oracle" | "mle" | "degraded:alpha=<float>,mode=<fixed|random>,
    c=<float>" | "misspecified:<propensity|outcome|both>" | "fixed:<v1,...>".
    """
    text = text.strip()
    head, _, rest = text.partition(":")
    if head == "oracle" or head == "mle":
        if rest:
            raise ValueError(f"strategy {head!r} takes no parameters, got {text!r}")
        return Strategy(kind=head)
    if head == "degraded":
        alpha, mode, c = None, "random", 1.0
        for item in filter(None, (s.strip() for s in rest.split(","))):
            key, eq, val = item.partition("=")
            if not eq:
                raise ValueError(f"malformed degraded parameter {item!r} in {text!r}")
            if key == "alpha":
                alpha = float(val)
            elif key == "mode":
                mode = val
            elif key == "c":
                c = float(val)
            else:
                raise ValueError(f"unknown degraded parameter {key!r} in {text!r}")
        if alpha is None:
            raise ValueError(f"degraded strategy requires alpha: {text!r}")
        if not (0.0 < alpha <= 0.5):
            raise ValueError(f"alpha ∈ (0, 0.5] required, got {alpha}")
        if mode not in ("fixed", "random"):
            raise ValueError(f"mode must be 'fixed' or 'random', got {mode!r}")
        if c < 0:
            raise ValueError(f"scale c must be nonnegative, got {c}")
        return Strategy(kind="degraded", alpha=alpha, mode=mode, c=c)
    if head == "misspecified":
        if rest not in ("propensity", "outcome", "both"):
            raise ValueError(
                f"misspecified strategy needs propensity|outcome|both, got {text!r}"
            )
        return Strategy(kind="misspecified", which=rest)
    if head == "fixed":
        try:
            values = tuple(float(v) for v in rest.split(",")) if rest else ()
        except ValueError:
            raise ValueError(f"fixed strategy needs numeric values, got {text!r}") from None
        return Strategy(kind="fixed", values=values)
    raise ValueError(f"unknown nuisance strategy {text!r}; expected {STRATEGY_GRAMMAR}")


def default_fixed_direction(moment: MomentFunction) -> np.ndarray:
    """Unit direction for fixed-mode degradation: equal weight on the
    intercept slot of each nuisance block.

    A doubly robust moment is exactly insensitive to an error confined to a
    single block, so the worst-case deterministic error must perturb both
    blocks at once; the intercepts are the natural representatives.
    """
    slots = [idx[0] for idx in (moment.split.idx1, moment.split.idx2) if idx]
    if not slots:
        raise ValueError(f"moment {moment.name!r} has no nuisance parameters to degrade")
    direction = np.zeros(moment.k)
    direction[slots] = 1.0
    return direction / np.linalg.norm(direction)


def apply_strategy(
    strategy: Strategy,
    moment: MomentFunction,
    data: Dataset,
    theta_star: np.ndarray | None,
    stream: np.random.Generator | None = None,
) -> NuisanceFit:
    """Produce theta-hat for a moment function according to a strategy.

    theta_star is the true nuisance vector in the moment's layout; it is
    required by the oracle and degraded strategies and ignored otherwise.
    """
    idx1, idx2 = moment.split.idx1, moment.split.idx2
    if moment.k == 0:
        return NuisanceFit(theta=np.zeros(0), method=strategy.kind)
    if strategy.needs_truth:
        if theta_star is None:
            raise ValueError(
                f"strategy {strategy.kind!r} requires the true nuisance values"
            )
        theta_star = np.atleast_1d(np.asarray(theta_star, dtype=float))
        if theta_star.size != moment.k:
            raise ValueError(f"theta_star has length {theta_star.size}, expected {moment.k}")

    if strategy.kind == "oracle":
        return NuisanceFit(theta=theta_star.copy(), method="oracle")

    if strategy.kind == "degraded":
        direction = None
        if strategy.mode == "fixed" and strategy.c > 0:
            direction = default_fixed_direction(moment)
        spec = DegradeSpec(
            alpha=strategy.alpha, mode=strategy.mode, c=strategy.c, direction=direction
        )
        return degrade(theta_star, data.n, spec, stream)

    if strategy.kind == "fixed":
        values = np.asarray(strategy.values, dtype=float)
        if values.size != moment.k:
            raise ValueError(
                f"fixed strategy supplies {values.size} values, moment needs {moment.k}"
            )
        return NuisanceFit(theta=values, method="fixed")

    if strategy.kind in ("mle", "misspecified"):
        wrong1 = strategy.kind == "misspecified" and strategy.which in ("propensity", "both")
        wrong2 = strategy.kind == "misspecified" and strategy.which in ("outcome", "both")
        iterations = 0
        theta1 = np.zeros(0)
        if idx1:
            fit1 = fit_misspecified(data, "propensity") if wrong1 else fit_logistic_mle(data)
            theta1, iterations = fit1.theta, fit1.iterations
        theta2 = np.zeros(0)
        if idx2:
            fit2 = fit_misspecified(data, "outcome") if wrong2 else fit_ols_outcome(data)
            theta2 = fit2.theta
        return NuisanceFit(
            theta=moment.assemble_theta(theta1, theta2),
            method=strategy.kind,
            iterations=iterations,
        )

    raise ValueError(f"unhandled strategy kind {strategy.kind!r}")
