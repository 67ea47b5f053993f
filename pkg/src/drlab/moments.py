"""Moment functions U(psi, theta; observation) for plug-in Z-estimation.

A moment function pairs an evaluator with its dimensions: psi (and U) live in
R^d, the nuisance vector theta = (theta1, theta2) in R^k, where theta1 holds
propensity-model parameters and theta2 outcome-model parameters. Shipped
instances:

``aipw``
    Augmented inverse probability weighting for the mean outcome under
    treatment. Doubly robust: the population moment stays zero when either
    nuisance block (not necessarily both) is at its true value.
``ipw``
    Plain inverse probability weighting. Not doubly robust; serves as the
    counter-example whose naive sandwich variance is inconsistent.
``or``
    Outcome-regression (g-computation) plug-in mean.
``mean``
    theta-free sample mean, the textbook sanity anchor.

All evaluators are pure and vectorized over a :class:`~drlab.data.Dataset`;
single-observation helpers (`aipw_moment`, `ipw_moment`, `or_moment`) expose
the same formulas one row at a time.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .data import Dataset, Observation

PROPENSITY_FLOOR = 1e-6

_EPS_CBRT = float(np.finfo(float).eps) ** (1.0 / 3.0)


class PositivityError(RuntimeError):
    """The fitted probability of an observation's own treatment arm is
    numerically zero, so inverse weights are unusable."""

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message)
        self.row = row


def expit(z: np.ndarray | float) -> np.ndarray | float:
    """Numerically stable logistic function."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class NuisanceSplit:
    """Index partition of theta into theta1 (propensity) and theta2 (outcome)."""

    idx1: tuple[int, ...]
    idx2: tuple[int, ...]

    def __post_init__(self) -> None:
        seen = set(self.idx1) | set(self.idx2)
        if len(self.idx1) + len(self.idx2) != len(seen):
            raise ValueError("theta1/theta2 index blocks overlap")
        if seen != set(range(len(seen))):
            raise ValueError("theta blocks must cover 0..k-1 without gaps")

    @property
    def k(self) -> int:
        return len(self.idx1) + len(self.idx2)


@dataclass(frozen=True)
class MomentFunction:
    """A vector estimating function with optional analytic derivatives.

    Attributes
    ----------
    name : str
        Identifier used in configs and CLI flags.
    d : int
        Dimension of psi and of U.
    k : int
        Dimension of theta.
    split : NuisanceSplit
        Which theta coordinates belong to the propensity / outcome blocks.
    is_doubly_robust : bool
        Whether the population moment is insensitive to one wrong block.
    u : callable
        ``u(psi, theta, data) -> (n, d)`` per-row moment values.
    du_dpsi, du_dtheta : callable or None
        Per-row analytic derivatives ``(n, d, d)`` / ``(n, d, k)``. When
        absent, consumers fall back to central finite differences.
    use_mean_start : bool
        Whether the sample mean of y is a sensible default solver start.
    estimand : str
        What the root estimates under the synthetic DGP: the mean outcome
        under treatment ("treated_mean") or the raw mean of y
        ("overall_mean"). Simulation summaries judge bias and coverage
        against the matching truth.
    """

    name: str
    d: int
    k: int
    split: NuisanceSplit
    is_doubly_robust: bool
    u: Callable[[np.ndarray, np.ndarray, Dataset], np.ndarray]
    du_dpsi: Callable[[np.ndarray, np.ndarray, Dataset], np.ndarray] | None = None
    du_dtheta: Callable[[np.ndarray, np.ndarray, Dataset], np.ndarray] | None = None
    use_mean_start: bool = True
    estimand: str = "treated_mean"

    def theta1(self, theta: np.ndarray) -> np.ndarray:
        return np.asarray(theta, dtype=float)[list(self.split.idx1)]

    def theta2(self, theta: np.ndarray) -> np.ndarray:
        return np.asarray(theta, dtype=float)[list(self.split.idx2)]

    def assemble_theta(self, theta1: np.ndarray, theta2: np.ndarray) -> np.ndarray:
        """Pack block values into a full theta vector in this moment's layout."""
        theta = np.zeros(self.k)
        theta[list(self.split.idx1)] = np.asarray(theta1, dtype=float)[: len(self.split.idx1)]
        theta[list(self.split.idx2)] = np.asarray(theta2, dtype=float)[: len(self.split.idx2)]
        return theta


def _check_positivity(e: np.ndarray, a: np.ndarray) -> None:
    # The dangerous cases are rows whose own arm has vanishing probability:
    # treated rows with e ~ 0, control rows with e ~ 1.
    bad = ((a == 1.0) & (e < PROPENSITY_FLOOR)) | ((a == 0.0) & (e > 1.0 - PROPENSITY_FLOOR))
    if np.any(bad):
        row = int(np.argmax(bad))
        raise PositivityError(
            f"positivity violation at row {row}: propensity of the observed arm "
            f"below {PROPENSITY_FLOOR:g}",
            row=row,
        )


def aipw_moment(psi: float, theta1: np.ndarray, theta2: np.ndarray, obs: Observation) -> float:
    """Doubly robust moment for the mean outcome under treatment.

    U = a*y/e(x) - ((a - e(x))/e(x)) * m(x) - psi with e(x) = expit(theta1'x)
    and m(x) = theta2'x, evaluated as a*(y - m)/e + m - psi so that control
    rows never divide by e (their U value is exactly m - psi).
    """
    e = expit(float(np.dot(theta1, obs.x)))
    if (obs.a == 1 and e < PROPENSITY_FLOOR) or (obs.a == 0 and e > 1.0 - PROPENSITY_FLOOR):
        raise PositivityError(
            f"positivity violation: propensity of the observed arm below {PROPENSITY_FLOOR:g}"
        )
    m = float(np.dot(theta2, obs.x))
    if obs.a == 0:
        return m - psi
    return (obs.y - m) / e + m - psi


def ipw_moment(psi: float, theta1: np.ndarray, obs: Observation) -> float:
    """Inverse-probability-weighted moment U = a*y/e(x) - psi (not DR)."""
    e = expit(float(np.dot(theta1, obs.x)))
    if (obs.a == 1 and e < PROPENSITY_FLOOR) or (obs.a == 0 and e > 1.0 - PROPENSITY_FLOOR):
        raise PositivityError(
            f"positivity violation: propensity of the observed arm below {PROPENSITY_FLOOR:g}"
        )
    if obs.a == 0:
        return 0.0 - psi
    return obs.y / e - psi


def or_moment(psi: float, theta2: np.ndarray, obs: Observation) -> float:
    """Outcome-regression plug-in moment U = m(x) - psi."""
    return float(np.dot(theta2, obs.x)) - psi


def _safe_propensity(e: np.ndarray, a: np.ndarray) -> np.ndarray:
    # control rows never divide by e; a guarded denominator avoids 0/0 when
    # an extreme theta1 underflows e to exactly zero on a control row
    return np.where(a == 1.0, e, 1.0)


def _make_aipw(p: int) -> MomentFunction:
    split = NuisanceSplit(idx1=tuple(range(p)), idx2=tuple(range(p, 2 * p)))

    def u(psi, theta, data):
        e = expit(data.x @ theta[:p])
        _check_positivity(e, data.a)
        m = data.x @ theta[p:]
        # a*y/e - ((a - e)/e)*m - psi, arranged as a*(y - m)/e + m - psi
        vals = data.a * (data.y - m) / _safe_propensity(e, data.a) + m - psi[0]
        return vals[:, None]

    def du_dpsi(psi, theta, data):
        return np.full((data.n, 1, 1), -1.0)

    def du_dtheta(psi, theta, data):
        e = expit(data.x @ theta[:p])
        _check_positivity(e, data.a)
        m = data.x @ theta[p:]
        e_safe = _safe_propensity(e, data.a)
        out = np.empty((data.n, 1, 2 * p))
        # d/dtheta1_j = -a (y - m) (1-e)/e x_j ; d/dtheta2_j = (1 - a/e) x_j
        out[:, 0, :p] = (-data.a * (data.y - m) * (1.0 - e) / e_safe)[:, None] * data.x
        out[:, 0, p:] = (1.0 - data.a / e_safe)[:, None] * data.x
        return out

    return MomentFunction(
        name="aipw", d=1, k=2 * p, split=split, is_doubly_robust=True,
        u=u, du_dpsi=du_dpsi, du_dtheta=du_dtheta,
    )


def _make_ipw(p: int) -> MomentFunction:
    split = NuisanceSplit(idx1=tuple(range(p)), idx2=())

    def u(psi, theta, data):
        e = expit(data.x @ theta)
        _check_positivity(e, data.a)
        vals = data.a * data.y / _safe_propensity(e, data.a) - psi[0]
        return vals[:, None]

    def du_dpsi(psi, theta, data):
        return np.full((data.n, 1, 1), -1.0)

    def du_dtheta(psi, theta, data):
        e = expit(data.x @ theta)
        _check_positivity(e, data.a)
        weight = -data.a * data.y * (1.0 - e) / _safe_propensity(e, data.a)
        return (weight[:, None] * data.x)[:, None, :]

    return MomentFunction(
        name="ipw", d=1, k=p, split=split, is_doubly_robust=False,
        u=u, du_dpsi=du_dpsi, du_dtheta=du_dtheta,
    )


def _make_or(p: int) -> MomentFunction:
    split = NuisanceSplit(idx1=(), idx2=tuple(range(p)))

    def u(psi, theta, data):
        return (data.x @ theta - psi[0])[:, None]

    def du_dpsi(psi, theta, data):
        return np.full((data.n, 1, 1), -1.0)

    def du_dtheta(psi, theta, data):
        return data.x[:, None, :].copy()

    return MomentFunction(
        name="or", d=1, k=p, split=split, is_doubly_robust=False,
        u=u, du_dpsi=du_dpsi, du_dtheta=du_dtheta,
    )


def _make_mean(p: int) -> MomentFunction:
    split = NuisanceSplit(idx1=(), idx2=())

    def u(psi, theta, data):
        return (data.y - psi[0])[:, None]

    def du_dpsi(psi, theta, data):
        return np.full((data.n, 1, 1), -1.0)

    def du_dtheta(psi, theta, data):
        return np.zeros((data.n, 1, 0))

    return MomentFunction(
        name="mean", d=1, k=0, split=split, is_doubly_robust=True,  # vacuously
        u=u, du_dpsi=du_dpsi, du_dtheta=du_dtheta, estimand="overall_mean",
    )


_FACTORIES = {"aipw": _make_aipw, "ipw": _make_ipw, "or": _make_or, "mean": _make_mean}

MOMENT_IDS = tuple(sorted(_FACTORIES))


def make_moment(name: str, p: int = 2) -> MomentFunction:
    """Build a shipped moment function for covariate dimension p."""
    try:
        factory = _FACTORIES[name]
    except KeyError:
        raise ValueError(f"unknown moment {name!r}; expected one of {MOMENT_IDS}") from None
    if p < 1:
        raise ValueError("covariate dimension p must be >= 1")
    return factory(p)


def u_rows(moment: MomentFunction, psi: np.ndarray, theta: np.ndarray, data: Dataset) -> np.ndarray:
    """Per-row moment values, shape (n, d)."""
    psi = np.atleast_1d(np.asarray(psi, dtype=float))
    theta = np.atleast_1d(np.asarray(theta, dtype=float)) if np.size(theta) else np.zeros(0)
    vals = np.asarray(moment.u(psi, theta, data), dtype=float)
    if vals.shape != (data.n, moment.d):
        raise ValueError(
            f"moment {moment.name!r} returned shape {vals.shape}, expected {(data.n, moment.d)}"
        )
    return vals


def _fd_steps(center: np.ndarray, scale: float) -> np.ndarray:
    return scale * np.maximum(1.0, np.abs(center))


def du_dpsi_rows(
    moment: MomentFunction,
    psi: np.ndarray,
    theta: np.ndarray,
    data: Dataset,
    fd_scale: float = _EPS_CBRT,
) -> np.ndarray:
    """Per-row dU/dpsi, shape (n, d, d); central differences when no analytic form."""
    psi = np.atleast_1d(np.asarray(psi, dtype=float))
    if moment.du_dpsi is not None:
        out = np.asarray(moment.du_dpsi(psi, np.asarray(theta, dtype=float), data), dtype=float)
    else:
        out = np.empty((data.n, moment.d, moment.d))
        h = _fd_steps(psi, fd_scale)
        for j in range(moment.d):
            shift = np.zeros_like(psi)
            shift[j] = h[j]
            out[:, :, j] = (
                u_rows(moment, psi + shift, theta, data)
                - u_rows(moment, psi - shift, theta, data)
            ) / (2.0 * h[j])
    if not np.isfinite(out).all():
        raise ValueError("non-finite entries in dU/dpsi")
    return out


def du_dtheta_rows(
    moment: MomentFunction,
    psi: np.ndarray,
    theta: np.ndarray,
    data: Dataset,
    fd_scale: float = _EPS_CBRT,
) -> np.ndarray:
    """Per-row dU/dtheta, shape (n, d, k); central differences when no analytic form."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float)) if np.size(theta) else np.zeros(0)
    if moment.k == 0:
        return np.zeros((data.n, moment.d, 0))
    if moment.du_dtheta is not None:
        out = np.asarray(moment.du_dtheta(np.atleast_1d(psi), theta, data), dtype=float)
    else:
        out = np.empty((data.n, moment.d, moment.k))
        h = _fd_steps(theta, fd_scale)
        for j in range(moment.k):
            shift = np.zeros_like(theta)
            shift[j] = h[j]
            out[:, :, j] = (
                u_rows(moment, psi, theta + shift, data)
                - u_rows(moment, psi, theta - shift, data)
            ) / (2.0 * h[j])
    if not np.isfinite(out).all():
        raise ValueError("non-finite entries in dU/dtheta")
    return out


@dataclass(frozen=True)
class DrDerivativeCheck:
    """Monte Carlo estimate of E dU_q/dtheta_p at (psi*, theta*) with its error bars."""

    estimate: np.ndarray  # (d, k)
    mc_se: np.ndarray     # (d, k)
    n_draws: int

    @property
    def z_scores(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.mc_se > 0, self.estimate / self.mc_se, 0.0)

    @property
    def max_abs_z(self) -> float:
        return float(np.max(np.abs(self.z_scores))) if self.estimate.size else 0.0


def verify_dr_derivative(
    moment: MomentFunction,
    dgp_spec,
    psi_star: np.ndarray | float,
    theta_star: np.ndarray,
    m_draws: int,
    stream: np.random.Generator | None = None,
) -> DrDerivativeCheck:
    """Estimate E dU_q/dtheta_p at the truth by Monte Carlo.

    For a doubly robust moment every entry should sit within Monte Carlo
    error of zero; for a non-DR moment at least one entry stays away from
    zero no matter how many draws are used.

    Parameters
    ----------
    dgp_spec : drlab.dgp.DGPSpec
        Data-generating process to draw from.
    psi_star, theta_star : array-like
        True target and nuisance values of the DGP.
    m_draws : int
        Number of i.i.d. draws; at least 1000.
    stream : numpy Generator, optional
        Source of randomness; a fixed default stream is used when omitted.
    """
    from . import dgp as _dgp  # local import: dgp depends on data only

    if m_draws < 1000:
        raise ValueError(f"m_draws must be at least 1000, got {m_draws}")
    if stream is None:
        stream = _dgp.substream(0, "verify_dr_derivative")
    data = _dgp.sample(dgp_spec, m_draws, stream)
    if moment.k == 0:
        return DrDerivativeCheck(np.zeros((moment.d, 0)), np.zeros((moment.d, 0)), m_draws)
    rows = du_dtheta_rows(moment, np.atleast_1d(psi_star), theta_star, data)
    est = rows.mean(axis=0)
    se = rows.std(axis=0, ddof=1) / np.sqrt(m_draws)
    return DrDerivativeCheck(estimate=est, mc_se=se, n_draws=m_draws)


def rescaled(moment: MomentFunction, matrix: np.ndarray) -> MomentFunction:
    """Return the moment M @ U for a fixed invertible d-by-d matrix M.

    Rescaling leaves the root psi-hat and the sandwich variance unchanged;
    tests use this to pin down both invariances.
    """
    matrix = np.asarray(matrix, dtype=float)
    if matrix.shape != (moment.d, moment.d):
        raise ValueError(f"matrix must be {(moment.d, moment.d)}, got {matrix.shape}")

    base_u, base_dpsi, base_dtheta = moment.u, moment.du_dpsi, moment.du_dtheta

    def u(psi, theta, data):
        return base_u(psi, theta, data) @ matrix.T

    du_dpsi = None
    if base_dpsi is not None:
        def du_dpsi(psi, theta, data):
            return np.einsum("qr,nrs->nqs", matrix, base_dpsi(psi, theta, data))

    du_dtheta = None
    if base_dtheta is not None:
        def du_dtheta(psi, theta, data):
            return np.einsum("qr,nrs->nqs", matrix, base_dtheta(psi, theta, data))

    return replace(
        moment, name=f"{moment.name}(rescaled)", u=u, du_dpsi=du_dpsi, du_dtheta=du_dtheta
    )
