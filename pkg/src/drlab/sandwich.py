"""Sandwich variance of psi-hat that ignores nuisance estimation.

The estimator is bread^{-1} meat bread^{-T} with bread = P_n dU/dpsi and
meat = P_n U U^T, both evaluated at (psi-hat, theta-hat). The meat uses the
plain 1/n average with no degrees-of-freedom correction, matching the
population formula literally. Standard errors are sqrt(diag / n) and the
confidence intervals are symmetric Wald intervals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._linalg import SingularMatrixError, inverse_pivoted
from .data import Dataset
from .moments import MomentFunction, u_rows
from .nuisance import NuisanceFit
from .zsolver import _as_theta, jacobian_psi


@dataclass(frozen=True)
class SandwichResult:
    """Variance estimate, per-coordinate standard errors, and Wald CIs."""

    bread: np.ndarray
    meat: np.ndarray
    vhat: np.ndarray
    se: np.ndarray
    ci_level: float
    ci_lower: np.ndarray
    ci_upper: np.ndarray


# Acklam's rational approximation to the standard normal quantile; the
# refinement step below pushes the error to machine precision.
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def _norm_ppf(p: float) -> float:
    """Standard normal quantile: Acklam's rational approximation (relative
    error ~1.2e-9) followed by one Halley step on Phi(x) - p evaluated with
    erfc, which is accurate to full double precision."""
    if p <= 0.0 or p >= 1.0:
        raise ValueError(f"probability must lie strictly in (0, 1), got {p}")
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        x = ((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
             / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    elif p <= 1.0 - _P_LOW:
        q = p - 0.5
        r = q * q
        x = ((((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
             / (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0))
    else:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        x = -((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
              / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    err = 0.5 * math.erfc(-x / math.sqrt(2.0)) - p
    u = err * math.sqrt(2.0 * math.pi) * math.exp(x * x / 2.0)
    return x - u / (1.0 + x * u / 2.0)


def z_quantile(level: float) -> float:
    """Two-sided standard normal critical value for a confidence level.

    Returns the quantile at 1 - (1 - level)/2; e.g. 1.959964 for level 0.95.
    """
    if not (0.0 < level < 1.0):
        raise ValueError(f"ci level must lie strictly in (0, 1), got {level}")
    return _norm_ppf(0.5 * (1.0 + level))


def sandwich_variance(
    moment: MomentFunction,
    psi_hat: np.ndarray | float,
    theta: NuisanceFit | np.ndarray | None,
    data: Dataset,
    ci_level: float = 0.95,
) -> SandwichResult:
    """Sandwich variance, standard errors, and Wald intervals at psi-hat.

    Raises SingularMatrixError when the bread is singular, i.e. when the
    local identification condition fails: d/dpsi of the mean moment must
    have an inverse for the root to pin psi down.
    """
    psi_hat = np.atleast_1d(np.asarray(psi_hat, dtype=float))
    theta_vec = _as_theta(theta)
    if not (0.0 < ci_level < 1.0):
        raise ValueError(f"ci level must lie strictly in (0, 1), got {ci_level}")

    n = data.n
    bread = jacobian_psi(moment, psi_hat, theta_vec, data)
    vals = u_rows(moment, psi_hat, theta_vec, data)
    meat = vals.T @ vals / n
    try:
        bread_inv = inverse_pivoted(bread)
    except SingularMatrixError as exc:
        raise SingularMatrixError(
            "bread matrix P_n dU/dpsi is singular, so psi is not locally identified "
            f"(d/dpsi of the mean moment must have an inverse): {exc}"
        ) from exc
    vhat = bread_inv @ meat @ bread_inv.T
    vhat = 0.5 * (vhat + vhat.T)
    se = np.sqrt(np.maximum(np.diag(vhat), 0.0) / n)
    z = z_quantile(ci_level)
    return SandwichResult(
        bread=bread,
        meat=meat,
        vhat=vhat,
        se=se,
        ci_level=ci_level,
        ci_lower=psi_hat - z * se,
        ci_upper=psi_hat + z * se,
    )
