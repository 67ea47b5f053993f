"""Generic Z-estimation: solve the empirical moment equation for psi.

Given a moment function, a dataset, and a plugged-in nuisance estimate, the
solver finds the root of the empirical average of U(psi, theta-hat) by damped
Newton iteration. The Jacobian in psi is analytic when the moment provides
derivatives and central finite differences otherwise. At least one Newton
update is always taken, so a moment affine in psi converges in exactly one
iteration from any start.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._linalg import solve_pivoted
from .data import Dataset
from .moments import MomentFunction, du_dpsi_rows, du_dtheta_rows, u_rows
from .nuisance import NuisanceFit

_EPS_CBRT = float(np.finfo(float).eps) ** (1.0 / 3.0)


@dataclass(frozen=True)
class SolveSettings:
    """Newton solver controls.

    ``fd_step_scale`` sets the relative central-difference step,
    h_j = fd_step_scale * max(1, |psi_j|); the default is the cube root of
    machine precision, the standard optimal-order choice for central
    differences. ``psi0=None`` starts at the sample mean of y for shipped
    moments and at zero otherwise.
    """

    tol: float = 1e-10
    max_iter: int = 50
    max_halvings: int = 30
    fd_step_scale: float = _EPS_CBRT
    psi0: np.ndarray | float | None = None

    def __post_init__(self) -> None:
        if self.tol <= 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1 or self.max_halvings < 1:
            raise ValueError("iteration and halving budgets must be at least 1")


@dataclass(frozen=True)
class SolveReport:
    """Solution and diagnostics of one Z-estimation solve."""

    psi_hat: np.ndarray
    residual_norm: float
    iterations: int
    jacobian_at_solution: np.ndarray
    converged: bool


def _as_theta(theta: NuisanceFit | np.ndarray | None) -> np.ndarray:
    if theta is None:
        return np.zeros(0)
    if isinstance(theta, NuisanceFit):
        return theta.theta
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    return theta


def empirical_moment(
    moment: MomentFunction,
    psi: np.ndarray | float,
    theta: NuisanceFit | np.ndarray | None,
    data: Dataset,
) -> np.ndarray:
    """Arithmetic mean of U over the rows of the dataset, shape (d,)."""
    return u_rows(moment, np.atleast_1d(psi), _as_theta(theta), data).mean(axis=0)


def jacobian_psi(
    moment: MomentFunction,
    psi: np.ndarray | float,
    theta: NuisanceFit | np.ndarray | None,
    data: Dataset,
    fd_step_scale: float = _EPS_CBRT,
) -> np.ndarray:
    """d-by-d Jacobian of psi -> P_n U(psi, theta)."""
    rows = du_dpsi_rows(moment, np.atleast_1d(psi), _as_theta(theta), data, fd_step_scale)
    return rows.mean(axis=0)


def jacobian_theta(
    moment: MomentFunction,
    psi: np.ndarray | float,
    theta: NuisanceFit | np.ndarray | None,
    data: Dataset,
    fd_step_scale: float = _EPS_CBRT,
) -> np.ndarray:
    """d-by-k Jacobian of theta -> P_n U(psi, theta); shape (d, 0) when k=0."""
    rows = du_dtheta_rows(moment, np.atleast_1d(psi), _as_theta(theta), data, fd_step_scale)
    return rows.mean(axis=0)


def default_start(moment: MomentFunction, data: Dataset) -> np.ndarray:
    if moment.use_mean_start:
        return np.full(moment.d, float(data.y.mean()))
    return np.zeros(moment.d)


def solve(
    moment: MomentFunction,
    theta: NuisanceFit | np.ndarray | None,
    data: Dataset,
    settings: SolveSettings | None = None,
) -> SolveReport:
    """Find psi-hat with P_n U(psi-hat, theta) = 0 by damped Newton iteration.

    Each iteration solves the d-by-d Newton system and backtracks by halving
    the step until the residual sup-norm decreases (or falls below ``tol``).
    If the iteration or halving budget runs out, the best iterate seen is
    returned with ``converged=False`` instead of raising, so Monte Carlo
    callers can count the failure and move on.
    """
    settings = settings or SolveSettings()
    theta_vec = _as_theta(theta)
    if settings.psi0 is None:
        psi = default_start(moment, data)
    else:
        psi = np.atleast_1d(np.asarray(settings.psi0, dtype=float)).copy()
        if psi.shape != (moment.d,):
            raise ValueError(f"psi0 must have shape ({moment.d},), got {psi.shape}")
        if not np.isfinite(psi).all():
            raise ValueError("psi0 must be finite")

    residual = empirical_moment(moment, psi, theta_vec, data)
    norm = float(np.max(np.abs(residual)))
    best_psi, best_norm = psi.copy(), norm
    converged = False
    iterations = 0

    while iterations < settings.max_iter:
        jac = jacobian_psi(moment, psi, theta_vec, data, settings.fd_step_scale)
        step = solve_pivoted(jac, -residual)
        scale = 1.0
        accepted = False
        for _ in range(settings.max_halvings + 1):
            cand = psi + scale * step
            cand_residual = empirical_moment(moment, cand, theta_vec, data)
            cand_norm = float(np.max(np.abs(cand_residual)))
            if cand_norm < norm or cand_norm < settings.tol:
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            break
        psi, residual, norm = cand, cand_residual, cand_norm
        iterations += 1
        if norm < best_norm:
            best_psi, best_norm = psi.copy(), norm
        if norm < settings.tol:
            converged = True
            break

    psi_hat, final_norm = (psi, norm) if converged else (best_psi, best_norm)
    jac_final = jacobian_psi(moment, psi_hat, theta_vec, data, settings.fd_step_scale)
    return SolveReport(
        psi_hat=psi_hat,
        residual_norm=final_norm,
        iterations=iterations,
        jacobian_at_solution=jac_final,
        converged=converged,
    )
