"""Synthetic data-generating process with analytically known truths.

The DGP is deliberately minimal: one standard-normal covariate plus an
intercept, a logistic treatment assignment, and a linear Gaussian outcome:

    X1 ~ N(0, 1)
    A | X ~ Bernoulli(expit(gamma0 + gamma1 * X1))
    Y = beta0 + beta1 * X1 + tau * A + sigma * N(0, 1)

so the mean outcome under treatment is psi* = beta0 + tau, the true
propensity parameters are theta1* = gamma, and the treated-outcome
regression truth is theta2* = (beta0 + tau, beta1).

Randomness comes from counter-based Philox substreams keyed by a SHA-256
hash of (base_seed, *path). Identical paths give identical draw sequences;
distinct replication indices give statistically independent streams. Draw
order inside ``sample`` is fixed: covariate, treatment uniform, outcome
noise. Determinism is guaranteed within one installed environment, not
across numpy versions.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .moments import expit


@dataclass(frozen=True)
class DGPSpec:
    """Parameters of the synthetic observational DGP."""

    gamma: tuple[float, float] = (0.0, 0.5)
    beta: tuple[float, float] = (1.0, 2.0)
    tau: float = 2.0
    sigma: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "gamma", tuple(float(g) for g in self.gamma))
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if len(self.gamma) != 2 or len(self.beta) != 2:
            raise ValueError("gamma and beta must each have 2 entries (intercept, slope)")
        vals = (*self.gamma, *self.beta, self.tau, self.sigma)
        if not np.isfinite(vals).all():
            raise ValueError("DGP parameters must be finite")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


def substream(base_seed: int, *path: int | float | str) -> np.random.Generator:
    """Derive an independent RNG substream for (base_seed, *path).

    The 128-bit Philox key is the leading bytes of SHA-256 over the decimal
    rendering of the seed and each path component separated by 0x1f, so any
    change to any component yields an unrelated counter-based stream.
    """
    h = hashlib.sha256(str(int(base_seed)).encode())
    for part in path:
        h.update(b"\x1f" + str(part).encode())
    key = int.from_bytes(h.digest()[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))


def truth(spec: DGPSpec) -> tuple[float, np.ndarray, np.ndarray]:
    """True (psi*, theta1*, theta2*) of the DGP."""
    psi_star = spec.beta[0] + spec.tau
    theta1_star = np.array(spec.gamma, dtype=float)
    theta2_star = np.array([spec.beta[0] + spec.tau, spec.beta[1]], dtype=float)
    return psi_star, theta1_star, theta2_star


_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite.hermgauss(80)


def treated_fraction(spec: DGPSpec) -> float:
    """P(A = 1) = E[expit(gamma0 + gamma1 X)], by Gauss-Hermite quadrature."""
    args = spec.gamma[0] + spec.gamma[1] * np.sqrt(2.0) * _GH_NODES
    return float(_GH_WEIGHTS @ expit(args) / np.sqrt(np.pi))


def mean_outcome(spec: DGPSpec) -> float:
    """E[Y] = beta0 + tau * P(A = 1); the estimand of the theta-free mean moment."""
    return spec.beta[0] + spec.tau * treated_fraction(spec)


def sample(spec: DGPSpec, n: int, stream: np.random.Generator) -> Dataset:
    """Draw n i.i.d. observations from the DGP."""
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    x1 = stream.standard_normal(n)
    e = expit(spec.gamma[0] + spec.gamma[1] * x1)
    a = (stream.random(n) < e).astype(float)
    y = spec.beta[0] + spec.beta[1] * x1 + spec.tau * a + spec.sigma * stream.standard_normal(n)
    x = np.column_stack([np.ones(n), x1])
    return Dataset(x=x, a=a, y=y)
