"""Observation and dataset containers shared by every estimation stage."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Observation:
    """A single (covariates, treatment, outcome) row.

    ``x`` must start with the intercept entry 1.0; ``a`` is a binary
    treatment indicator.
    """

    x: np.ndarray
    a: int
    y: float

    def __post_init__(self) -> None:
        x = np.asarray(self.x, dtype=float)
        object.__setattr__(self, "x", x)
        if x.ndim != 1 or x.size == 0:
            raise ValueError("x must be a nonempty 1-d vector")
        if x[0] != 1.0:
            raise ValueError("x[0] must be the intercept entry 1")
        if self.a not in (0, 1):
            raise ValueError(f"a must be 0 or 1, got {self.a!r}")
        if not (np.isfinite(x).all() and np.isfinite(self.y)):
            raise ValueError("observation contains non-finite values")


@dataclass(frozen=True)
class Dataset:
    """An i.i.d. sample stored column-wise: x is (n, p), a and y are (n,)."""

    x: np.ndarray
    a: np.ndarray
    y: np.ndarray

    def __post_init__(self) -> None:
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        a = np.asarray(self.a, dtype=float)
        y = np.asarray(self.y, dtype=float)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "y", y)
        n = x.shape[0]
        if n == 0:
            raise ValueError("dataset must contain at least one row")
        if a.shape != (n,) or y.shape != (n,):
            raise ValueError(f"inconsistent shapes: x {x.shape}, a {a.shape}, y {y.shape}")
        if not np.all((a == 0.0) | (a == 1.0)):
            raise ValueError("treatment indicator a must be 0/1")
        if not (np.isfinite(x).all() and np.isfinite(y).all()):
            raise ValueError("dataset contains non-finite values")
        if not np.all(x[:, 0] == 1.0):
            raise ValueError("x[:, 0] must be the intercept column of ones")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def __len__(self) -> int:
        return self.n

    def row(self, i: int) -> Observation:
        return Observation(x=self.x[i], a=int(self.a[i]), y=float(self.y[i]))


def from_rows(rows: list[Observation]) -> Dataset:
    """Stack single observations into a Dataset."""
    if not rows:
        raise ValueError("need at least one observation")
    return Dataset(
        x=np.vstack([r.x for r in rows]),
        a=np.array([r.a for r in rows], dtype=float),
        y=np.array([r.y for r in rows], dtype=float),
    )
