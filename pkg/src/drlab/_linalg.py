"""Small dense linear solves via Gaussian elimination with partial pivoting.

The systems here are tiny (d-by-d Jacobians, p-by-p normal equations), so a
hand-rolled elimination keeps the singularity test explicit: a pivot below
``rtol`` times the largest pivot seen so far raises ``SingularMatrixError``.
"""

from __future__ import annotations

import numpy as np


class SingularMatrixError(RuntimeError):
    """A linear system has no reliable solution at the requested tolerance."""


def solve_pivoted(a: np.ndarray, b: np.ndarray, rtol: float = 1e-12) -> np.ndarray:
    """Solve a @ x = b with partial pivoting.

    ``b`` may be a vector or a matrix of right-hand sides. Raises
    SingularMatrixError when a pivot falls below rtol * max_pivot.
    """
    a = np.array(a, dtype=float)
    b = np.array(b, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("non-finite entries in linear system")
    m = a.shape[0]
    vec = b.ndim == 1
    rhs = b.reshape(m, -1)
    if rhs.shape[0] != m:
        raise ValueError("right-hand side does not match matrix order")

    max_pivot = 0.0
    for j in range(m):
        piv = j + int(np.argmax(np.abs(a[j:, j])))
        pivot = abs(a[piv, j])
        max_pivot = max(max_pivot, pivot)
        if pivot <= rtol * max_pivot or pivot == 0.0:
            raise SingularMatrixError(
                f"pivot {pivot:.3e} below {rtol:.1e} of largest pivot {max_pivot:.3e} "
                f"(column {j})"
            )
        if piv != j:
            a[[j, piv]] = a[[piv, j]]
            rhs[[j, piv]] = rhs[[piv, j]]
        factor = a[j + 1:, j] / a[j, j]
        a[j + 1:, j:] -= factor[:, None] * a[j, j:]
        rhs[j + 1:] -= factor[:, None] * rhs[j]

    x = np.empty_like(rhs)
    for j in range(m - 1, -1, -1):
        x[j] = (rhs[j] - a[j, j + 1:] @ x[j + 1:]) / a[j, j]
    return x[:, 0] if vec else x


def inverse_pivoted(a: np.ndarray, rtol: float = 1e-12) -> np.ndarray:
    return solve_pivoted(a, np.eye(a.shape[0]), rtol=rtol)
