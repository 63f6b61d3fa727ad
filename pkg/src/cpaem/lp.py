"""Small dense linear programs by the primal simplex method with Bland's rule.

Every problem handled here comes with a known feasible point, so the solver
shifts the variables to that point and starts directly from the all-slack basis
(no phase one).  Free variables are split into positive and negative parts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError

PIVOT_TOL = 1e-12
COST_TOL = 1e-12


@dataclass
class LPResult:
    status: str  # "optimal" or "unbounded"
    x: np.ndarray
    value: float
    pivots: int


def maximize(c: np.ndarray, a: np.ndarray, b: np.ndarray, x0: np.ndarray,
             max_pivots: int = 10_000) -> LPResult:
    """Maximize ``c @ x`` subject to ``a @ x <= b`` with free ``x``.

    ``x0`` must satisfy the constraints up to a small tolerance; slightly
    negative slacks are clipped to zero.
    """
    c = np.asarray(c, dtype=float)
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.asarray(b, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    m, n = a.shape
    slack0 = b - a @ x0
    scale = 1.0 + np.abs(b).max(initial=0.0) + np.abs(a @ x0).max(initial=0.0)
    if np.any(slack0 < -1e-7 * scale):
        raise NumericalError(
            f"starting point violates constraints by {-slack0.min():.3g}; "
            f"system rows={a.tolist()} offsets={b.tolist()}"
        )
    slack0 = np.maximum(slack0, 0.0)
    if m == 0:
        if np.any(c != 0):
            return LPResult("unbounded", x0.copy(), np.inf, 0)
        return LPResult("optimal", x0.copy(), float(c @ x0), 0)

    # columns: y+ (n), y- (n), slacks (m); last column is the rhs
    ncol = 2 * n + m
    tab = np.zeros((m + 1, ncol + 1))
    tab[:m, :n] = a
    tab[:m, n : 2 * n] = -a
    tab[:m, 2 * n : 2 * n + m] = np.eye(m)
    tab[:m, -1] = slack0
    # objective row holds reduced costs of the maximization
    tab[m, :n] = c
    tab[m, n : 2 * n] = -c
    basis = list(range(2 * n, 2 * n + m))

    pivots = 0
    status = "optimal"
    while True:
        cost = tab[m, :ncol]
        candidates = np.flatnonzero(cost > COST_TOL)
        if candidates.size == 0:
            break
        col = int(candidates[0])
        column = tab[:m, col]
        pos = column > PIVOT_TOL
        if not np.any(pos):
            status = "unbounded"
            break
        ratios = np.full(m, np.inf)
        ratios[pos] = tab[:m, -1][pos] / column[pos]
        best = ratios.min()
        ties = np.flatnonzero(ratios <= best + 1e-14 * max(1.0, abs(best)))
        row = int(min(ties, key=lambda r: basis[r]))
        tab[row] /= tab[row, col]
        others = np.abs(tab[:, col]) > 0
        others[row] = False
        tab[others] -= np.outer(tab[others, col], tab[row])
        basis[row] = col
        pivots += 1
        if pivots > max_pivots:
            raise NumericalError(f"simplex exceeded {max_pivots} pivots on a {m}x{n} system")

    y = np.zeros(ncol)
    y[basis] = tab[:m, -1]
    x = x0 + y[:n] - y[n : 2 * n]
    value = float(c @ x) if status == "optimal" else np.inf
    return LPResult(status, x, value, pivots)
