"""Independent reference implementations used to pin expected values.

Everything here is deliberately naive: exhaustive enumeration, closed
forms, or tiny finite-difference schemes.  The package must agree with
these, not the other way round.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np


def integer_transport_plans(row_totals, col_totals):
    """Yield every nonnegative integer matrix with the given margins."""
    rows = list(row_totals)
    cols = list(col_totals)
    if sum(rows) != sum(cols):
        raise ValueError("margins must balance")
    m, n = len(rows), len(cols)
    plan = [[0] * n for _ in range(m)]

    def fill_row(i, j, remaining_row, col_rem):
        if i == m:
            yield [row[:] for row in plan]
            return
        if j == n - 1:
            if remaining_row <= col_rem[j]:
                plan[i][j] = remaining_row
                col_rem[j] -= remaining_row
                yield from fill_row(i + 1, 0, rows[i + 1] if i + 1 < m else 0, col_rem)
                col_rem[j] += remaining_row
                plan[i][j] = 0
            return
        for v in range(min(remaining_row, col_rem[j]) + 1):
            plan[i][j] = v
            col_rem[j] -= v
            yield from fill_row(i, j + 1, remaining_row - v, col_rem)
            col_rem[j] += v
            plan[i][j] = 0

    yield from fill_row(0, 0, rows[0], cols[:])


def brute_force_transport_cost(cost, row_weights, col_weights, max_denominator=64):
    """Minimal expected cost over all plans, by exhaustive enumeration.

    Weights must be rationals with a modest common denominator.
    """
    fr = [Fraction(w).limit_denominator(max_denominator) for w in row_weights]
    fc = [Fraction(w).limit_denominator(max_denominator) for w in col_weights]
    for f, w in zip(fr + fc, list(row_weights) + list(col_weights)):
        if abs(float(f) - w) > 1e-12:
            raise ValueError(f"weight {w!r} is not rational with denominator <= {max_denominator}")
    denom = 1
    for f in fr + fc:
        denom = denom * f.denominator // math.gcd(denom, f.denominator)
    rows = [int(f * denom) for f in fr]
    cols = [int(f * denom) for f in fc]
    cost = np.asarray(cost, dtype=float)
    best = math.inf
    for plan in integer_transport_plans(rows, cols):
        total = sum(plan[i][j] * cost[i, j] for i in range(len(rows)) for j in range(len(cols)))
        best = min(best, total / denom)
    return best


def scale_function_constant(g, sigma, r):
    """Closed-form scale function for constant drift and dispersion."""
    lam = -2.0 * g / sigma**2
    if lam == 0.0:
        return r
    return (math.exp(lam * r) - 1.0) / lam


def stationary_density_constant(g, sigma, r):
    """Closed-form normalized stationary radial density for constant g < 0, sigma."""
    lam = -2.0 * g / sigma**2
    if lam <= 0.0:
        raise ValueError("stationary density needs inward drift")
    return lam * np.exp(-lam * np.asarray(r, dtype=float))


def stationary_normalizer_constant(g, sigma):
    """C = integral of sigma^-2 exp(2 g r / sigma^2) dr over [0, inf)."""
    lam = -2.0 * g / sigma**2
    if lam <= 0.0:
        return math.inf
    return 1.0 / (sigma**2 * lam)


def reflected_bm_mean_local_time(t):
    """E of the origin local time of a reflected Brownian motion at time t."""
    return math.sqrt(2.0 * t / math.pi)


def holder_prefactor(p, q, t_horizon):
    """High-precision evaluation of the coupling bound prefactor."""
    from mpmath import mp

    mp.dps = 40
    r1 = mp.mpf(p) / (mp.mpf(p) - mp.mpf(q))
    value = (
        (2 * mp.mpf(t_horizon)) ** (mp.mpf(q) / 2)
        * mp.pi ** (-1 / (2 * r1))
        * mp.gamma((1 + mp.mpf(q) * r1) / 2) ** (1 / r1)
    )
    return float(value)


def holder_exponent(p, r):
    """Admissible Hoelder exponent from moment order r, as a Fraction."""
    fp, fr = Fraction(p), Fraction(r)
    return fp * fr / ((1 + fp) * fr + fp)
