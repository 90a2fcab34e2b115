"""Adaptive Simpson quadrature used by the coefficient analytics."""

from __future__ import annotations


class QuadratureError(RuntimeError):
    """Raised when adaptive refinement fails to converge on a subinterval."""

    def __init__(self, a: float, b: float, estimate: float, message: str = ""):
        self.interval = (a, b)
        self.estimate = estimate
        detail = message or "adaptive Simpson did not converge"
        super().__init__(f"{detail} on [{a!r}, {b!r}] (estimate {estimate!r})")


def adaptive_simpson(f, a: float, b: float, tol: float = 1e-10, max_depth: int = 48) -> float:
    """Integrate f over [a, b] with per-subinterval absolute tolerance tol."""
    if a == b:
        return 0.0
    fa, fb = f(a), f(b)
    m = 0.5 * (a + b)
    fm = f(m)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    return _refine(f, a, b, fa, fm, fb, whole, tol, max_depth)


def _refine(f, a, b, fa, fm, fb, whole, tol, depth):
    m = 0.5 * (a + b)
    lm = 0.5 * (a + m)
    rm = 0.5 * (m + b)
    flm, frm = f(lm), f(rm)
    left = (m - a) / 6.0 * (fa + 4.0 * flm + fm)
    right = (b - m) / 6.0 * (fm + 4.0 * frm + fb)
    err = left + right - whole
    # absolute tolerance, floored at what double precision can resolve
    floor = 1e-14 * (abs(left) + abs(right))
    if abs(err) <= 15.0 * max(tol, floor):
        return left + right + err / 15.0
    if depth <= 0:
        raise QuadratureError(a, b, whole)
    return _refine(f, a, m, fa, flm, fm, left, tol, depth - 1) + _refine(
        f, m, b, fm, frm, fb, right, tol, depth - 1
    )


def cumulative_adaptive(f, grid, tol: float = 1e-10):
    """Antiderivative values of f at the grid nodes, zero at grid[0]."""
    out = [0.0]
    for a, b in zip(grid[:-1], grid[1:]):
        out.append(out[-1] + adaptive_simpson(f, float(a), float(b), tol=tol))
    return out
