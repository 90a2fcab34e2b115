"""Coefficient fields on the spider and their closed-form/quadrature analytics.

Per-ray drift and dispersion coefficients, the drift-removing scale
transform, stationary radial profiles with ray masses, the infinitesimal
generator on the natural domain class, and exponential-rate certification
from a drift condition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import simpson

from ._quad import QuadratureError, adaptive_simpson, cumulative_adaptive
from .geometry import SpinningMeasure, TreePoint

__all__ = [
    "RadialCoefficient",
    "RayCoefficients",
    "CoefficientField",
    "ScaleTransform",
    "StationaryProfile",
    "LyapunovReport",
    "RayFunction",
    "DomainError",
    "FluxConditionError",
    "NonNormalizableError",
    "RateNotCertified",
    "QuadratureError",
    "eval_coefficients",
    "scale_transform",
    "stationary_radial",
    "spider_stationary",
    "apply_generator",
    "lyapunov_optimize",
    "lyapunov_for_field",
    "drift_envelope",
    "bang_bang_field",
    "default_radial_grid",
]


class DomainError(ValueError):
    """A point lies outside the domain radius of its ray."""


class FluxConditionError(ValueError):
    """A test function violates the zero-flux condition at the origin."""

    def __init__(self, flux: float, tol: float):
        self.flux = flux
        super().__init__(
            f"weighted derivative flux at the origin is {flux!r}, "
            f"must vanish within {tol!r}"
        )


class NonNormalizableError(ValueError):
    """A radial stationary profile has infinite mass on some ray."""


class RateNotCertified(RuntimeError):
    """No decay rate could be certified on the search grid."""

    def __init__(self, best_lambda: float, best_k: float):
        self.best_lambda = best_lambda
        self.best_k = best_k
        super().__init__(
            f"no positive rate found: best k = {best_k!r} at lambda = {best_lambda!r}"
        )


# ------------------------------------------------------------ coefficients


@dataclass(frozen=True)
class RadialCoefficient:
    """A scalar coefficient of the radius on one ray.

    Families: constant(c), affine(a + b*r), and tabulated (linear
    interpolation between knots, constant extension past the last knot).
    """

    family: str
    data: tuple

    @classmethod
    def constant(cls, c: float) -> "RadialCoefficient":
        return cls("constant", (float(c),))

    @classmethod
    def affine(cls, a: float, b: float) -> "RadialCoefficient":
        return cls("affine", (float(a), float(b)))

    @classmethod
    def tabulated(cls, knots, values) -> "RadialCoefficient":
        knots = tuple(float(k) for k in knots)
        values = tuple(float(v) for v in values)
        if len(knots) != len(values) or len(knots) == 0:
            raise ValueError("knots and values must align and be nonempty")
        if knots[0] != 0.0:
            raise ValueError("tabulated knots must start at 0")
        if any(k2 <= k1 for k1, k2 in zip(knots[:-1], knots[1:])):
            raise ValueError("tabulated knots must be strictly increasing")
        return cls("tabulated", (knots, values))

    def __post_init__(self) -> None:
        if self.family not in ("constant", "affine", "tabulated"):
            raise ValueError(f"unknown coefficient family {self.family!r}")

    def __call__(self, r):
        if self.family == "constant":
            (c,) = self.data
            if np.isscalar(r):
                return c
            return np.full_like(np.asarray(r, dtype=float), c)
        if self.family == "affine":
            a, b = self.data
            return a + b * np.asarray(r, dtype=float) if not np.isscalar(r) else a + b * r
        knots, values = self.data
        return np.interp(r, knots, values)

    @property
    def is_constant(self) -> bool:
        if self.family == "constant":
            return True
        if self.family == "affine":
            return self.data[1] == 0.0
        knots, values = self.data
        return len(set(values)) == 1

    def constant_value(self) -> float:
        if not self.is_constant:
            raise ValueError("coefficient is not constant")
        if self.family == "constant":
            return self.data[0]
        if self.family == "affine":
            return self.data[0]
        return self.data[1][0]

    @property
    def knots(self) -> tuple:
        """Breakpoints between which the coefficient is linear in r."""
        if self.family == "tabulated":
            return self.data[0]
        return ()

    def min_on(self, r_max: float) -> float:
        """Exact minimum over [0, r_max] (piecewise linear families)."""
        if self.family == "constant":
            return self.data[0]
        if self.family == "affine":
            a, b = self.data
            if math.isinf(r_max):
                return a if b >= 0 else -math.inf
            return min(a, a + b * r_max)
        knots, values = self.data
        candidates = [v for k, v in zip(knots, values) if k <= r_max]
        candidates.append(float(self(min(r_max, knots[-1]))) if math.isfinite(r_max) else values[-1])
        return min(candidates)

    def to_config(self) -> dict:
        if self.family == "constant":
            return {"family": "constant", "c": self.data[0]}
        if self.family == "affine":
            return {"family": "affine", "a": self.data[0], "b": self.data[1]}
        knots, values = self.data
        return {"family": "tabulated", "knots": list(knots), "values": list(values)}

    @classmethod
    def from_config(cls, spec: dict) -> "RadialCoefficient":
        family = spec.get("family")
        if family == "constant":
            return cls.constant(spec["c"])
        if family == "affine":
            return cls.affine(spec["a"], spec["b"])
        if family == "tabulated":
            return cls.tabulated(spec["knots"], spec["values"])
        raise ValueError(f"unknown coefficient family {family!r}")


@dataclass(frozen=True)
class RayCoefficients:
    """Drift, dispersion and domain radius attached to one ray."""

    g: RadialCoefficient
    sigma: RadialCoefficient
    ell: float = math.inf

    def __post_init__(self) -> None:
        if not (self.ell > 0):
            raise ValueError(f"domain radius must be positive, got {self.ell!r}")
        check_to = self.ell if math.isfinite(self.ell) else 1e6
        if self.sigma.min_on(check_to) <= 0:
            raise ValueError("dispersion must stay strictly positive on the domain")


@dataclass(frozen=True, eq=False)
class CoefficientField:
    """Per-ray coefficient triples (g, sigma, ell) keyed by ray id."""

    per_ray: dict

    def __post_init__(self) -> None:
        if not self.per_ray:
            raise ValueError("coefficient field needs at least one ray")
        for ray_id, entry in self.per_ray.items():
            if not isinstance(entry, RayCoefficients):
                raise TypeError(f"entry for ray {ray_id} must be RayCoefficients")

    @classmethod
    def from_triples(cls, triples: dict) -> "CoefficientField":
        """Build from {ray_id: (g, sigma)} or {ray_id: (g, sigma, ell)}."""
        per_ray = {}
        for ray_id, entry in triples.items():
            per_ray[int(ray_id)] = RayCoefficients(*entry)
        return cls(per_ray=per_ray)

    @classmethod
    def constant(cls, ray_ids, g: float, sigma: float, ell: float = math.inf) -> "CoefficientField":
        entry = RayCoefficients(
            g=RadialCoefficient.constant(g), sigma=RadialCoefficient.constant(sigma), ell=ell
        )
        return cls(per_ray={int(i): entry for i in ray_ids})

    @property
    def ray_ids(self) -> tuple:
        return tuple(sorted(self.per_ray))

    def coefficients(self, ray_id: int) -> RayCoefficients:
        try:
            return self.per_ray[ray_id]
        except KeyError:
            raise KeyError(f"field has no ray {ray_id}") from None

    def matches_measure(self, mu: SpinningMeasure) -> bool:
        return set(self.ray_ids) == set(mu.ids)

    def is_driftless(self, r_probe: float = 100.0) -> bool:
        for entry in self.per_ray.values():
            g = entry.g
            if g.is_constant and g.constant_value() == 0.0:
                continue
            probe = np.linspace(0.0, min(r_probe, entry.ell * 0.999), 257)
            if np.any(np.asarray(g(probe)) != 0.0):
                return False
        return True

    def sigma_angular_independent(self, r_probe: float = 100.0) -> bool:
        entries = list(self.per_ray.values())
        first = entries[0].sigma
        probe = np.linspace(0.0, r_probe, 257)
        ref = np.asarray(first(probe))
        return all(np.allclose(np.asarray(e.sigma(probe)), ref, rtol=0, atol=1e-12) for e in entries[1:])


def bang_bang_field(g1: float, g2: float, sigma: float = 1.0) -> tuple:
    """Two-ray image of a line with piecewise-constant inward drift.

    The right half-line becomes ray 1 with drift -g1, the left half-line
    ray 2 with drift -g2; the gluing weight is 1/2 on each ray.  Returns
    (field, measure).
    """
    if g1 <= 0 or g2 <= 0:
        raise ValueError("bang-bang drifts must both point inward (g1, g2 > 0)")
    field = CoefficientField.from_triples(
        {
            1: (RadialCoefficient.constant(-g1), RadialCoefficient.constant(sigma)),
            2: (RadialCoefficient.constant(-g2), RadialCoefficient.constant(sigma)),
        }
    )
    mu = SpinningMeasure.from_weights([0.5, 0.5], ids=[1, 2], angles=[0.0, math.pi])
    return field, mu


def eval_coefficients(field: CoefficientField, x: TreePoint, ray: int | None = None) -> tuple:
    """Coefficient values (g, sigma) at a point.

    Coefficients are ray-attached, so at the origin the caller must name
    the ray being approached.
    """
    if x.is_origin:
        if ray is None:
            raise ValueError("origin evaluation requires an explicit ray")
        ray_id = ray
    else:
        ray_id = x.ray
        if ray is not None and ray != ray_id:
            raise ValueError(f"point lies on ray {ray_id}, not {ray}")
    entry = field.coefficients(ray_id)
    if x.radius >= entry.ell:
        raise DomainError(
            f"radius {x.radius!r} outside domain radius {entry.ell!r} of ray {ray_id}"
        )
    return float(entry.g(x.radius)), float(entry.sigma(x.radius))


# ------------------------------------------------------------ scale transform


def _hermite_eval(x, xs, ys, ds):
    """Cubic Hermite interpolation with exact node derivatives."""
    x = np.asarray(x, dtype=float)
    idx = np.clip(np.searchsorted(xs, x, side="right") - 1, 0, len(xs) - 2)
    h = xs[idx + 1] - xs[idx]
    t = (x - xs[idx]) / h
    h00 = (1 + 2 * t) * (1 - t) ** 2
    h10 = t * (1 - t) ** 2
    h01 = t * t * (3 - 2 * t)
    h11 = t * t * (t - 1)
    return h00 * ys[idx] + h10 * h * ds[idx] + h01 * ys[idx + 1] + h11 * h * ds[idx + 1]


@dataclass(frozen=True, eq=False)
class RayScale:
    """Monotone scale map of one ray: node-exact values and derivatives."""

    grid: np.ndarray
    values: np.ndarray
    derivs: np.ndarray
    inner: np.ndarray
    g: RadialCoefficient
    sigma: RadialCoefficient
    quad_tol: float = 1e-10

    def _inner_at(self, r: float) -> float:
        """Antiderivative of g/sigma^2 at r, refined from the nearest node."""
        k = int(np.clip(np.searchsorted(self.grid, r, side="right") - 1, 0, len(self.grid) - 1))
        q = lambda u: self.g(u) / self.sigma(u) ** 2
        return float(self.inner[k]) + adaptive_simpson(q, float(self.grid[k]), float(r), tol=self.quad_tol)

    def derivative(self, r):
        """s'(r) = exp(-2 * antiderivative of g / sigma^2)."""
        if np.isscalar(r):
            return math.exp(-2.0 * self._inner_at(float(r)))
        return np.exp(-2.0 * _hermite_eval(r, self.grid, self.inner,
                                           np.asarray(self.g(self.grid)) / np.asarray(self.sigma(self.grid)) ** 2))

    def __call__(self, r):
        if np.isscalar(r):
            r = float(r)
            if r < self.grid[0] or r > self.grid[-1]:
                raise ValueError(f"radius {r!r} outside tabulation range")
            k = int(np.clip(np.searchsorted(self.grid, r, side="right") - 1, 0, len(self.grid) - 2))
            return float(self.values[k]) + adaptive_simpson(
                lambda u: math.exp(-2.0 * self._inner_at(u)), float(self.grid[k]), r, tol=self.quad_tol
            )
        r = np.asarray(r, dtype=float)
        if r.size and (r.min() < self.grid[0] or r.max() > self.grid[-1]):
            raise ValueError("radii outside tabulation range")
        return _hermite_eval(r, self.grid, self.values, self.derivs)

    def inverse(self, y, tol: float = 1e-10):
        """Monotone bisection of the scale map, to absolute tolerance tol."""
        scalar = np.isscalar(y)
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if y.size and (y.min() < self.values[0] - 1e-12 or y.max() > self.values[-1] + 1e-12):
            raise ValueError("values outside the scale range of the tabulation")
        lo = np.full(y.shape, self.grid[0])
        hi = np.full(y.shape, self.grid[-1])
        for _ in range(64):
            mid = 0.5 * (lo + hi)
            below = _hermite_eval(mid, self.grid, self.values, self.derivs) < y
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.max(hi - lo) <= tol:
                break
        out = 0.5 * (lo + hi)
        return float(out[0]) if scalar else out

    def sigma_tilde(self, y):
        """Dispersion of the scale-transformed radius at transformed value y."""
        r = self.inverse(y)
        return self.derivative(r) * self.sigma(r)


@dataclass(frozen=True, eq=False)
class ScaleTransform:
    """Per-ray drift-removing scale maps with inverses."""

    per_ray: dict

    @property
    def ray_ids(self) -> tuple:
        return tuple(sorted(self.per_ray))

    def ray(self, ray_id: int) -> RayScale:
        return self.per_ray[ray_id]

    def s(self, ray_id: int, r):
        return self.per_ray[ray_id](r)

    def inverse(self, ray_id: int, y):
        return self.per_ray[ray_id].inverse(y)

    def sigma_tilde(self, ray_id: int, y):
        return self.per_ray[ray_id].sigma_tilde(y)


def _ray_grid(grid: np.ndarray, ell: float) -> np.ndarray:
    sub = grid[grid < ell]
    if len(sub) < 2:
        raise ValueError("grid must contain at least two nodes inside the ray domain")
    return sub


def scale_transform(field: CoefficientField, grid) -> ScaleTransform:
    """Build the per-ray scale maps on a radial grid by nested quadrature."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or len(grid) < 2 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing with at least two nodes")
    if grid[0] != 0.0:
        grid = np.concatenate([[0.0], grid])
    per_ray = {}
    for ray_id in field.ray_ids:
        entry = field.coefficients(ray_id)
        sub = _ray_grid(grid, entry.ell)
        q = lambda u, e=entry: e.g(u) / e.sigma(u) ** 2
        inner = np.asarray(cumulative_adaptive(q, sub))
        scale = RayScale(
            grid=sub,
            values=np.zeros_like(sub),
            derivs=np.exp(-2.0 * inner),
            inner=inner,
            g=entry.g,
            sigma=entry.sigma,
        )
        sprime = lambda u, s=scale: math.exp(-2.0 * s._inner_at(u))
        values = np.asarray(cumulative_adaptive(sprime, sub))
        object.__setattr__(scale, "values", values)
        per_ray[ray_id] = scale
    return ScaleTransform(per_ray=per_ray)


# ------------------------------------------------------------ stationary law


def _tail_normalizer(pfun, r_start: float, start_mass: float,
                     max_doublings: int = 40, rel_tol: float = 1e-12) -> float:
    """Integrate pfun over [r_start, inf), or inf when the tail-ratio test fires.

    Divergence rule: the integral over [R, 2R] exceeding half the integral
    over [R/2, R] for every probed R flags an infinite normalizer.
    """
    total = start_mass
    try:
        prev = adaptive_simpson(pfun, r_start / 2.0, r_start) if r_start > 0 else 0.0
    except (OverflowError, QuadratureError):
        return math.inf
    r = r_start
    for _ in range(max_doublings):
        try:
            nxt = adaptive_simpson(pfun, r, 2.0 * r)
        except (OverflowError, QuadratureError):
            return math.inf
        if prev > 0 and nxt > 0.5 * prev:
            prev = nxt
            total += nxt
            r *= 2.0
            # keep doubling; if the ratio never drops the tail diverges
            if r > r_start * 2.0**20:
                return math.inf
            continue
        total += nxt
        if prev == 0.0 or nxt <= rel_tol * max(total, 1e-300):
            return total
        prev = nxt
        r *= 2.0
    return math.inf


def _stationary_tables(field: CoefficientField, ray_id: int, grid) -> tuple:
    """Density, normalizer and cumulative-mass table on one ray's grid."""
    entry = field.coefficients(ray_id)
    sub = _ray_grid(grid, entry.ell)
    inner = np.asarray(cumulative_adaptive(lambda u: entry.g(u) / entry.sigma(u) ** 2, sub))
    dens = np.asarray(entry.sigma(sub), dtype=float) ** -2.0 * np.exp(2.0 * inner)

    scale = RayScale(grid=sub, values=np.zeros_like(sub), derivs=np.exp(-2.0 * inner),
                     inner=inner, g=entry.g, sigma=entry.sigma)
    pfun = lambda u: float(entry.sigma(u)) ** -2.0 * math.exp(2.0 * scale._inner_at(u))

    cum = np.asarray(cumulative_adaptive(pfun, sub, tol=1e-12))
    mass_on_grid = float(cum[-1])
    if math.isfinite(entry.ell):
        tail = adaptive_simpson(pfun, float(sub[-1]), float(entry.ell)) if entry.ell > sub[-1] else 0.0
        c_total = mass_on_grid + tail
    else:
        c_total = _tail_normalizer(pfun, float(sub[-1]), mass_on_grid)
    if not math.isfinite(c_total):
        return dens, math.inf, cum
    return dens / c_total, c_total, cum / c_total


def stationary_radial(field: CoefficientField, ray_id: int, grid) -> tuple:
    """Stationary radial density on one ray and its normalizer.

    Returns (density on the grid, C).  The unnormalized density is
    sigma^-2(r) * exp(2 * antiderivative of g/sigma^2); C integrates it over
    the ray domain.  When C is infinite the tuple carries the unnormalized
    density and C = inf.
    """
    grid = np.asarray(grid, dtype=float)
    if grid[0] != 0.0:
        grid = np.concatenate([[0.0], grid])
    dens, c_total, _ = _stationary_tables(field, ray_id, grid)
    return dens, c_total


@dataclass(frozen=True, eq=False)
class StationaryProfile:
    """Stationary law of a spider: per-ray radial densities and ray masses."""

    ray_ids: tuple
    grid: np.ndarray
    densities: dict
    normalizers: dict
    masses: dict
    total_normalizer: float
    cumulatives: dict

    def cumulative(self, ray_id: int) -> np.ndarray:
        return self.cumulatives[ray_id]

    def quantile(self, ray_id: int, u: float) -> float:
        """Radial quantile of the normalized density on one ray."""
        if not 0.0 <= u <= 1.0:
            raise ValueError("quantile level must lie in [0, 1]")
        if u == 1.0:
            return math.inf
        cum = self.cumulative(ray_id)
        if u > cum[-1]:
            raise ValueError(
                f"quantile {u} beyond tabulated mass {cum[-1]:.6f} on ray {ray_id}; "
                "extend the radial grid"
            )
        return float(np.interp(u, cum, self.grid))

    def mean_radius(self, ray_id: int) -> float:
        dens = self.densities[ray_id]
        return float(simpson(self.grid * dens, x=self.grid))


def spider_stationary(field: CoefficientField, mu: SpinningMeasure, grid) -> StationaryProfile:
    """Stationary profile of the spider: densities, normalizers, ray masses."""
    if not field.matches_measure(mu):
        raise ValueError("field rays and measure atoms must agree")
    grid = np.asarray(grid, dtype=float)
    if grid[0] != 0.0:
        grid = np.concatenate([[0.0], grid])
    densities, normalizers, cumulatives = {}, {}, {}
    for ray_id in mu.ids:
        dens, c, cum = _stationary_tables(field, ray_id, grid)
        if not math.isfinite(c):
            raise NonNormalizableError(
                f"ray {ray_id} has an infinite stationary normalizer; "
                "the spider has no stationary distribution"
            )
        densities[ray_id] = dens
        normalizers[ray_id] = c
        cumulatives[ray_id] = cum
    total = math.fsum(normalizers[d.id] * w for d, w in zip(mu.directions, mu.weights))
    masses = {
        d.id: normalizers[d.id] * w / total for d, w in zip(mu.directions, mu.weights)
    }
    return StationaryProfile(
        ray_ids=tuple(mu.ids),
        grid=grid,
        densities=densities,
        normalizers=normalizers,
        masses=masses,
        total_normalizer=total,
        cumulatives=cumulatives,
    )


# ------------------------------------------------------------ generator


@dataclass(frozen=True)
class RayFunction:
    """A test function given by radial value and derivatives per ray.

    Each callable takes (r, ray_id).
    """

    value: "callable"
    d1: "callable"
    d2: "callable"


FLUX_TOL = 1e-8


def origin_flux(mu: SpinningMeasure, f: RayFunction) -> float:
    """Weighted one-sided derivative sum at the origin."""
    return math.fsum(w * f.d1(0.0, d.id) for d, w in zip(mu.directions, mu.weights))


def apply_generator(
    field: CoefficientField,
    mu: SpinningMeasure | None,
    f: RayFunction,
    x: TreePoint,
    ray: int | None = None,
) -> float:
    """Generator value g f' + sigma^2 f''/2 at x.

    With a measure supplied, membership in the domain class is checked
    first: the mu-weighted one-sided derivatives at the origin must cancel.
    At the origin the mu-weighted average of the per-ray limits is
    returned.  Pass mu=None to apply the bare ray operator with no
    domain check (x must then not be the origin).
    """
    if mu is not None:
        flux = origin_flux(mu, f)
        if abs(flux) > FLUX_TOL:
            raise FluxConditionError(flux, FLUX_TOL)
    if x.is_origin:
        if mu is None:
            raise ValueError("origin evaluation needs the spinning measure")
        total = 0.0
        for d, w in zip(mu.directions, mu.weights):
            g, sig = eval_coefficients(field, x, ray=d.id)
            total += w * (g * f.d1(0.0, d.id) + 0.5 * sig**2 * f.d2(0.0, d.id))
        return total
    g, sig = eval_coefficients(field, x, ray=ray)
    return g * f.d1(x.radius, x.ray) + 0.5 * sig**2 * f.d2(x.radius, x.ray)


# ------------------------------------------------------------ decay rate


@dataclass(frozen=True, eq=False)
class LyapunovReport:
    """Certified exponential decay rate from the drift condition."""

    lambda_star: float
    k: float
    K_curve: np.ndarray
    x_grid: np.ndarray
    mode: str

    def __post_init__(self) -> None:
        if not (self.k > 0):
            raise ValueError("a report requires a certified positive rate")


def default_lambda_grid() -> np.ndarray:
    return np.geomspace(1e-3, 50.0, 200)


def default_x_grid() -> np.ndarray:
    return np.linspace(50.0 / 400, 50.0, 400)


def _drift_form(gbar, sbar, x, lam):
    return np.asarray(gbar(x), dtype=float) * lam + np.asarray(sbar(x), dtype=float) ** 2 * lam * lam / 2.0


def lyapunov_optimize(
    gbar: RadialCoefficient,
    sbar: RadialCoefficient,
    lambda_grid=None,
    x_grid=None,
    force_grid: bool = False,
) -> LyapunovReport:
    """Best exponential rate k and its multiplier lambda*.

    Maximizes k(lambda) = -sup_x [gbar(x) lambda + sbar(x)^2 lambda^2 / 2]
    over the lambda grid with a golden-section polish; constant
    coefficients short-circuit to the closed form lambda* = -g/sigma^2,
    k = g^2 / (2 sigma^2).
    """
    if lambda_grid is None:
        lambda_grid = default_lambda_grid()
    if x_grid is None:
        x_grid = default_x_grid()
    lambda_grid = np.asarray(lambda_grid, dtype=float)
    x_grid = np.asarray(x_grid, dtype=float)
    # K(., lambda) is convex between coefficient knots, so its sup over the
    # continuum sits on knots and interval ends; fold those into the grid
    # so the certified rate is never overstated.
    extra = [0.0]
    extra += [k for k in gbar.knots if k <= x_grid.max()]
    extra += [k for k in sbar.knots if k <= x_grid.max()]
    x_grid = np.unique(np.concatenate([x_grid, np.asarray(extra, dtype=float)]))

    if not force_grid and gbar.is_constant and sbar.is_constant:
        g = gbar.constant_value()
        s = sbar.constant_value()
        if g >= 0:
            raise RateNotCertified(best_lambda=float(lambda_grid[0]), best_k=-math.inf)
        lam = -g / s**2
        k = g**2 / (2.0 * s**2)
        return LyapunovReport(
            lambda_star=lam,
            k=k,
            K_curve=_drift_form(gbar, sbar, x_grid, lam),
            x_grid=x_grid,
            mode="constant_closed_form",
        )

    def k_of(lam: float) -> float:
        return -float(np.max(_drift_form(gbar, sbar, x_grid, lam)))

    ks = np.array([k_of(lam) for lam in lambda_grid])
    j = int(np.argmax(ks))
    lo = lambda_grid[max(j - 1, 0)]
    hi = lambda_grid[min(j + 1, len(lambda_grid) - 1)]
    # golden-section polish; k is concave in lambda for fixed x-grid sup
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = float(lo), float(hi)
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = k_of(c), k_of(d)
    for _ in range(200):
        if b - a < 1e-12 * max(1.0, b):
            break
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = k_of(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = k_of(d)
    lam = 0.5 * (a + b)
    k = k_of(lam)
    if max(k, ks[j]) <= 0:
        raise RateNotCertified(best_lambda=float(lambda_grid[j]), best_k=float(ks[j]))
    if ks[j] > k:
        lam, k = float(lambda_grid[j]), float(ks[j])
    return LyapunovReport(
        lambda_star=float(lam),
        k=float(k),
        K_curve=_drift_form(gbar, sbar, x_grid, lam),
        x_grid=x_grid,
        mode="general_grid",
    )


def drift_envelope(field: CoefficientField, x_grid=None) -> RadialCoefficient:
    """Pointwise maximum of the per-ray drifts, as one radial coefficient.

    The certified rate from an envelope is conservative when the drifts
    cross; any upper envelope is admissible, the pointwise max is the
    tightest one expressible per ray.
    """
    entries = [field.coefficients(i) for i in field.ray_ids]
    if all(e.g.is_constant for e in entries):
        return RadialCoefficient.constant(max(e.g.constant_value() for e in entries))
    if x_grid is None:
        x_grid = default_x_grid()
    x_grid = np.asarray(x_grid, dtype=float)
    knots = np.concatenate([[0.0], x_grid[x_grid > 0]])
    vals = np.max([np.asarray(e.g(knots), dtype=float) for e in entries], axis=0)
    return RadialCoefficient.tabulated(knots, vals)


def lyapunov_for_field(
    field: CoefficientField,
    lambda_grid=None,
    x_grid=None,
    force_grid: bool = False,
) -> LyapunovReport:
    """Rate certification for a whole field via its drift envelope.

    Requires an angular-independent dispersion.  A two-ray field with
    constant inward drifts is reported in bang-bang mode: the envelope is
    the weaker drift, so lambda = g1 ^ g2 and k = (g1 ^ g2)^2 / 2 for unit
    dispersion.
    """
    if not field.sigma_angular_independent():
        raise ValueError("rate certification requires angular-independent dispersion")
    entries = [field.coefficients(i) for i in field.ray_ids]
    sbar = entries[0].sigma
    gbar = drift_envelope(field, x_grid)
    report = lyapunov_optimize(gbar, sbar, lambda_grid, x_grid, force_grid=force_grid)
    bang_bang = (
        len(entries) == 2
        and all(e.g.is_constant for e in entries)
        and all(e.g.constant_value() < 0 for e in entries)
        and sbar.is_constant
    )
    if bang_bang and report.mode == "constant_closed_form":
        return LyapunovReport(
            lambda_star=report.lambda_star,
            k=report.k,
            K_curve=report.K_curve,
            x_grid=report.x_grid,
            mode="bang_bang",
        )
    return report


def default_radial_grid(r_max: float = 15.0, n: int = 1501) -> np.ndarray:
    return np.linspace(0.0, r_max, n)
