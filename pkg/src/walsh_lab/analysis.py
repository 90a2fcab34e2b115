"""Empirical measures on the spider and quantitative verification reports.

The estimators here are pure folds over path or snapshot ensembles:
histograms of spider positions, total-variation distances between them,
exponential-rate fits, coupling costs, and the pass/fail harnesses that
compare Monte Carlo output against the analytic objects from
:mod:`walsh_lab.model`.

Histogram conventions.  Every ray carries its own radial binning and the
final edge is ``+inf``, so a histogram is a genuine probability vector on
the spider no matter how far samples stray.  Weighted distances evaluate
the weight at cell endpoints; on the unbounded overflow cell the finite
left edge is used.  Both are upper-bound conventions for nondecreasing
weights and are stated in the report metadata.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .geometry import SpinningMeasure, TreePoint
from .model import (
    CoefficientField,
    RayFunction,
    StationaryProfile,
    apply_generator,
)
from .simulate import (
    CoupledPaths,
    SimConfig,
    WalshPath,
    estimate_local_time,
    walsh_snapshots,
)

__all__ = [
    "BoundConstants",
    "CouplingCost",
    "DecayFit",
    "GeneratorCheck",
    "HolderReport",
    "OccupationReport",
    "PartitionReport",
    "SpiderHistogram",
    "SubsetCheck",
    "bound_constants",
    "coupling_cost",
    "coupling_cost_from_sups",
    "fit_decay_rate",
    "generator_consistency_check",
    "holder_bound_check",
    "holder_exponent",
    "occupation_fractions",
    "partition_of_local_time_check",
    "partition_report_from_arrays",
    "spider_histogram",
    "stationary_bin_edges",
    "stationary_histogram",
    "sup_tree_gap",
    "tv_distance",
]

MASS_TOL = 1e-12


# ------------------------------------------------------------- histograms


@dataclass(frozen=True)
class SpiderHistogram:
    """Probability masses over per-ray radial cells.

    ``edges[i]`` is strictly increasing, starts at a finite radius and
    ends at ``+inf``; ``masses[i]`` has one entry per cell.  The masses
    over all rays sum to one.
    """

    edges: dict
    masses: dict
    sample_count: int

    def __post_init__(self) -> None:
        if set(self.edges) != set(self.masses):
            raise ValueError("edges and masses must cover the same rays")
        if not self.edges:
            raise ValueError("histogram needs at least one ray")
        total = 0.0
        for ray_id, e in self.edges.items():
            e = np.asarray(e, dtype=float)
            m = np.asarray(self.masses[ray_id], dtype=float)
            if e.ndim != 1 or len(e) < 2 or not np.all(np.diff(e) > 0):
                raise ValueError(f"bin edges on ray {ray_id} must be strictly increasing")
            if len(m) != len(e) - 1:
                raise ValueError(f"ray {ray_id} needs one mass per cell")
            if np.any(m < -MASS_TOL):
                raise ValueError(f"negative cell mass on ray {ray_id}")
            total += float(m.sum())
        if abs(total - 1.0) > MASS_TOL:
            raise ValueError(f"cell masses sum to {total!r}, not 1")

    def same_binning(self, other: "SpiderHistogram") -> bool:
        if set(self.edges) != set(other.edges):
            return False
        return all(np.array_equal(self.edges[i], other.edges[i]) for i in self.edges)

    def ray_mass(self, ray_id: int) -> float:
        return float(np.sum(self.masses[ray_id]))


def _samples_as_arrays(samples) -> tuple:
    if isinstance(samples, tuple) and len(samples) == 2:
        ids = np.asarray(samples[0], dtype=np.int64)
        radii = np.asarray(samples[1], dtype=float)
        if ids.shape != radii.shape or ids.ndim != 1:
            raise ValueError("samples must be matching 1-d (ray ids, radii) arrays")
    else:
        points = list(samples)
        ids = np.array([-1 if p.is_origin else p.ray for p in points], dtype=np.int64)
        radii = np.array([p.radius for p in points], dtype=float)
    if len(ids) == 0:
        raise ValueError("histogram needs at least one sample")
    if np.any(radii <= 0.0):
        raise ValueError("samples at the origin carry no ray; drop zero radii first")
    if not np.all(np.isfinite(radii)):
        raise ValueError("sample radii must be finite")
    return ids, radii


def stationary_bin_edges(profile: StationaryProfile, bins: int = 40) -> dict:
    """Equal-probability radial edges under a stationary profile.

    The ``bins`` cells are allocated to rays proportionally to their
    stationary masses (at least one cell per ray); within a ray the
    edges sit at equally spaced quantiles of the normalized radial
    density, with an ``+inf`` overflow edge.
    """
    if bins < len(profile.ray_ids):
        raise ValueError("need at least one cell per ray")
    edges = {}
    for ray_id in profile.ray_ids:
        n = max(1, round(bins * profile.masses[ray_id]))
        cuts = [profile.quantile(ray_id, j / n) for j in range(1, n)]
        edges[ray_id] = np.array([0.0, *cuts, math.inf])
    return edges


def _equal_width_edges(ids, radii, bins: int) -> dict:
    edges = {}
    for ray_id in np.unique(ids):
        top = float(radii[ids == ray_id].max())
        interior = np.linspace(0.0, top, bins + 1)[1:-1] if top > 0 else []
        edges[int(ray_id)] = np.array([0.0, *interior, math.inf])
    return edges


def spider_histogram(samples, bins: int = 40, *, profile: Optional[StationaryProfile] = None,
                     edges: Optional[dict] = None) -> SpiderHistogram:
    """Normalized histogram of spider positions.

    ``samples`` is either a ``(ray ids, radii)`` array pair or a
    sequence of :class:`TreePoint`.  Explicit ``edges`` win; otherwise a
    ``profile`` yields equal-probability cells and plain ``bins`` gives
    equal-width cells per observed ray.
    """
    ids, radii = _samples_as_arrays(samples)
    if edges is None:
        edges = stationary_bin_edges(profile, bins) if profile is not None \
            else _equal_width_edges(ids, radii, bins)
    edges = {int(i): np.asarray(e, dtype=float) for i, e in edges.items()}
    known = np.isin(ids, list(edges))
    if not known.all():
        bad = int(ids[~known][0])
        raise ValueError(f"sample on unknown ray {bad}")
    masses = {}
    n = len(ids)
    for ray_id, e in edges.items():
        r = radii[ids == ray_id]
        cells = np.searchsorted(e, r, side="right") - 1
        if len(r) and (cells.min() < 0 or cells.max() >= len(e) - 1):
            raise ValueError(f"sample outside the binned range on ray {ray_id}")
        masses[ray_id] = np.bincount(cells, minlength=len(e) - 1) / n
    return SpiderHistogram(edges=edges, masses=masses, sample_count=n)


def stationary_histogram(profile: StationaryProfile, edges: dict) -> SpiderHistogram:
    """Analytic cell masses of a stationary profile on a given binning."""
    masses = {}
    for ray_id, e in edges.items():
        e = np.asarray(e, dtype=float)
        cum = profile.cumulative(ray_id)
        cdf = np.where(np.isinf(e), 1.0, np.interp(e, profile.grid, cum,
                                                   right=float(cum[-1])))
        masses[ray_id] = profile.masses[ray_id] * np.diff(cdf)
    total = sum(float(m.sum()) for m in masses.values())
    masses = {i: m / total for i, m in masses.items()}
    return SpiderHistogram(edges={int(i): np.asarray(e, float) for i, e in edges.items()},
                           masses=masses, sample_count=0)


# -------------------------------------------------------------- distances


def tv_distance(h1: SpiderHistogram, h2: SpiderHistogram,
                weight: Optional[Callable[[float], float]] = None) -> float:
    """Distance between two histograms with identical binning.

    Unweighted this is the total variation distance of the two cell
    probability vectors, ``sum |m1 - m2| / 2``.  With a radial weight it
    is ``sum_cells rep(V) * |m1 - m2|`` where ``rep(V)`` is the larger
    endpoint value of the cell (left edge on the unbounded overflow
    cell), an upper-bound representative for nondecreasing weights.
    """
    if not h1.same_binning(h2):
        raise ValueError("histograms use different binnings")
    total = 0.0
    for ray_id, e in h1.edges.items():
        gap = np.abs(np.asarray(h1.masses[ray_id]) - np.asarray(h2.masses[ray_id]))
        if weight is None:
            total += 0.5 * float(gap.sum())
        else:
            lo = np.array([weight(v) for v in e[:-1]], dtype=float)
            hi = np.array([weight(v) if np.isfinite(v) else -math.inf for v in e[1:]])
            total += float(np.sum(np.maximum(lo, hi) * gap))
    return total


# -------------------------------------------------------------- occupation


@dataclass(frozen=True)
class OccupationReport:
    """Time fractions a path spends on each ray and radial cell."""

    ray_fractions: dict
    cell_fractions: Optional[SpiderHistogram]
    burn_in_steps: int
    positive_steps: int


def occupation_fractions(path: WalshPath, edges: Optional[dict] = None,
                         burn_in: float = 0.1) -> OccupationReport:
    """Occupation fractions after a burn-in prefix.

    Grid nodes at the origin carry no ray and are excluded, so the ray
    fractions sum to one over the visited rays.  With ``edges`` the same
    nodes are also binned radially into ``cell_fractions``.
    """
    if not 0.0 <= burn_in < 1.0:
        raise ValueError("burn_in must lie in [0, 1)")
    k0 = int(round(burn_in * (len(path.times) - 1)))
    rays = path.rays[k0:]
    radii = path.radii[k0:]
    pos = rays != -1
    if not pos.any():
        raise ValueError("no positive-radius nodes after the burn-in prefix")
    rays, radii = rays[pos], radii[pos]
    fractions = {int(i): float(np.mean(rays == i)) for i in np.unique(rays)}
    cells = spider_histogram((rays, radii), edges=edges) if edges is not None else None
    return OccupationReport(ray_fractions=fractions, cell_fractions=cells,
                            burn_in_steps=k0, positive_steps=int(pos.sum()))


# --------------------------------------------------------------- rate fits


@dataclass(frozen=True)
class DecayFit:
    """Least-squares exponential rate fitted above a noise floor."""

    times: np.ndarray
    values: np.ndarray
    rate: float
    intercept: float
    window: tuple
    stderr: float
    noise_floor: float


def fit_decay_rate(times, values, noise_floor: float = 0.0) -> DecayFit:
    """Fit ``values ~ exp(intercept - rate * t)`` by least squares on logs.

    Points at or below ``noise_floor`` are excluded from the fit window;
    at least four points must survive.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if times.shape != values.shape or times.ndim != 1:
        raise ValueError("times and values must be matching 1-d arrays")
    if noise_floor < 0.0:
        raise ValueError("noise floor must be nonnegative")
    keep = np.flatnonzero(values > noise_floor)
    if len(keep) == 0:
        raise ValueError("every distance sits at the noise floor; fit refused")
    if len(keep) < 4:
        raise ValueError("need at least 4 points above the noise floor")
    t = times[keep]
    y = np.log(values[keep])
    slope, intercept = np.polyfit(t, y, 1)
    resid = y - (slope * t + intercept)
    dof = len(keep) - 2
    stderr = math.sqrt(float(resid @ resid) / dof / float(((t - t.mean()) ** 2).sum()))
    return DecayFit(times=times, values=values, rate=float(-slope),
                    intercept=float(intercept), window=tuple(int(k) for k in keep),
                    stderr=stderr, noise_floor=noise_floor)


# ----------------------------------------------------------- coupling cost


@dataclass(frozen=True)
class CouplingCost:
    """Monte Carlo estimate of E[sup-distance^q]^(1/q) over coupled pairs."""

    estimate: float
    se: float
    q: float
    pair_count: int


def sup_tree_gap(pair: CoupledPaths) -> float:
    """Largest tree distance between the two legs over the grid."""
    a, b = pair.first, pair.second
    gap = np.where(a.rays == b.rays, np.abs(a.radii - b.radii), a.radii + b.radii)
    return float(gap.max())


def coupling_cost_from_sups(sups, q: float = 1.0) -> CouplingCost:
    """Coupling cost from precomputed per-pair sup distances."""
    if q < 1.0:
        raise ValueError("q must be at least 1")
    sups = np.asarray(sups, dtype=float)
    if len(sups) == 0:
        raise ValueError("coupling cost needs at least one pair")
    powers = sups**q
    m = float(powers.mean())
    se_m = float(powers.std(ddof=1) / math.sqrt(len(powers))) if len(powers) > 1 else 0.0
    if m == 0.0:
        return CouplingCost(estimate=0.0, se=0.0, q=q, pair_count=len(sups))
    est = m ** (1.0 / q)
    return CouplingCost(estimate=est, se=se_m * est / (q * m), q=q,
                        pair_count=len(sups))


def coupling_cost(pairs: Iterable[CoupledPaths], q: float = 1.0) -> CouplingCost:
    """Path-space coupling cost of an ensemble of coupled pairs.

    Returns ``E[sup_t d(X(t), X~(t))^q]^(1/q)`` with a delta-method
    standard error.  This upper-bounds the order-``q`` Wasserstein
    distance between the two path laws.
    """
    if q < 1.0:
        raise ValueError("q must be at least 1")
    return coupling_cost_from_sups([sup_tree_gap(pair) for pair in pairs], q)


# ------------------------------------------------------------ Hoelder check


@dataclass(frozen=True)
class BoundConstants:
    """Constants of the coupling-cost bound cost <= C1 * W_p(mu, nu)^rho."""

    c1: float
    rho: float
    admissible: bool


def holder_exponent(p: float, r: float) -> float:
    """Largest admissible exponent p*r / ((1+p)*r + p) for regularity r."""
    if p <= 0 or r <= 0:
        raise ValueError("p and r must be positive")
    return p * r / ((1.0 + p) * r + p)


def bound_constants(p: float, q: float, rho: float, horizon: float) -> BoundConstants:
    """Evaluate the Gamma-formula prefactor and the exponent admissibility.

    ``c1 = (2T)^{q/2} * pi^{-1/(2 r1)} * Gamma((1 + q r1)/2)^{1/r1}`` with
    ``r1 = p/(p-q)``; admissible means ``1 <= q < p`` and
    ``rho in (0, p/(p+1))``.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    admissible = (p > 0) and (1.0 <= q < p) and (0.0 < rho < p / (p + 1.0))
    if not admissible:
        return BoundConstants(c1=math.nan, rho=rho, admissible=False)
    r1 = p / (p - q)
    c1 = ((2.0 * horizon) ** (q / 2.0) * math.pi ** (-0.5 / r1)
          * math.gamma((1.0 + q * r1) / 2.0) ** (1.0 / r1))
    return BoundConstants(c1=c1, rho=rho, admissible=True)


@dataclass(frozen=True)
class HolderReport:
    """Shape check of the coupling cost against transport distances."""

    constants: BoundConstants
    transport_costs: np.ndarray
    coupling_costs: np.ndarray
    fitted_c: float
    slope: float
    bound_ok: bool
    slope_ok: bool

    @property
    def passed(self) -> bool:
        return self.bound_ok and self.slope_ok


def holder_bound_check(p: float, q: float, rho: float, horizon: float,
                       transport_costs, coupling_costs,
                       min_slope: float = 0.3) -> HolderReport:
    """Check that coupling costs scale like a power of the transport cost.

    The constant ``C`` is fitted at the largest transport distance;
    every point must then satisfy ``cost <= C * w^rho``, and the log-log
    slope of the curve must reach ``min_slope``.  The exact constant of
    the underlying theorem is non-constructive, so this verdict tests
    the shape of the bound, not its sharpest prefactor.
    """
    constants = bound_constants(p, q, rho, horizon)
    if not constants.admissible:
        raise ValueError(f"inadmissible parameters p={p}, q={q}, rho={rho}")
    w = np.asarray(transport_costs, dtype=float)
    c = np.asarray(coupling_costs, dtype=float)
    if w.shape != c.shape or w.ndim != 1 or len(w) < 2:
        raise ValueError("need matching transport and coupling cost arrays, length >= 2")
    if np.any(w <= 0) or np.any(c <= 0):
        raise ValueError("cost curves must be strictly positive")
    order = np.argsort(w)
    w, c = w[order], c[order]
    fitted = float(c[-1] / w[-1] ** rho)
    bound_ok = bool(np.all(c <= fitted * w**rho * (1.0 + 1e-9)))
    slope = float(np.polyfit(np.log(w), np.log(c), 1)[0])
    return HolderReport(constants=constants, transport_costs=w, coupling_costs=c,
                        fitted_c=fitted, slope=slope, bound_ok=bound_ok,
                        slope_ok=slope >= min_slope)


# ----------------------------------------------------- local-time partition


@dataclass(frozen=True)
class SubsetCheck:
    """One subset's aggregated local-time ratio against its target weight."""

    ray_set: tuple
    target: float
    ratio: float
    se: float
    passed: bool


@dataclass(frozen=True)
class PartitionReport:
    """Local-time partition ratios for a family of ray subsets."""

    checks: tuple
    inconclusive: bool
    epsilon: float
    path_count: int

    @property
    def passed(self) -> bool:
        return not self.inconclusive and all(c.passed for c in self.checks)


def partition_of_local_time_check(paths: Iterable[WalshPath], mu: SpinningMeasure,
                                  subsets: Sequence, epsilon: float = 0.02,
                                  tolerance: float = 0.03) -> PartitionReport:
    """Check that directional local time splits proportionally to mu.

    For each subset ``A`` the aggregated ratio of the ``A``-indicator
    local time to the radial local time is compared with ``mu(A)``; a
    subset passes when the target lies within three standard errors plus
    ``tolerance``.  An ensemble whose local time vanishes on every path
    is reported as inconclusive.
    """
    subsets = [tuple(int(i) for i in s) for s in subsets]
    for s in subsets:
        for i in s:
            if i not in mu.ids:
                raise ValueError(f"subset ray {i} is not an atom of the measure")
    split_sums = [[] for _ in subsets]
    totals = []
    for path in paths:
        first = None
        for j, s in enumerate(subsets):
            est = estimate_local_time(path, s, epsilon)
            split_sums[j].append(est.split_total)
            if first is None:
                first = est.total
        if first is None:  # no subsets requested
            first = estimate_local_time(path, (), epsilon).total
        totals.append(first)
    splits = np.array(split_sums, dtype=float).reshape(len(subsets), len(totals))
    return partition_report_from_arrays(splits, np.asarray(totals, dtype=float),
                                        subsets, mu, epsilon, tolerance)


def partition_report_from_arrays(splits: np.ndarray, totals: np.ndarray,
                                 subsets, mu: SpinningMeasure, epsilon: float,
                                 tolerance: float = 0.03) -> PartitionReport:
    """Assemble a partition report from per-path local-time aggregates.

    ``splits[j, i]`` is path i's local time restricted to subset j and
    ``totals[i]`` its radial local time.
    """
    subsets = [tuple(int(i) for i in s) for s in subsets]
    n = len(totals)
    if n == 0:
        raise ValueError("partition check needs at least one path")
    grand = float(totals.sum())
    if grand == 0.0:
        checks = tuple(SubsetCheck(ray_set=s, target=mu.subset_weight(s),
                                   ratio=math.nan, se=math.nan, passed=False)
                       for s in subsets)
        return PartitionReport(checks=checks, inconclusive=True,
                               epsilon=epsilon, path_count=n)
    checks = []
    for s, sums in zip(subsets, splits):
        ratio = float(sums.sum()) / grand
        resid = sums - ratio * totals
        se = math.sqrt(float(resid @ resid) * n / max(n - 1, 1)) / grand
        target = mu.subset_weight(s)
        checks.append(SubsetCheck(ray_set=s, target=target, ratio=ratio, se=se,
                                  passed=abs(ratio - target) <= 3.0 * se + tolerance))
    return PartitionReport(checks=tuple(checks), inconclusive=False,
                           epsilon=epsilon, path_count=n)


# ------------------------------------------------------- generator check


@dataclass(frozen=True)
class GeneratorCheck:
    """Finite-horizon difference quotients against the generator value."""

    h_values: np.ndarray
    quotients: np.ndarray
    std_errors: np.ndarray
    generator_value: float
    fitted_c: float
    passed: bool


def _evaluate_ray_function(f: RayFunction, ids, radii, fallback_ray: int) -> np.ndarray:
    ids = np.where(ids == -1, fallback_ray, ids)
    out = np.empty(len(ids), dtype=float)
    for ray_id in np.unique(ids):
        mask = ids == ray_id
        r = radii[mask]
        try:
            vals = np.asarray(f.value(r, int(ray_id)), dtype=float)
            if vals.shape != r.shape:
                raise TypeError
        except TypeError:
            vals = np.array([f.value(float(v), int(ray_id)) for v in r])
        out[mask] = vals
    return out


def generator_consistency_check(field: CoefficientField, mu: SpinningMeasure,
                                f: RayFunction, x: TreePoint, h_values,
                                cfg: SimConfig, *, snapshots=None) -> GeneratorCheck:
    """Compare (E_x f(X(h)) - f(x))/h with the generator applied at x.

    One ensemble of ``cfg.path_count`` paths is snapshotted at every
    ``h``, so the difference quotients share their random numbers.  The
    check passes when each quotient is within ``C*h + 3*se`` of the
    generator value, with ``C`` fitted at the largest ``h``.  Callers
    that have already simulated can hand the ``walsh_snapshots`` mapping
    in as ``snapshots``.

    The linear envelope presumes an interior evaluation point or a
    driftless vertex.  With drift at the vertex the quotient approaches
    its limit only at a square-root rate (the drift integrates the
    root-t growth of the radial part), so the verdict is conservative
    there; extrapolate the quotients in sqrt(h) instead.
    """
    h = np.unique(np.asarray(h_values, dtype=float))
    if len(h) == 0 or h[0] <= 0:
        raise ValueError("h values must be positive")
    if h[-1] > cfg.horizon + 1e-12:
        raise ValueError("h values must not exceed the simulation horizon")
    target = apply_generator(field, mu, f, x)  # also enforces the domain class
    fallback = mu.ids[0]
    fx = f.value(0.0, fallback) if x.is_origin else f.value(x.radius, x.ray)
    snaps = snapshots if snapshots is not None else \
        walsh_snapshots(field, mu, x, cfg, list(h))
    quotients = np.empty(len(h))
    errors = np.empty(len(h))
    for j, t in enumerate(h):
        ids, radii = snaps[float(t)]
        vals = _evaluate_ray_function(f, ids, radii, fallback)
        quotients[j] = (float(vals.mean()) - fx) / t
        errors[j] = float(vals.std(ddof=1)) / math.sqrt(len(vals)) / t
    gaps = np.abs(quotients - target)
    fitted = max(0.0, (gaps[-1] - 3.0 * errors[-1]) / h[-1])
    passed = bool(np.all(gaps <= fitted * h + 3.0 * errors + 1e-12))
    return GeneratorCheck(h_values=h, quotients=quotients, std_errors=errors,
                          generator_value=target, fitted_c=fitted, passed=passed)
