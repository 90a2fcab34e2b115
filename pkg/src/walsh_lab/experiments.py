"""Experiment pipelines behind the command line.

Each pipeline turns a parsed configuration into plot-ready tables, a
JSON-able summary, and an optional verdict.  Ensembles are cut into
fixed-size index blocks fanned out over a thread pool; per-path
randomness is keyed by the absolute path index and blocks are merged
in index order, so every artifact is byte-identical for any thread
count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats

from .analysis import (
    bound_constants,
    coupling_cost_from_sups,
    fit_decay_rate,
    generator_consistency_check,
    holder_exponent,
    holder_bound_check,
    partition_report_from_arrays,
    spider_histogram,
    stationary_bin_edges,
    stationary_histogram,
    sup_tree_gap,
    tv_distance,
)
from .config import ExperimentConfig
from .geometry import SpinningMeasure, build_coupling_plan, wasserstein_p
from .model import (
    RateNotCertified,
    RayFunction,
    lyapunov_for_field,
    spider_stationary,
)
from .simulate import (
    SimConfig,
    coupled_walsh_bm_paths,
    estimate_local_time,
    excursion_poisson_counts,
    walsh_diffusion_paths,
    walsh_snapshots,
)

__all__ = ["ExperimentResult", "Table", "run_experiment"]

_BLOCK = 4096
_PROFILE_POINTS = 2001


@dataclass(frozen=True)
class Table:
    """One CSV artifact: a name, column headers, and rows of cells."""

    name: str
    columns: tuple
    rows: tuple


@dataclass(frozen=True)
class ExperimentResult:
    """Tables plus a summary; verdict None for purely descriptive kinds."""

    kind: str
    summary: dict
    tables: tuple
    verdict: Optional[bool]


# ------------------------------------------------------- block plumbing


def _cfg_block(cfg: SimConfig, count: int) -> SimConfig:
    return SimConfig(cfg.horizon, cfg.dt, cfg.seed, count, cfg.local_time_epsilon)


def _index_blocks(total: int) -> list:
    return [(s, min(s + _BLOCK, total)) for s in range(0, total, _BLOCK)]


def _map_ordered(fn, blocks, threads: int) -> list:
    """Apply fn to index blocks, in parallel but merged in block order."""
    if threads <= 1 or len(blocks) <= 1:
        return [fn(b) for b in blocks]
    with ThreadPoolExecutor(max_workers=min(threads, len(blocks))) as pool:
        return list(pool.map(fn, blocks))


def _ensemble_snapshots(field, mu, start, cfg, at_times, threads: int) -> dict:
    def block(span):
        s, e = span
        return walsh_snapshots(field, mu, start, _cfg_block(cfg, e - s),
                               at_times, index_offset=s)

    parts = _map_ordered(block, _index_blocks(cfg.path_count), threads)
    merged = {}
    for t in parts[0]:
        merged[t] = (np.concatenate([d[t][0] for d in parts]),
                     np.concatenate([d[t][1] for d in parts]))
    return merged


def _stationary_profile(config: ExperimentConfig, grid_max: float):
    grid = np.linspace(0.0, grid_max, _PROFILE_POINTS)
    return spider_stationary(config.field, config.mu, grid)


# ------------------------------------------------------------ pipelines


def _run_simulate(config: ExperimentConfig, threads: int) -> ExperimentResult:
    thin = int(config.params.get("thin", 1))
    cfg = config.sim
    rows = []
    explosions = 0
    for idx, path in enumerate(
        walsh_diffusion_paths(config.field, config.mu, config.start, cfg)
    ):
        if path.explosion_flag is not None:
            explosions += 1
        keep = np.arange(0, len(path.times), thin)
        if keep[-1] != len(path.times) - 1:
            keep = np.append(keep, len(path.times) - 1)
        for k in keep:
            rows.append((idx, float(path.times[k]), int(path.rays[k]),
                         float(path.radii[k]), int(path.excursion_labels[k])))
    table = Table("paths", ("path", "t", "ray", "radius", "excursion"), tuple(rows))
    summary = {
        "estimate": None,
        "se": None,
        "paths": cfg.path_count,
        "steps": cfg.n_steps,
        "thin": thin,
        "explosions": explosions,
    }
    return ExperimentResult("simulate", summary, (table,), None)


def _run_stationary(config: ExperimentConfig, threads: int) -> ExperimentResult:
    params = config.params
    grid_max = float(params.get("grid_max", 12.0))
    points = int(params.get("grid_points", _PROFILE_POINTS))
    grid = np.linspace(0.0, grid_max, points)
    profile = spider_stationary(config.field, config.mu, grid)
    rows = []
    for ray_id in profile.ray_ids:
        dens = profile.densities[ray_id]
        cum = profile.cumulatives[ray_id]
        for r, d, c in zip(profile.grid, dens, cum):
            rows.append((int(ray_id), float(r), float(d), float(c)))
    table = Table("profile", ("ray", "r", "density", "cumulative"), tuple(rows))
    summary = {
        "estimate": None,
        "se": None,
        "masses": {str(i): float(profile.masses[i]) for i in profile.ray_ids},
        "normalizers": {str(i): float(profile.normalizers[i]) for i in profile.ray_ids},
        "total_normalizer": float(profile.total_normalizer),
    }
    return ExperimentResult("stationary", summary, (table,), None)


def _run_occupation(config: ExperimentConfig, threads: int) -> ExperimentResult:
    """Pooled occupation of an ensemble against the stationary profile.

    Post-burn-in positive-radius nodes from every path are pooled, so a
    single long path and many shorter ones are treated alike.
    """
    params = config.params
    bins = int(params.get("bins", 40))
    burn_in = float(params.get("burn_in", 0.1))
    frac_tol = float(params.get("fraction_tolerance", 0.05))
    tv_tol = float(params.get("tv_tolerance", 0.07))
    profile = _stationary_profile(config, float(params.get("grid_max", 12.0)))
    edges = stationary_bin_edges(profile, bins)
    cfg = config.sim
    pooled_ids, pooled_radii = [], []
    burn_steps = 0
    for path in walsh_diffusion_paths(config.field, config.mu, config.start, cfg):
        burn_steps = int(round(burn_in * (len(path.times) - 1)))
        rays = path.rays[burn_steps:]
        radii = path.radii[burn_steps:]
        pos = rays != -1
        pooled_ids.append(rays[pos])
        pooled_radii.append(radii[pos])
    ids = np.concatenate(pooled_ids)
    radii = np.concatenate(pooled_radii)
    hist = spider_histogram((ids, radii), edges=edges)
    tv = tv_distance(hist, stationary_histogram(profile, edges))
    rows = []
    worst = 0.0
    for i in config.mu.ids:
        frac = float(np.mean(ids == i))
        target = float(profile.masses[i])
        worst = max(worst, abs(frac - target))
        rows.append((int(i), frac, target, abs(frac - target)))
    table = Table("occupation", ("ray", "fraction", "stationary_mass", "abs_error"),
                  tuple(rows))
    summary = {
        "estimate": tv,
        "se": None,
        "max_fraction_error": worst,
        "tv_distance": tv,
        "fraction_tolerance": frac_tol,
        "tv_tolerance": tv_tol,
        "positive_nodes": int(len(ids)),
        "burn_in_steps": burn_steps,
        "paths": cfg.path_count,
    }
    verdict = bool(worst <= frac_tol and tv <= tv_tol)
    return ExperimentResult("occupation", summary, (table,), verdict)


def _run_tv_decay(config: ExperimentConfig, threads: int) -> ExperimentResult:
    """Histogram TV against the stationary law at a ladder of times.

    The fitted log-linear rate must land inside [rate_min, rate_max];
    cells at the Monte Carlo noise floor sqrt(cells/paths) are dropped
    from the fit window.
    """
    params = config.params
    times = [float(t) for t in params["times"]]
    bins = int(params.get("bins", 40))
    rate_min = float(params.get("rate_min", 0.3))
    rate_max = float(params.get("rate_max", 0.8))
    weighted = bool(params.get("weighted", False))
    cfg = config.sim
    profile = _stationary_profile(config, float(params.get("grid_max", 12.0)))
    edges = stationary_bin_edges(profile, bins)
    pi_hist = stationary_histogram(profile, edges)
    snaps = _ensemble_snapshots(config.field, config.mu, config.start, cfg,
                                times, threads)
    weight = None
    lambda_star = None
    if weighted:
        lambda_star = lyapunov_for_field(config.field).lambda_star
        weight = lambda r: math.exp(lambda_star * r)
    cells = sum(len(e) - 1 for e in edges.values())
    floor = math.sqrt(cells / cfg.path_count)
    tvs, wtvs = [], []
    for t in times:
        ids, radii = snaps[float(t)]
        keep = radii > 0.0
        hist = spider_histogram((ids[keep], radii[keep]), edges=edges)
        tvs.append(tv_distance(hist, pi_hist))
        if weighted:
            wtvs.append(tv_distance(hist, pi_hist, weight=weight))
    if weighted:
        columns = ("t", "tv", "weighted_tv", "noise_floor")
        rows = tuple((t, v, w, floor) for t, v, w in zip(times, tvs, wtvs))
    else:
        columns = ("t", "tv", "noise_floor")
        rows = tuple((t, v, floor) for t, v in zip(times, tvs))
    table = Table("decay", columns, rows)
    summary = {
        "se": None,
        "noise_floor": floor,
        "bins": cells,
        "paths": cfg.path_count,
        "rate_min": rate_min,
        "rate_max": rate_max,
    }
    try:
        fit = fit_decay_rate(np.asarray(times), np.asarray(tvs), noise_floor=floor)
    except ValueError as err:
        summary.update({"estimate": None, "fit_error": str(err)})
        return ExperimentResult("tv-decay", summary, (table,), False)
    summary.update({
        "estimate": fit.rate,
        "se": fit.stderr,
        "intercept": fit.intercept,
        "window": [int(k) for k in fit.window],
    })
    if weighted:
        summary["lambda_star"] = lambda_star
        try:
            wfit = fit_decay_rate(np.asarray(times), np.asarray(wtvs))
            summary["weighted_rate"] = wfit.rate
            summary["weighted_se"] = wfit.stderr
        except ValueError as err:
            summary["weighted_fit_error"] = str(err)
    verdict = bool(rate_min <= fit.rate <= rate_max)
    return ExperimentResult("tv-decay", summary, (table,), verdict)


def _run_coupling_holder(config: ExperimentConfig, threads: int) -> ExperimentResult:
    """Coupling cost against transport cost for shrinking perturbations.

    A unit mass on the first atom is perturbed toward the second atom
    by each epsilon; optimally coupled driver pairs share their radial
    noise across epsilons, so the cost curve is monotone pathwise.
    """
    params = config.params
    p = float(params.get("p", 2.0))
    q = float(params.get("q", 1.0))
    rho = float(params.get("rho", holder_exponent(p, 1.0)))
    eps_list = sorted((float(e) for e in params.get("epsilons", (0.4, 0.2, 0.1, 0.05))),
                      reverse=True)
    pairs = int(params["pairs"])
    min_slope = float(params.get("min_slope", 0.3))
    cfg = config.sim
    constants = bound_constants(p, q, rho, cfg.horizon)
    if not constants.admissible:
        raise ValueError(f"inadmissible parameters p={p}, q={q}, rho={rho}")
    north, south = int(config.mu.ids[0]), int(config.mu.ids[1])
    base = SpinningMeasure.from_weights([1.0], ids=[north], angles=[0.0])
    rows = []
    w_list, cost_list = [], []
    for eps in eps_list:
        if eps >= 1.0:
            mu_eps = SpinningMeasure.from_weights([1.0], ids=[south],
                                                  angles=[math.pi])
        else:
            mu_eps = SpinningMeasure.from_weights([1.0 - eps, eps],
                                                  ids=[north, south],
                                                  angles=[0.0, math.pi])
        plan = build_coupling_plan(base, mu_eps, kind="optimal", p=p)
        w = wasserstein_p(base, mu_eps, p)

        def block_sups(span, plan=plan):
            s, e = span
            it = coupled_walsh_bm_paths(plan, _cfg_block(cfg, e - s),
                                        index_offset=s)
            return np.asarray([sup_tree_gap(pair) for pair in it])

        sups = np.concatenate(_map_ordered(block_sups, _index_blocks(pairs), threads))
        cost = coupling_cost_from_sups(sups, q=q)
        w_list.append(w)
        cost_list.append(cost.estimate)
        rows.append((eps, w, cost.estimate, cost.se))
    table = Table("holder", ("epsilon", "transport_cost", "coupling_cost", "se"),
                  tuple(rows))
    monotone = all(cost_list[i + 1] <= cost_list[i] * (1.0 + 1e-9)
                   for i in range(len(cost_list) - 1))
    summary = {
        "p": p,
        "q": q,
        "rho": rho,
        "c1": constants.c1,
        "pairs": pairs,
        "monotone": monotone,
        "min_slope": min_slope,
        "se": None,
    }
    try:
        report = holder_bound_check(p, q, rho, cfg.horizon, w_list, cost_list,
                                    min_slope=min_slope)
    except ValueError as err:
        summary.update({"estimate": None, "check_error": str(err)})
        return ExperimentResult("coupling-holder", summary, (table,), False)
    summary.update({
        "estimate": report.slope,
        "slope": report.slope,
        "fitted_c": report.fitted_c,
        "bound_ok": report.bound_ok,
        "slope_ok": report.slope_ok,
    })
    verdict = bool(monotone and report.passed)
    return ExperimentResult("coupling-holder", summary, (table,), verdict)


def _run_lyapunov(config: ExperimentConfig, threads: int) -> ExperimentResult:
    params = config.params
    tolerance = float(params.get("tolerance", 1e-6))
    closed_form = bool(params.get("closed_form", False))
    try:
        report = lyapunov_for_field(config.field)
    except RateNotCertified as err:
        summary = {
            "estimate": None,
            "se": None,
            "certified": False,
            "best_lambda": err.best_lambda,
            "best_k": err.best_k,
        }
        table = Table("lyapunov", ("x", "drift_form"), ())
        return ExperimentResult("lyapunov", summary, (table,), False)
    rows = tuple((float(x), float(v))
                 for x, v in zip(report.x_grid, report.K_curve))
    table = Table("lyapunov", ("x", "drift_form"), rows)
    summary = {
        "estimate": report.k,
        "se": None,
        "lambda_star": report.lambda_star,
        "k": report.k,
        "mode": report.mode,
        "certified": True,
    }
    verdict = None
    if closed_form:
        entries = [config.field.per_ray[i] for i in config.field.ray_ids]
        g_min = min(-e.g.constant_value() for e in entries)
        sig = entries[0].sigma.constant_value()
        lam_cf = g_min / sig**2
        k_cf = g_min**2 / (2.0 * sig**2)
        summary.update({"lambda_closed_form": lam_cf, "k_closed_form": k_cf})
        verdict = bool(abs(report.lambda_star - lam_cf) <= tolerance
                       and abs(report.k - k_cf) <= tolerance)
    return ExperimentResult("lyapunov", summary, (table,), verdict)


def _run_partition_check(config: ExperimentConfig, threads: int) -> ExperimentResult:
    """Aggregated local-time ratios per ray subset against their weights."""
    params = config.params
    subsets = [tuple(int(i) for i in s) for s in params["subsets"]]
    tolerance = float(params.get("tolerance", 0.03))
    cfg = config.sim
    epsilon = cfg.local_time_epsilon

    def block_sums(span):
        s, e = span
        splits = np.empty((len(subsets), e - s))
        totals = np.empty(e - s)
        it = walsh_diffusion_paths(config.field, config.mu, config.start,
                                   _cfg_block(cfg, e - s), index_offset=s)
        for col, path in enumerate(it):
            for j, subset in enumerate(subsets):
                est = estimate_local_time(path, subset, epsilon, config.field)
                splits[j, col] = est.split_total
                if j == 0:
                    totals[col] = est.total
        return splits, totals

    parts = _map_ordered(block_sums, _index_blocks(cfg.path_count), threads)
    splits = np.concatenate([p[0] for p in parts], axis=1)
    totals = np.concatenate([p[1] for p in parts])
    report = partition_report_from_arrays(splits, totals, subsets, config.mu,
                                          epsilon, tolerance)
    rows = tuple((";".join(str(i) for i in c.ray_set), c.target, c.ratio,
                  c.se, c.passed) for c in report.checks)
    table = Table("partition", ("subset", "target", "ratio", "se", "passed"), rows)
    errors = [abs(c.ratio - c.target) for c in report.checks]
    summary = {
        "estimate": None if report.inconclusive else max(errors),
        "se": None if report.inconclusive else max(c.se for c in report.checks),
        "epsilon": epsilon,
        "tolerance": tolerance,
        "paths": report.path_count,
        "inconclusive": report.inconclusive,
    }
    return ExperimentResult("partition-check", summary, (table,), report.passed)


_GENERATOR_FUNCTIONS = {
    "r_squared": RayFunction(
        value=lambda r, i: np.asarray(r) ** 2,
        d1=lambda r, i: 2.0 * r,
        d2=lambda r, i: 2.0,
    ),
    "cosine_well": RayFunction(
        value=lambda r, i: 1.0 - np.cos(r),
        d1=lambda r, i: math.sin(r),
        d2=lambda r, i: math.cos(r),
    ),
}


def _run_generator_check(config: ExperimentConfig, threads: int) -> ExperimentResult:
    params = config.params
    f = _GENERATOR_FUNCTIONS[params.get("function", "r_squared")]
    h_values = np.unique(np.asarray(params["h_values"], dtype=float))
    cfg = config.sim
    snaps = _ensemble_snapshots(config.field, config.mu, config.start, cfg,
                                [float(t) for t in h_values], threads)
    report = generator_consistency_check(config.field, config.mu, f,
                                         config.start, h_values, cfg,
                                         snapshots=snaps)
    rows = tuple((float(h), float(qt), float(se))
                 for h, qt, se in zip(report.h_values, report.quotients,
                                      report.std_errors))
    table = Table("generator", ("h", "quotient", "se"), rows)
    summary = {
        "estimate": float(report.quotients[0]),
        "se": float(report.std_errors[0]),
        "generator_value": report.generator_value,
        "fitted_c": report.fitted_c,
        "paths": cfg.path_count,
    }
    return ExperimentResult("generator-check", summary, (table,), report.passed)


def _run_excursion_poisson(config: ExperimentConfig, threads: int) -> ExperimentResult:
    """Excursion-count replications against their Poisson law.

    Counts delta-high excursions before the inverse local time of the
    level; the sample mean must sit within three standard errors of
    level/delta and a chi-square fit against the Poisson family must
    not reject at the 1 percent level.
    """
    params = config.params
    delta = float(params["delta"])
    level = float(params["level"])
    replications = int(params["replications"])
    cfg = config.sim

    def block_counts(span):
        s, e = span
        return excursion_poisson_counts(delta, level, e - s, cfg, index_offset=s)

    counts = np.concatenate(_map_ordered(block_counts,
                                         _index_blocks(replications), threads))
    target = level / delta
    mean = float(counts.mean())
    se = float(counts.std(ddof=1)) / math.sqrt(len(counts))
    observed = np.bincount(counts)
    expected = len(counts) * stats.poisson.pmf(np.arange(len(observed)), mean)
    rows = tuple((int(k), int(o), float(x))
                 for k, (o, x) in enumerate(zip(observed, expected)))
    table = Table("excursions", ("count", "observed", "expected"), rows)
    chi2, dof, p_value = _poisson_gof(observed, mean)
    mean_ok = abs(mean - target) <= 3.0 * se
    gof_ok = bool(p_value > 0.01) if not math.isnan(p_value) else False
    summary = {
        "estimate": mean,
        "se": se,
        "target": target,
        "chi2": chi2,
        "dof": dof,
        "p_value": p_value,
        "replications": len(counts),
    }
    return ExperimentResult("excursion-poisson", summary, (table,),
                            bool(mean_ok and gof_ok))


def _poisson_gof(observed: np.ndarray, rate: float) -> tuple:
    """Chi-square fit statistic against Poisson(rate), rate estimated.

    Bins are merged from both tails until every expected count reaches
    five; one degree of freedom is charged for the fitted rate.
    """
    n = int(observed.sum())
    values = np.arange(len(observed))
    expected = n * stats.poisson.pmf(values, rate)
    expected[-1] += n * stats.poisson.sf(values[-1], rate)
    lo, hi = 0, len(observed) - 1
    while hi > lo and expected[lo] < 5.0:
        expected[lo + 1] += expected[lo]
        observed = observed.copy()
        observed[lo + 1] += observed[lo]
        lo += 1
    while hi > lo and expected[hi] < 5.0:
        expected[hi - 1] += expected[hi]
        observed = observed.copy()
        observed[hi - 1] += observed[hi]
        hi -= 1
    obs = observed[lo:hi + 1].astype(float)
    exp = expected[lo:hi + 1]
    dof = len(obs) - 2
    if dof < 1:
        return math.nan, dof, math.nan
    chi2 = float(((obs - exp) ** 2 / exp).sum())
    return chi2, dof, float(stats.chi2.sf(chi2, dof))


_RUNNERS = {
    "simulate": _run_simulate,
    "stationary": _run_stationary,
    "occupation": _run_occupation,
    "tv-decay": _run_tv_decay,
    "coupling-holder": _run_coupling_holder,
    "lyapunov": _run_lyapunov,
    "partition-check": _run_partition_check,
    "generator-check": _run_generator_check,
    "excursion-poisson": _run_excursion_poisson,
}


def run_experiment(config: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    """Run the configured experiment with at most `threads` workers."""
    return _RUNNERS[config.kind](config, max(1, int(threads)))
