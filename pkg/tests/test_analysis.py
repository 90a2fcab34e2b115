import math

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

import walsh_lab as wl
from walsh_lab.analysis import (
    SpiderHistogram,
    bound_constants,
    coupling_cost,
    fit_decay_rate,
    generator_consistency_check,
    holder_bound_check,
    holder_exponent,
    occupation_fractions,
    partition_of_local_time_check,
    spider_histogram,
    stationary_bin_edges,
    stationary_histogram,
    tv_distance,
)
from walsh_lab.geometry import ORIGIN, SpinningMeasure, TreePoint
from walsh_lab.model import CoefficientField, FluxConditionError, RayFunction
from walsh_lab.simulate import SimConfig
from oracles import holder_exponent as oracle_exponent
from oracles import holder_prefactor as oracle_prefactor

MU3 = SpinningMeasure.from_weights([0.5, 0.3, 0.2])
FIELD3 = CoefficientField.constant(MU3.ids, g=-1.0, sigma=1.0)
PROFILE3 = wl.spider_stationary(FIELD3, MU3, np.linspace(0.0, 14.0, 4000))

EDGES2 = {0: np.array([0.0, 1.0, math.inf]), 1: np.array([0.0, 1.0, math.inf])}


def hist2(m00, m01, m10, m11):
    return SpiderHistogram(edges=EDGES2,
                           masses={0: np.array([m00, m01]), 1: np.array([m10, m11])},
                           sample_count=1)


# ------------------------------------------------------------- histograms


def test_histogram_validation():
    with pytest.raises(ValueError):
        hist2(0.5, 0.5, 0.5, 0.5)  # masses sum to 2
    with pytest.raises(ValueError):
        SpiderHistogram(edges={0: np.array([0.0, 1.0, 0.5])},
                        masses={0: np.array([0.5, 0.5])}, sample_count=1)
    with pytest.raises(ValueError):
        SpiderHistogram(edges={0: np.array([0.0, math.inf])},
                        masses={1: np.array([1.0])}, sample_count=1)


def test_single_sample_single_cell():
    h = spider_histogram([TreePoint(0, 1.0)], edges={0: np.array([0.0, math.inf])})
    assert h.masses[0].tolist() == [1.0]
    assert h.sample_count == 1


def test_histogram_rejects_origin_and_unknown_ray():
    with pytest.raises(ValueError):
        spider_histogram([ORIGIN, TreePoint(0, 1.0)], edges=EDGES2)
    with pytest.raises(ValueError):
        spider_histogram([TreePoint(7, 1.0)], edges=EDGES2)


def test_histogram_accepts_arrays_and_points():
    ids = np.array([0, 0, 1, 1])
    radii = np.array([0.5, 1.5, 0.5, 2.5])
    a = spider_histogram((ids, radii), edges=EDGES2)
    b = spider_histogram([TreePoint(i, r) for i, r in zip(ids, radii)], edges=EDGES2)
    assert a.same_binning(b)
    for i in (0, 1):
        assert np.array_equal(a.masses[i], b.masses[i])
    assert a.masses[0].tolist() == [0.25, 0.25]


def test_equal_width_default_binning():
    ids = np.zeros(100, dtype=int)
    radii = np.linspace(0.01, 4.0, 100)
    h = spider_histogram((ids, radii), bins=4)
    assert len(h.masses[0]) == 4
    assert h.edges[0][-1] == math.inf
    assert h.ray_mass(0) == pytest.approx(1.0, abs=1e-12)


def test_stationary_bin_edges_allocation():
    edges = stationary_bin_edges(PROFILE3, 40)
    assert {i: len(e) - 1 for i, e in edges.items()} == {0: 20, 1: 12, 2: 8}
    ana = stationary_histogram(PROFILE3, edges)
    for ray_id in MU3.ids:
        per_cell = ana.masses[ray_id] / ana.ray_mass(ray_id)
        assert np.allclose(per_cell, 1.0 / len(per_cell), atol=1e-6)
        assert ana.ray_mass(ray_id) == pytest.approx(MU3.weight_of(ray_id), abs=1e-9)
    with pytest.raises(ValueError):
        stationary_bin_edges(PROFILE3, 2)


def test_histogram_matches_profile_sampler():
    # inverse-CDF sampler driven by the profile's own cumulative tables
    rng = np.random.default_rng(7)
    n = 1_000_000
    ids = rng.choice(MU3.ids, p=MU3.weight_array, size=n)
    radii = np.empty(n)
    for ray_id in MU3.ids:
        mask = ids == ray_id
        cum = PROFILE3.cumulative(ray_id)
        u = rng.uniform(0.0, float(cum[-1]), size=int(mask.sum()))
        radii[mask] = np.interp(u, cum, PROFILE3.grid)
    edges = stationary_bin_edges(PROFILE3, 40)
    emp = spider_histogram((ids, radii), edges=edges)
    ana = stationary_histogram(PROFILE3, edges)
    for ray_id in MU3.ids:
        m = ana.masses[ray_id]
        se = np.sqrt(m * (1.0 - m) / n)
        assert np.all(np.abs(emp.masses[ray_id] - m) < 5.0 * se)


# -------------------------------------------------------------- distances


def test_tv_identical_and_disjoint():
    a = hist2(0.5, 0.0, 0.5, 0.0)
    b = hist2(0.0, 0.5, 0.0, 0.5)
    assert tv_distance(a, a) == 0.0
    assert tv_distance(a, b) == pytest.approx(1.0)


def test_tv_half_example():
    a = hist2(0.5, 0.5, 0.0, 0.0)
    b = hist2(1.0, 0.0, 0.0, 0.0)
    assert tv_distance(a, b) == pytest.approx(0.5)


def test_tv_binning_mismatch():
    a = hist2(0.5, 0.5, 0.0, 0.0)
    other = SpiderHistogram(edges={0: np.array([0.0, 2.0, math.inf]),
                                   1: np.array([0.0, 1.0, math.inf])},
                            masses={0: np.array([1.0, 0.0]), 1: np.array([0.0, 0.0])},
                            sample_count=1)
    with pytest.raises(ValueError):
        tv_distance(a, other)


def test_tv_weighted_endpoint_convention():
    a = hist2(1.0, 0.0, 0.0, 0.0)
    b = hist2(0.0, 1.0, 0.0, 0.0)
    # finite cell takes the right edge, overflow cell its left edge
    got = tv_distance(a, b, weight=math.exp)
    assert got == pytest.approx(2.0 * math.e)
    assert tv_distance(a, b, weight=lambda r: 1.0) == pytest.approx(2 * tv_distance(a, b))


@given(st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=4, max_size=4),
       st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=4, max_size=4),
       st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=4, max_size=4))
@settings(max_examples=60, deadline=None)
def test_tv_is_a_metric(wa, wb, wc):
    def normalize(w):
        t = sum(w) or 1.0
        v = [x / t for x in w]
        v[0] += 1.0 - sum(v)
        return hist2(*v)

    a, b, c = normalize(wa), normalize(wb), normalize(wc)
    dab, dba = tv_distance(a, b), tv_distance(b, a)
    assert dab == dba
    assert tv_distance(a, a) == 0.0
    assert dab <= tv_distance(a, c) + tv_distance(c, b) + 1e-12
    assert 0.0 <= dab <= 1.0 + 1e-12


# -------------------------------------------------------------- occupation


def test_occupation_single_ray():
    mu = SpinningMeasure.from_weights([1.0])
    field = CoefficientField.constant([0], g=-1.0, sigma=1.0)
    path = wl.simulate_walsh_diffusion(field, mu, ORIGIN, SimConfig(5.0, 1e-3, 3))
    rep = occupation_fractions(path)
    assert rep.ray_fractions == {0: 1.0}
    assert rep.burn_in_steps == 500


def test_occupation_symmetric_two_rays():
    mu = SpinningMeasure.from_weights([0.5, 0.5])
    field = CoefficientField.constant([0, 1], g=-1.0, sigma=1.0)
    path = wl.simulate_walsh_diffusion(field, mu, ORIGIN, SimConfig(500.0, 2e-3, 21))
    rep = occupation_fractions(path)
    assert abs(rep.ray_fractions[0] - 0.5) < 0.03
    assert abs(rep.ray_fractions[1] - 0.5) < 0.03


def test_occupation_cells_and_validation():
    path = wl.simulate_walsh_diffusion(FIELD3, MU3, ORIGIN, SimConfig(2.0, 1e-3, 5))
    edges = stationary_bin_edges(PROFILE3, 10)
    rep = occupation_fractions(path, edges=edges)
    total = sum(rep.cell_fractions.ray_mass(i) for i in MU3.ids)
    assert total == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        occupation_fractions(path, burn_in=1.0)


# --------------------------------------------------------------- rate fits


def test_fit_exact_exponential():
    t = np.array([0.5, 1.0, 1.5, 2.0, 3.0, 4.0])
    fit = fit_decay_rate(t, np.exp(-0.5 * t))
    assert abs(fit.rate - 0.5) < 1e-9
    assert fit.stderr < 1e-9
    assert fit.window == tuple(range(6))


def test_fit_excludes_noise_floor():
    t = np.arange(1.0, 9.0)
    v = np.exp(-t)
    floor = math.exp(-5.5)
    fit = fit_decay_rate(t, v, noise_floor=floor)
    assert fit.window == (0, 1, 2, 3, 4)
    assert abs(fit.rate - 1.0) < 1e-9
    assert fit.noise_floor == floor


def test_fit_refusals():
    t = np.arange(1.0, 7.0)
    with pytest.raises(ValueError):
        fit_decay_rate(t, np.full(6, 0.01), noise_floor=0.01)
    with pytest.raises(ValueError):
        fit_decay_rate(t, np.array([1.0, 0.5, 0.2, 0.01, 0.01, 0.01]), noise_floor=0.05)


# ----------------------------------------------------------- coupling cost


def test_coupling_cost_identity_zero():
    plan = wl.build_coupling_plan(MU3, MU3, kind="identity")
    pairs = wl.coupled_walsh_bm_paths(plan, SimConfig(0.5, 1e-3, 3, path_count=10))
    cost = coupling_cost(pairs, q=1.0)
    assert cost.estimate == 0.0 and cost.se == 0.0
    assert cost.pair_count == 10


def test_coupling_cost_triangle_bound():
    plan = wl.build_coupling_plan(MU3, MU3, kind="independent")
    pairs = list(wl.coupled_walsh_bm_paths(plan, SimConfig(1.0, 1e-3, 9, path_count=50)))
    for pair in pairs:
        gap = np.where(pair.first.rays == pair.second.rays,
                       np.abs(pair.first.radii - pair.second.radii),
                       pair.first.radii + pair.second.radii)
        assert gap.max() <= 2.0 * pair.first.radii.max() + 1e-12
    c1 = coupling_cost(pairs, q=1.0)
    c2 = coupling_cost(pairs, q=2.0)
    assert 0.0 < c1.estimate <= c2.estimate  # Jensen: moments increase in q
    assert c1.se > 0.0


def test_coupling_cost_validation():
    with pytest.raises(ValueError):
        coupling_cost([], q=1.0)
    plan = wl.build_coupling_plan(MU3, MU3, kind="identity")
    pairs = list(wl.coupled_walsh_bm_paths(plan, SimConfig(0.1, 1e-3, 1, path_count=2)))
    with pytest.raises(ValueError):
        coupling_cost(pairs, q=0.5)


# ------------------------------------------------------------ Hoelder check


def test_bound_constants_closed_form():
    assert abs(bound_constants(2.0, 1.0, 0.39, 1.0).c1 - 1.0) < 1e-10


@pytest.mark.parametrize("p,q,T", [(2.0, 1.0, 1.0), (3.0, 1.5, 2.0), (2.5, 1.0, 0.7)])
def test_bound_constants_match_high_precision(p, q, T):
    rho = 0.9 * p / (p + 1.0)
    got = bound_constants(p, q, rho, T)
    assert got.admissible
    assert abs(got.c1 - float(oracle_prefactor(p, q, T))) < 1e-10


@pytest.mark.parametrize("p,r", [(2, 1), (3, 2), (5, 1)])
def test_holder_exponent_matches_fraction(p, r):
    assert holder_exponent(p, r) == pytest.approx(float(oracle_exponent(p, r)), abs=1e-15)
    assert 0.0 < holder_exponent(p, r) < p / (p + 1.0)


def test_holder_exponent_example():
    assert holder_exponent(2, 1) == pytest.approx(0.4, abs=1e-15)


@pytest.mark.parametrize("p,q,rho", [(2.0, 2.0, 0.3), (2.0, 3.0, 0.3),
                                     (2.0, 0.5, 0.3), (2.0, 1.0, 0.7),
                                     (2.0, 1.0, 0.0)])
def test_holder_check_rejects_inadmissible(p, q, rho):
    w = np.array([0.1, 0.2, 0.4])
    assert not bound_constants(p, q, rho, 1.0).admissible
    with pytest.raises(ValueError):
        holder_bound_check(p, q, rho, 1.0, w, w)


def test_holder_check_shape_verdicts():
    w = np.array([0.05, 0.1, 0.2, 0.4])
    good = holder_bound_check(2.0, 1.0, 0.4, 1.0, w, 0.9 * w**0.5)
    assert good.passed and good.bound_ok and good.slope_ok
    assert good.slope == pytest.approx(0.5, abs=1e-9)
    assert good.fitted_c == pytest.approx(0.9 * 0.4**0.1, abs=1e-12)
    flat = holder_bound_check(2.0, 1.0, 0.4, 1.0, w, 0.9 * w**0.2)
    assert not flat.slope_ok and not flat.bound_ok and not flat.passed


def test_holder_check_input_validation():
    with pytest.raises(ValueError):
        holder_bound_check(2.0, 1.0, 0.4, 1.0, np.array([0.1]), np.array([0.1]))
    with pytest.raises(ValueError):
        holder_bound_check(2.0, 1.0, 0.4, 1.0, np.array([0.1, 0.0]),
                           np.array([0.1, 0.2]))


# ----------------------------------------------------- local-time partition


def test_partition_check_trivial_and_target_subsets():
    cfg = SimConfig(horizon=20.0, dt=2e-4, seed=61, path_count=60)
    report = partition_of_local_time_check(
        wl.walsh_bm_paths(MU3, cfg), MU3, subsets=[(1,), tuple(MU3.ids), ()])
    assert not report.inconclusive
    by_set = {c.ray_set: c for c in report.checks}
    assert by_set[tuple(MU3.ids)].ratio == 1.0
    assert by_set[()].ratio == 0.0
    assert abs(by_set[(1,)].ratio - 0.3) <= 3.0 * by_set[(1,)].se + 0.03
    assert report.passed


def test_partition_check_inconclusive_without_local_time():
    field = CoefficientField.constant([0], g=0.0, sigma=1.0)
    mu = SpinningMeasure.from_weights([1.0])
    cfg = SimConfig(horizon=0.5, dt=1e-3, seed=5, path_count=4)
    paths = [wl.simulate_walsh_diffusion(field, mu, TreePoint(0, 6.0), cfg,
                                         path_index=i) for i in range(4)]
    report = partition_of_local_time_check(paths, mu, subsets=[(0,)])
    assert report.inconclusive and not report.passed


def test_partition_check_rejects_unknown_ray():
    cfg = SimConfig(horizon=0.1, dt=1e-3, seed=0, path_count=1)
    with pytest.raises(ValueError):
        partition_of_local_time_check(wl.walsh_bm_paths(MU3, cfg), MU3, subsets=[(9,)])


# ------------------------------------------------------- generator check


R_SQUARED = RayFunction(value=lambda r, i: r * r, d1=lambda r, i: 2.0 * r,
                        d2=lambda r, i: 2.0)


def test_generator_check_on_a_ray():
    cfg = SimConfig(horizon=0.08, dt=5e-4, seed=12, path_count=40_000)
    report = generator_consistency_check(FIELD3, MU3, R_SQUARED, TreePoint(0, 1.0),
                                         [0.01, 0.02, 0.04, 0.08], cfg)
    assert report.generator_value == pytest.approx(-1.0)
    assert report.passed
    assert abs(report.quotients[0] - (-1.0)) < 0.5


def test_generator_check_at_driftless_origin():
    field = CoefficientField.constant(MU3.ids, g=0.0, sigma=1.5)
    cfg = SimConfig(horizon=0.08, dt=5e-4, seed=14, path_count=40_000)
    report = generator_consistency_check(field, MU3, R_SQUARED, ORIGIN,
                                         [0.02, 0.04, 0.08], cfg)
    # f = r^2 has zero flux, and L f(0) = sum_i mu_i sigma_i^2
    assert report.generator_value == pytest.approx(2.25)
    assert report.passed


def test_generator_origin_limit_by_sqrt_extrapolation():
    # with drift at the vertex the quotient approaches its limit at a
    # root-h rate, so the limit is recovered by extrapolation instead
    cfg = SimConfig(horizon=0.08, dt=5e-4, seed=14, path_count=40_000)
    report = generator_consistency_check(FIELD3, MU3, R_SQUARED, ORIGIN,
                                         [0.01, 0.02, 0.04, 0.08], cfg)
    assert report.generator_value == pytest.approx(1.0)
    design = np.vstack([np.ones(4), np.sqrt(report.h_values)]).T
    intercept, slope = np.linalg.lstsq(design, report.quotients, rcond=None)[0]
    assert slope < 0.0
    assert abs(intercept - report.generator_value) < 0.05


def test_generator_check_constant_function_is_exact():
    const = RayFunction(value=lambda r, i: 3.0, d1=lambda r, i: 0.0, d2=lambda r, i: 0.0)
    cfg = SimConfig(horizon=0.02, dt=1e-3, seed=2, path_count=50)
    report = generator_consistency_check(FIELD3, MU3, const, TreePoint(1, 0.5),
                                         [0.01, 0.02], cfg)
    assert report.generator_value == 0.0
    assert np.all(report.quotients == 0.0)
    assert report.passed


def test_generator_check_rejects_flux_violation():
    tilted = RayFunction(value=lambda r, i: r, d1=lambda r, i: 1.0, d2=lambda r, i: 0.0)
    cfg = SimConfig(horizon=0.02, dt=1e-3, seed=2, path_count=10)
    with pytest.raises(FluxConditionError):
        generator_consistency_check(FIELD3, MU3, tilted, TreePoint(0, 1.0),
                                    [0.01, 0.02], cfg)


def test_generator_check_validates_h_grid():
    cfg = SimConfig(horizon=0.02, dt=1e-3, seed=2, path_count=10)
    with pytest.raises(ValueError):
        generator_consistency_check(FIELD3, MU3, R_SQUARED, TreePoint(0, 1.0),
                                    [0.01, 0.04], cfg)
    with pytest.raises(ValueError):
        generator_consistency_check(FIELD3, MU3, R_SQUARED, TreePoint(0, 1.0),
                                    [], cfg)


# ----------------------------------------------- weighted decay invariant


def test_weighted_distance_decays_at_lyapunov_scale():
    # one-ray contracting model: the certified rate is k = g^2 / (2 sigma^2)
    mu = SpinningMeasure.from_weights([1.0])
    field = CoefficientField.constant([0], g=-1.0, sigma=1.0)
    profile = wl.spider_stationary(field, mu, np.linspace(0.0, 16.0, 4000))
    lyap = wl.lyapunov_for_field(field)
    k = lyap.k
    assert k == pytest.approx(0.5)
    edges = stationary_bin_edges(profile, 20)
    ana = stationary_histogram(profile, edges)
    times = [1.0, 2.0, 3.0, 4.0, 5.0]
    cfg = SimConfig(horizon=5.0, dt=2e-3, seed=77, path_count=20_000)
    snaps = wl.walsh_snapshots(field, mu, TreePoint(0, 2.0), cfg, times)
    weight = lambda r: math.exp(lyap.lambda_star * r)
    values = []
    for t in times:
        ids, radii = snaps[t]
        keep = radii > 0.0
        emp = spider_histogram((ids[keep], radii[keep]), edges=edges)
        values.append(tv_distance(emp, ana, weight=weight))
    fit = fit_decay_rate(times, values)
    assert 0.5 * k <= fit.rate <= 2.0 * k
