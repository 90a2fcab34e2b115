"""Path generation for Walsh diffusions on spiders.

Radial legs use Euler-Maruyama with full reflection (r -> |r|).  Spiders
resample the ray from the spinning measure at every origin visit, where a
visit is a step whose pre-reflection value is nonpositive or whose landing
radius snaps to zero.  Walsh Brownian motion is the driftless unit-dispersion
special case.  Coupled diffusions follow the alternating construction: the
ray-bound leg carries the common noise, the leg at the origin runs as a
fresh Walsh diffusion, roles swap when the bound leg reaches the origin,
and the pair merges at the first grid step both legs visit the origin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

from ._rng import TAG_BRIDGE, TAG_FRESH, TAG_RADIAL, TAG_RAYS, stream
from .geometry import ORIGIN, CouplingPlan, SpinningMeasure, TreePoint
from .model import CoefficientField, RadialCoefficient, RayCoefficients, scale_transform

ZERO_RADIUS_TOL = 1e-12

# floats per block of simultaneously stepped paths; caps transient memory
_BLOCK_BUDGET = 2 * 10**7
_STEP_CHUNK = 20_000


class NumericsError(RuntimeError):
    """A scheme step produced a non-finite value."""

    def __init__(self, step: int, message: str):
        self.step = step
        super().__init__(message)


# --------------------------------------------------------------- config


@dataclass(frozen=True)
class SimConfig:
    """Grid, seed, and ensemble size for one simulation run."""

    horizon: float
    dt: float
    seed: int
    path_count: int = 1
    local_time_epsilon: float = 0.02

    def __post_init__(self) -> None:
        if not (math.isfinite(self.horizon) and self.horizon > 0):
            raise ValueError("horizon must be positive and finite")
        if not (math.isfinite(self.dt) and self.dt > 0):
            raise ValueError("dt must be positive and finite")
        if not self.dt < self.horizon:
            raise ValueError("dt must be smaller than the horizon")
        if self.path_count != int(self.path_count) or self.path_count < 1:
            raise ValueError("path_count must be a positive integer")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ValueError("seed must be a nonnegative integer")
        if not 0.0 < self.local_time_epsilon < 1.0:
            raise ValueError("local_time_epsilon must lie in (0, 1)")
        if self.local_time_epsilon < 10.0 * self.dt:
            raise ValueError("local_time_epsilon must be at least 10*dt")
        n = round(self.horizon / self.dt)
        if abs(n * self.dt - self.horizon) > 1e-6 * self.horizon:
            raise ValueError("horizon must be a whole number of steps")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt


# ----------------------------------------------------------- path types


@dataclass(frozen=True, eq=False)
class RadialPath:
    """One reflected radial path on the time grid.

    `increments` holds the Brownian increments actually applied;
    `crossings[k]` records whether the pre-reflection value of step k
    was nonpositive (a sub-step origin visit).
    """

    times: np.ndarray
    radii: np.ndarray
    increments: np.ndarray
    crossings: np.ndarray

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])


@dataclass(frozen=True, eq=False)
class WalshPath:
    """A spider path: radii plus per-node ray ids and excursion labels.

    Zero-set nodes carry ray -1 and excursion label 0.  Labels increase
    with time and all nodes sharing a label lie on one ray.  `explosion_flag`
    is None or (time, ray id) of the first passage beyond a finite
    domain radius; the path continues past it.
    """

    times: np.ndarray
    rays: np.ndarray
    radii: np.ndarray
    excursion_labels: np.ndarray
    driving_increments: np.ndarray
    explosion_flag: Optional[tuple] = None

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def state_at(self, k: int) -> TreePoint:
        r = float(self.radii[k])
        if r == 0.0:
            return ORIGIN
        return TreePoint(ray=int(self.rays[k]), radius=r)

    @property
    def states(self) -> list:
        return [self.state_at(k) for k in range(len(self.times))]


@dataclass(frozen=True, eq=False)
class CoupledPaths:
    """Two spider paths on one grid with their coupling time.

    `tau` is the first grid time both legs visit the origin in the same
    step (math.inf when not reached); the legs are identical from tau on.
    """

    first: WalshPath
    second: WalshPath
    tau: float


@dataclass(frozen=True, eq=False)
class LocalTimeEstimate:
    """Shell-occupation local time along one path.

    values[k] = (1/2 eps) * sum of sigma^2(X) dt over shell nodes up to k;
    `split` restricts the sum to excursions whose ray lies in `ray_set`.
    Zero-radius nodes belong to no excursion and are excluded from both.
    """

    times: np.ndarray
    values: np.ndarray
    split: np.ndarray
    epsilon: float
    ray_set: tuple

    @property
    def total(self) -> float:
        return float(self.values[-1])

    @property
    def split_total(self) -> float:
        return float(self.split[-1])


@dataclass(frozen=True, eq=False)
class ExcursionStats:
    """Excursion decomposition of a radial path."""

    intervals: tuple
    heights: np.ndarray
    count_above_delta: int
    delta: float
    count_before_level: Optional[int]
    reached_level: bool
    local_time: Optional[LocalTimeEstimate]


# ------------------------------------------------------------- helpers


def _coef_fn(coef: RadialCoefficient):
    if coef.is_constant:
        c = coef.constant_value()
        return lambda r: c
    return coef


def _measure_tables(mu: SpinningMeasure):
    ids = np.asarray(mu.ids, dtype=np.int64)
    if np.any(ids == -1):
        raise ValueError("atom id -1 is reserved for the zero-set marker")
    cumw = np.cumsum(mu.weight_array)
    return ids, cumw


def _draw_index(gen: np.random.Generator, cumw: np.ndarray) -> int:
    j = int(np.searchsorted(cumw, gen.random(), side="right"))
    return min(j, len(cumw) - 1)


def _field_evaluator(field: CoefficientField, ids: np.ndarray):
    entries = [field.coefficients(int(i)) for i in ids]
    ells = np.array([e.ell for e in entries])
    if all(e.g.is_constant and e.sigma.is_constant for e in entries):
        gtab = np.array([e.g.constant_value() for e in entries])
        stab = np.array([e.sigma.constant_value() for e in entries])

        def evaluate(r, ray_idx):
            return gtab[ray_idx], stab[ray_idx]

        return evaluate, ells

    def evaluate(r, ray_idx):
        gv = np.empty_like(r)
        sv = np.empty_like(r)
        for j, e in enumerate(entries):
            m = ray_idx == j
            if m.any():
                rj = r[m]
                gv[m] = e.g(rj)
                sv[m] = e.sigma(rj)
        return gv, sv

    return evaluate, ells


def _block_sizes(path_count: int, n_steps: int) -> Iterator[tuple]:
    width = max(1, min(path_count, _BLOCK_BUDGET // max(1, n_steps)))
    start = 0
    while start < path_count:
        stop = min(start + width, path_count)
        yield start, stop
        start = stop


def _fill_normals(gens, n: int) -> np.ndarray:
    out = np.empty((len(gens), n))
    for i, g in enumerate(gens):
        out[i] = g.standard_normal(n)
    return out


# ----------------------------------------------------- reflected radial


def _reflected_rows(g, sigma, r0, dt: float, z: np.ndarray):
    """EM rows with reflection; returns (radii, crossings)."""
    gf, sf = _coef_fn(g), _coef_fn(sigma)
    n_paths, n = z.shape
    sq = math.sqrt(dt)
    radii = np.empty((n_paths, n + 1))
    crossings = np.empty((n_paths, n), dtype=bool)
    r = np.full(n_paths, float(r0)) if np.isscalar(r0) else np.asarray(r0, dtype=float).copy()
    radii[:, 0] = r
    for k in range(n):
        s = r + gf(r) * dt + sf(r) * (sq * z[:, k])
        if not np.all(np.isfinite(s)):
            raise NumericsError(k, f"non-finite radius at step {k}")
        crossings[:, k] = s <= 0.0
        r = np.abs(s)
        r[r < ZERO_RADIUS_TOL] = 0.0
        radii[:, k + 1] = r
    return radii, crossings


def simulate_reflected_radial(
    g: RadialCoefficient,
    sigma: RadialCoefficient,
    r0: float,
    cfg: SimConfig,
    path_index: int = 0,
) -> RadialPath:
    """One reflected Euler-Maruyama path of dr = g dt + sigma dB, r -> |r|."""
    RayCoefficients(g=g, sigma=sigma)  # validates sigma > 0 on its range
    if not (math.isfinite(r0) and r0 >= 0):
        raise ValueError("r0 must be finite and nonnegative")
    z = stream(cfg.seed, path_index, TAG_RADIAL).standard_normal(cfg.n_steps)
    radii, crossings = _reflected_rows(g, sigma, r0, cfg.dt, z[None, :])
    return RadialPath(
        times=cfg.times(),
        radii=radii[0],
        increments=math.sqrt(cfg.dt) * z,
        crossings=crossings[0],
    )


# ------------------------------------------------------ Walsh diffusion


def _walsh_blocks(field, mu, x0, cfg, *, snapshot_steps=None, index_offset=0,
                  start_states=None):
    """Step blocks of spider paths; yields per-block state dictionaries.

    Path i draws from stream index i + index_offset.  With snapshot_steps
    given, radii/ray/label histories are not kept and each block yields
    only the requested snapshots.  start_states, when given, supplies one
    (ray id, radius) start per path and overrides x0; zero-radius entries
    draw their first ray from the measure like an origin start.
    """
    ids, cumw = _measure_tables(mu)
    if not field.matches_measure(mu):
        raise ValueError("field rays and measure atoms must agree")
    evaluate, ells = _field_evaluator(field, ids)
    check_ell = bool(np.any(np.isfinite(ells)))
    r0 = ray0 = None
    start_radii = start_rays = None
    if start_states is not None:
        sid = np.asarray(start_states[0], dtype=np.int64)
        start_radii = np.asarray(start_states[1], dtype=float)
        if sid.shape != (cfg.path_count,) or start_radii.shape != (cfg.path_count,):
            raise ValueError("start states must provide one (ray, radius) per path")
        if not np.all(np.isfinite(start_radii)) or np.any(start_radii < 0):
            raise ValueError("start radii must be finite and nonnegative")
        lookup = {int(v): k for k, v in enumerate(ids)}
        start_rays = np.zeros(cfg.path_count, dtype=np.int64)
        for k in np.flatnonzero(start_radii > 0):
            j = lookup.get(int(sid[k]))
            if j is None:
                raise KeyError(f"no atom with id {int(sid[k])}")
            if start_radii[k] >= ells[j]:
                raise ValueError(f"start radius {start_radii[k]} outside domain "
                                 f"of ray {int(sid[k])}")
            start_rays[k] = j
    elif x0.is_origin:
        r0, ray0 = 0.0, None
    else:
        ray0 = mu.index_of(x0.ray)
        r0 = x0.radius
        if r0 >= ells[ray0]:
            raise ValueError(f"start radius {r0} outside domain of ray {x0.ray}")
    n = cfg.n_steps
    dt, sq = cfg.dt, math.sqrt(cfg.dt)
    keep_rows = snapshot_steps is None
    snap_set = set() if keep_rows else set(int(s) for s in snapshot_steps)

    for start, stop in _block_sizes(cfg.path_count, n):
        width = stop - start
        lo, hi = start + index_offset, stop + index_offset
        gens_u = [stream(cfg.seed, i, TAG_RAYS) for i in range(lo, hi)]
        gens_z = [stream(cfg.seed, i, TAG_RADIAL) for i in range(lo, hi)]
        if start_states is not None:
            r = start_radii[start:stop].copy()
            ray = start_rays[start:stop].copy()
            for i in np.flatnonzero(r == 0.0):
                ray[i] = _draw_index(gens_u[i], cumw)
        elif ray0 is None:
            r = np.full(width, r0)
            ray = np.array([_draw_index(g, cumw) for g in gens_u], dtype=np.int64)
        else:
            r = np.full(width, r0)
            ray = np.full(width, ray0, dtype=np.int64)
        counter = np.ones(width, dtype=np.int64)
        exp_time = np.full(width, np.nan)
        exp_ray = np.full(width, -1, dtype=np.int64)
        if keep_rows:
            radii = np.empty((width, n + 1))
            rays_out = np.empty((width, n + 1), dtype=np.int64)
            labels = np.empty((width, n + 1), dtype=np.int64)
            incs = np.empty((width, n))
            radii[:, 0] = r
            rays_out[:, 0] = np.where(r == 0.0, -1, ids[ray])
            labels[:, 0] = np.where(r == 0.0, 0, counter)
        snaps = {}
        if not keep_rows and 0 in snap_set:
            snaps[0] = (ids[ray].copy(), r.copy())

        done = 0
        while done < n:
            m = min(_STEP_CHUNK, n - done)
            z = _fill_normals(gens_z, m)
            for j in range(m):
                k = done + j
                zc = z[:, j]
                gv, sv = evaluate(r, ray)
                s = r + gv * dt + sv * (sq * zc)
                if not np.all(np.isfinite(s)):
                    raise NumericsError(k, f"non-finite radius at step {k}")
                cross = s <= 0.0
                r = np.abs(s)
                r[r < ZERO_RADIUS_TOL] = 0.0
                if check_ell:
                    blown = np.isnan(exp_time) & (r >= ells[ray])
                    if blown.any():
                        exp_time[blown] = (k + 1) * dt
                        exp_ray[blown] = ids[ray[blown]]
                zero = r == 0.0
                event = cross | zero
                if event.any():
                    for i in np.flatnonzero(event):
                        ray[i] = _draw_index(gens_u[i], cumw)
                    counter[event] += 1
                if keep_rows:
                    radii[:, k + 1] = r
                    rays_out[:, k + 1] = np.where(zero, -1, ids[ray])
                    labels[:, k + 1] = np.where(zero, 0, counter)
                    incs[:, k] = sq * zc
                elif (k + 1) in snap_set:
                    snaps[k + 1] = (np.where(zero, -1, ids[ray]), r.copy())
            done += m

        block = {"start": start, "stop": stop, "exp_time": exp_time, "exp_ray": exp_ray}
        if keep_rows:
            block.update(radii=radii, rays=rays_out, labels=labels, incs=incs)
        else:
            block["snaps"] = snaps
        yield block


def _paths_from_block(block, times) -> Iterator[WalshPath]:
    for i in range(block["stop"] - block["start"]):
        explosion = None
        if not np.isnan(block["exp_time"][i]):
            explosion = (float(block["exp_time"][i]), int(block["exp_ray"][i]))
        yield WalshPath(
            times=times,
            rays=block["rays"][i].copy(),
            radii=block["radii"][i].copy(),
            excursion_labels=block["labels"][i].copy(),
            driving_increments=block["incs"][i].copy(),
            explosion_flag=explosion,
        )


def walsh_diffusion_paths(
    field: CoefficientField, mu: SpinningMeasure, x0: TreePoint, cfg: SimConfig,
    index_offset: int = 0,
) -> Iterator[WalshPath]:
    """Iterate cfg.path_count spider paths, simulated in memory-capped blocks."""
    times = cfg.times()
    for block in _walsh_blocks(field, mu, x0, cfg, index_offset=index_offset):
        yield from _paths_from_block(block, times)


def simulate_walsh_diffusion(
    field: CoefficientField,
    mu: SpinningMeasure,
    x0: TreePoint,
    cfg: SimConfig,
    path_index: int = 0,
) -> WalshPath:
    """One spider path with reflect-and-resample origin handling."""
    one = SimConfig(cfg.horizon, cfg.dt, cfg.seed, 1, cfg.local_time_epsilon)
    block = next(iter(_walsh_blocks(field, mu, x0, one, index_offset=path_index)))
    return next(_paths_from_block(block, one.times()))


def simulate_walsh_bm(mu: SpinningMeasure, cfg: SimConfig, path_index: int = 0) -> WalshPath:
    """Walsh Brownian motion from the origin: unit-dispersion driftless spider."""
    field = CoefficientField.constant(mu.ids, g=0.0, sigma=1.0)
    return simulate_walsh_diffusion(field, mu, ORIGIN, cfg, path_index=path_index)


def walsh_bm_paths(mu: SpinningMeasure, cfg: SimConfig,
                   index_offset: int = 0) -> Iterator[WalshPath]:
    field = CoefficientField.constant(mu.ids, g=0.0, sigma=1.0)
    return walsh_diffusion_paths(field, mu, ORIGIN, cfg, index_offset=index_offset)


def _snapshot_steps(cfg: SimConfig, at_times) -> list:
    steps = []
    for t in at_times:
        k = round(t / cfg.dt)
        if abs(k * cfg.dt - t) > 1e-9 * max(1.0, abs(t)) or not 0 <= k <= cfg.n_steps:
            raise ValueError(f"snapshot time {t} is not on the grid")
        steps.append(int(k))
    return steps


def _collect_snapshots(field, mu, x0, cfg, at_times, start_states=None,
                       index_offset=0) -> dict:
    steps = _snapshot_steps(cfg, at_times)
    parts = {k: ([], []) for k in steps}
    for block in _walsh_blocks(field, mu, x0, cfg, snapshot_steps=steps,
                               start_states=start_states,
                               index_offset=index_offset):
        for k, (ids_arr, radii_arr) in block["snaps"].items():
            parts[k][0].append(ids_arr)
            parts[k][1].append(radii_arr)
    out = {}
    for t, k in zip(at_times, steps):
        out[float(t)] = (np.concatenate(parts[k][0]), np.concatenate(parts[k][1]))
    return out


def walsh_snapshots(
    field: CoefficientField,
    mu: SpinningMeasure,
    x0: TreePoint,
    cfg: SimConfig,
    at_times: Sequence[float],
    index_offset: int = 0,
) -> dict:
    """Ensemble marginals {t: (ray ids, radii)} at the requested grid times."""
    return _collect_snapshots(field, mu, x0, cfg, at_times,
                              index_offset=index_offset)


def walsh_snapshots_from_states(
    field: CoefficientField,
    mu: SpinningMeasure,
    states: tuple,
    cfg: SimConfig,
    at_times: Sequence[float],
    index_offset: int = 0,
) -> dict:
    """Marginals for an ensemble restarted from per-path (ray ids, radii)."""
    return _collect_snapshots(field, mu, ORIGIN, cfg, at_times, start_states=states,
                              index_offset=index_offset)


# ---------------------------------------------------- coupled Walsh BM


def _plan_tables(plan: CouplingPlan):
    probs, pairs = plan.flattened()
    cum = np.cumsum(probs)
    first_ids = np.asarray([p[0] for p in pairs], dtype=np.int64)
    second_ids = np.asarray([p[1] for p in pairs], dtype=np.int64)
    if np.any(first_ids == -1) or np.any(second_ids == -1):
        raise ValueError("atom id -1 is reserved for the zero-set marker")
    identical = bool(np.all((probs == 0.0) | (first_ids == second_ids)))
    return cum, first_ids, second_ids, identical


def _labels_from_events(radii: np.ndarray, crossings: np.ndarray):
    """Per-node excursion labels from snapped radii and crossing flags."""
    n = len(radii) - 1
    boundary = np.zeros(n + 1, dtype=bool)
    boundary[1:] = crossings | (radii[1:] == 0.0)
    counter = 1 + np.cumsum(boundary)
    labels = np.where(radii == 0.0, 0, counter)
    return labels, int(counter[-1])


def _coupled_bm_from_row(tables, times, dt, radii, crossings, z, gen_u) -> CoupledPaths:
    cum, first_ids, second_ids, identical = tables
    labels, n_exc = _labels_from_events(radii, crossings)
    cell = np.minimum(np.searchsorted(cum, gen_u.random(n_exc), side="right"), len(cum) - 1)
    pick = cell[np.maximum(labels - 1, 0)]
    rays1 = np.where(labels == 0, -1, first_ids[pick])
    rays2 = np.where(labels == 0, -1, second_ids[pick])
    incs = math.sqrt(dt) * z
    leg1 = WalshPath(times=times, rays=rays1, radii=radii, excursion_labels=labels,
                     driving_increments=incs)
    leg2 = WalshPath(times=times, rays=rays2, radii=radii.copy(), excursion_labels=labels.copy(),
                     driving_increments=incs.copy())
    return CoupledPaths(first=leg1, second=leg2, tau=0.0 if identical else math.inf)


def simulate_coupled_walsh_bm(
    plan: CouplingPlan, cfg: SimConfig, path_index: int = 0
) -> CoupledPaths:
    """Two Walsh BMs sharing one reflected driver, rays drawn per excursion.

    Both legs ride the same radial path, so their zero sets coincide
    exactly; per excursion one (ray, ray) pair is drawn from the plan.
    tau is 0 when the plan is supported on matching rays and infinity
    otherwise: this coupling has no merge mechanism.
    """
    tables = _plan_tables(plan)
    unit = RadialCoefficient.constant(1.0)
    zero = RadialCoefficient.constant(0.0)
    z = stream(cfg.seed, path_index, TAG_RADIAL).standard_normal(cfg.n_steps)
    radii, crossings = _reflected_rows(zero, unit, 0.0, cfg.dt, z[None, :])
    gen_u = stream(cfg.seed, path_index, TAG_RAYS)
    return _coupled_bm_from_row(tables, cfg.times(), cfg.dt,
                                radii[0], crossings[0], z, gen_u)


def coupled_walsh_bm_paths(plan: CouplingPlan, cfg: SimConfig,
                           index_offset: int = 0) -> Iterator[CoupledPaths]:
    """Iterate cfg.path_count shared-driver Walsh BM pairs in blocks."""
    tables = _plan_tables(plan)
    unit = RadialCoefficient.constant(1.0)
    zero = RadialCoefficient.constant(0.0)
    times = cfg.times()
    for start, stop in _block_sizes(cfg.path_count, 2 * cfg.n_steps):
        gens_z = [stream(cfg.seed, index_offset + i, TAG_RADIAL)
                  for i in range(start, stop)]
        z = _fill_normals(gens_z, cfg.n_steps)
        radii, crossings = _reflected_rows(zero, unit, 0.0, cfg.dt, z)
        for i in range(stop - start):
            gen_u = stream(cfg.seed, index_offset + start + i, TAG_RAYS)
            yield _coupled_bm_from_row(tables, times, cfg.dt,
                                       radii[i], crossings[i], z[i], gen_u)


# ------------------------------------------------- coupled diffusions


_PHASE_BOTH, _PHASE_X1_BOUND, _PHASE_X2_BOUND, _PHASE_MERGED = 0, 1, 2, 3


def _coupled_blocks(field, mu, x1, x2, cfg, *, snapshot_steps=None, index_offset=0):
    """Alternating-construction pair blocks; same recording switch as spiders."""
    ids, cumw = _measure_tables(mu)
    if not field.matches_measure(mu):
        raise ValueError("field rays and measure atoms must agree")
    if not field.sigma_angular_independent():
        raise ValueError("coupled construction requires sigma independent of the ray")
    evaluate, ells = _field_evaluator(field, ids)
    check_ell = bool(np.any(np.isfinite(ells)))
    n = cfg.n_steps
    dt, sq = cfg.dt, math.sqrt(cfg.dt)
    keep_rows = snapshot_steps is None
    snap_set = set() if keep_rows else set(int(s) for s in snapshot_steps)

    same_start = (x1.is_origin and x2.is_origin) or (
        not x1.is_origin and not x2.is_origin
        and x1.ray == x2.ray and x1.radius == x2.radius
    )

    for start, stop in _block_sizes(cfg.path_count, 2 * n):
        width = stop - start
        lo, hi = start + index_offset, stop + index_offset
        gens_u = [stream(cfg.seed, i, TAG_RAYS) for i in range(lo, hi)]
        gens_zs = [stream(cfg.seed, i, TAG_RADIAL) for i in range(lo, hi)]
        gens_zf = [stream(cfg.seed, i, TAG_FRESH) for i in range(lo, hi)]

        def init_leg(x):
            if x.is_origin:
                r = np.zeros(width)
                ray = np.array([_draw_index(g, cumw) for g in gens_u], dtype=np.int64)
            else:
                r = np.full(width, x.radius)
                ray = np.full(width, mu.index_of(x.ray), dtype=np.int64)
                if x.radius >= ells[ray[0]]:
                    raise ValueError(f"start radius {x.radius} outside domain of ray {x.ray}")
            return r, ray

        r1, ray1 = init_leg(x1)
        if same_start:
            r2, ray2 = r1.copy(), ray1.copy()
        else:
            r2, ray2 = init_leg(x2)

        if same_start:
            phase = np.full(width, _PHASE_MERGED, dtype=np.int8)
        elif x1.is_origin:
            phase = np.full(width, _PHASE_X2_BOUND, dtype=np.int8)
        elif x2.is_origin:
            phase = np.full(width, _PHASE_X1_BOUND, dtype=np.int8)
        else:
            phase = np.full(width, _PHASE_BOTH, dtype=np.int8)
        tau = np.where(phase == _PHASE_MERGED, 0.0, np.nan)

        c1 = np.ones(width, dtype=np.int64)
        c2 = np.ones(width, dtype=np.int64)
        exp1 = np.full(width, np.nan)
        exp1_ray = np.full(width, -1, dtype=np.int64)
        exp2 = np.full(width, np.nan)
        exp2_ray = np.full(width, -1, dtype=np.int64)

        if keep_rows:
            rows = {
                "r1": np.empty((width, n + 1)), "r2": np.empty((width, n + 1)),
                "ray1": np.empty((width, n + 1), dtype=np.int64),
                "ray2": np.empty((width, n + 1), dtype=np.int64),
                "lab1": np.empty((width, n + 1), dtype=np.int64),
                "lab2": np.empty((width, n + 1), dtype=np.int64),
                "inc1": np.empty((width, n)), "inc2": np.empty((width, n)),
            }
            rows["r1"][:, 0], rows["r2"][:, 0] = r1, r2
            rows["ray1"][:, 0] = np.where(r1 == 0.0, -1, ids[ray1])
            rows["ray2"][:, 0] = np.where(r2 == 0.0, -1, ids[ray2])
            rows["lab1"][:, 0] = np.where(r1 == 0.0, 0, c1)
            rows["lab2"][:, 0] = np.where(r2 == 0.0, 0, c2)
        snaps = {}
        if not keep_rows and 0 in snap_set:
            snaps[0] = (np.where(r1 == 0.0, -1, ids[ray1]), r1.copy(),
                        np.where(r2 == 0.0, -1, ids[ray2]), r2.copy())

        done = 0
        while done < n:
            m = min(_STEP_CHUNK, n - done)
            zs = _fill_normals(gens_zs, m)
            zf = _fill_normals(gens_zf, m)
            for j in range(m):
                k = done + j
                z_shared, z_fresh = zs[:, j], zf[:, j]
                z1 = np.where(phase == _PHASE_X2_BOUND, z_fresh, z_shared)
                z2 = np.where(phase == _PHASE_X1_BOUND, z_fresh, z_shared)

                gv1, sv1 = evaluate(r1, ray1)
                s1 = r1 + gv1 * dt + sv1 * (sq * z1)
                gv2, sv2 = evaluate(r2, ray2)
                s2 = r2 + gv2 * dt + sv2 * (sq * z2)
                if not (np.all(np.isfinite(s1)) and np.all(np.isfinite(s2))):
                    raise NumericsError(k, f"non-finite radius at step {k}")
                cr1, cr2 = s1 <= 0.0, s2 <= 0.0
                r1 = np.abs(s1)
                r1[r1 < ZERO_RADIUS_TOL] = 0.0
                r2 = np.abs(s2)
                r2[r2 < ZERO_RADIUS_TOL] = 0.0
                if check_ell:
                    for rr, rayv, et, er in ((r1, ray1, exp1, exp1_ray), (r2, ray2, exp2, exp2_ray)):
                        blown = np.isnan(et) & (rr >= ells[rayv])
                        if blown.any():
                            et[blown] = (k + 1) * dt
                            er[blown] = ids[rayv[blown]]

                ev1 = cr1 | (r1 == 0.0)
                ev2 = cr2 | (r2 == 0.0)
                merged_already = phase == _PHASE_MERGED
                merge_now = ~merged_already & ev1 & ev2
                # bound-leg arrivals that do not find the other leg at the
                # origin swap the roles instead of merging
                swap_to_x2 = (phase == _PHASE_BOTH) & ev1 & ~ev2
                swap_to_x1 = (phase == _PHASE_BOTH) & ev2 & ~ev1
                swap_to_x2 |= (phase == _PHASE_X1_BOUND) & ev1 & ~ev2
                swap_to_x1 |= (phase == _PHASE_X2_BOUND) & ev2 & ~ev1

                draw1 = ev1
                draw2 = ev2 & ~merge_now & ~merged_already
                any_draw = draw1 | draw2
                if any_draw.any():
                    for i in np.flatnonzero(any_draw):
                        if draw1[i]:
                            ray1[i] = _draw_index(gens_u[i], cumw)
                        if draw2[i]:
                            ray2[i] = _draw_index(gens_u[i], cumw)
                c1[ev1] += 1
                c2[ev2 & ~merge_now & ~merged_already] += 1

                phase = np.select(
                    [merge_now, swap_to_x2, swap_to_x1],
                    [_PHASE_MERGED, _PHASE_X2_BOUND, _PHASE_X1_BOUND],
                    default=phase,
                ).astype(np.int8)
                tau[merge_now] = (k + 1) * dt

                copy = phase == _PHASE_MERGED
                if copy.any():
                    r2[copy] = r1[copy]
                    ray2[copy] = ray1[copy]
                    c2[copy] = c1[copy]

                if keep_rows:
                    rows["r1"][:, k + 1], rows["r2"][:, k + 1] = r1, r2
                    rows["ray1"][:, k + 1] = np.where(r1 == 0.0, -1, ids[ray1])
                    rows["ray2"][:, k + 1] = np.where(r2 == 0.0, -1, ids[ray2])
                    rows["lab1"][:, k + 1] = np.where(r1 == 0.0, 0, c1)
                    rows["lab2"][:, k + 1] = np.where(r2 == 0.0, 0, c2)
                    rows["inc1"][:, k] = sq * z1
                    rows["inc2"][:, k] = sq * z2
                elif (k + 1) in snap_set:
                    snaps[k + 1] = (np.where(r1 == 0.0, -1, ids[ray1]), r1.copy(),
                                    np.where(r2 == 0.0, -1, ids[ray2]), r2.copy())
            done += m

        block = {
            "start": start, "stop": stop, "tau": tau,
            "exp1": exp1, "exp1_ray": exp1_ray, "exp2": exp2, "exp2_ray": exp2_ray,
        }
        if keep_rows:
            block.update(rows)
        else:
            block["snaps"] = snaps
        yield block


def simulate_coupled_diffusions(
    field: CoefficientField,
    mu: SpinningMeasure,
    x1: TreePoint,
    x2: TreePoint,
    cfg: SimConfig,
    pair_index: int = 0,
) -> CoupledPaths:
    """One coupled pair under the alternating shared-noise construction."""
    one = SimConfig(cfg.horizon, cfg.dt, cfg.seed, 1, cfg.local_time_epsilon)
    block = next(iter(_coupled_blocks(field, mu, x1, x2, one, index_offset=pair_index)))
    times = one.times()

    def leg(pre):
        exp = None
        tkey = "exp1" if pre == "1" else "exp2"
        rkey = tkey + "_ray"
        if not np.isnan(block[tkey][0]):
            exp = (float(block[tkey][0]), int(block[rkey][0]))
        return WalshPath(
            times=times,
            rays=block["ray" + pre][0].copy(),
            radii=block["r" + pre][0].copy(),
            excursion_labels=block["lab" + pre][0].copy(),
            driving_increments=block["inc" + pre][0].copy(),
            explosion_flag=exp,
        )

    tau = block["tau"][0]
    return CoupledPaths(first=leg("1"), second=leg("2"),
                        tau=float(tau) if not np.isnan(tau) else math.inf)


def coupled_diffusion_snapshots(
    field: CoefficientField,
    mu: SpinningMeasure,
    x1: TreePoint,
    x2: TreePoint,
    cfg: SimConfig,
    at_times: Sequence[float],
    index_offset: int = 0,
) -> tuple:
    """Pair marginals and coupling times over the ensemble.

    Returns (snaps1, snaps2, taus) where snaps_i maps t to (ray ids, radii)
    and taus holds one coupling time per pair (inf when not reached).
    """
    steps = _snapshot_steps(cfg, at_times)
    parts = {k: ([], [], [], []) for k in steps}
    taus = []
    for block in _coupled_blocks(field, mu, x1, x2, cfg, snapshot_steps=steps,
                                 index_offset=index_offset):
        taus.append(block["tau"])
        for k, tup in block["snaps"].items():
            for slot, arr in zip(parts[k], tup):
                slot.append(arr)
    tau_all = np.concatenate(taus)
    tau_all = np.where(np.isnan(tau_all), math.inf, tau_all)
    snaps1, snaps2 = {}, {}
    for t, k in zip(at_times, steps):
        snaps1[float(t)] = (np.concatenate(parts[k][0]), np.concatenate(parts[k][1]))
        snaps2[float(t)] = (np.concatenate(parts[k][2]), np.concatenate(parts[k][3]))
    return snaps1, snaps2, tau_all


# -------------------------------------------------------- path transforms


@dataclass(frozen=True, eq=False)
class TransformedPath:
    """Scale-mapped path plus, for driftless fields, the time-change table."""

    path: WalshPath
    time_change: Optional[np.ndarray]


def time_change_and_scale(
    path: WalshPath,
    field: CoefficientField,
    include_time_change: Optional[bool] = None,
) -> TransformedPath:
    """Map radii through the per-ray scale and tabulate T(t) = int sigma^2 dt.

    The scale map applies to any field.  The time-change table is only
    defined for driftless fields: requesting it for a drifted field is
    rejected, and the default (None) includes it exactly when the field
    is driftless.  sigma at zero-radius nodes is taken on the nearest
    preceding excursion's ray (the following one at the path start).
    """
    if include_time_change and not field.is_driftless():
        raise ValueError("time change requires a driftless field")
    if path.explosion_flag is not None:
        raise ValueError("path left the coefficient domain; scale map undefined")
    rays = path.rays
    seen = [int(v) for v in np.unique(rays) if v != -1]
    for ray_id in seen:
        field.coefficients(ray_id)  # raises KeyError for rays outside the field
    r_max = float(np.max(path.radii))
    nodes = np.linspace(0.0, max(1.0, 1.05 * r_max), 2001)
    # per-ray tabulation stops below a finite domain radius, so fold each
    # visited ray's maximum into the grid to keep every sample in range
    extremes = [float(path.radii[rays == i].max()) for i in seen]
    grid = np.unique(np.concatenate([nodes, np.asarray(extremes)]))
    transform = scale_transform(field, grid)

    new_radii = path.radii.copy()
    for ray_id in seen:
        m = rays == ray_id
        new_radii[m] = transform.s(ray_id, path.radii[m])
    scaled = WalshPath(
        times=path.times,
        rays=rays.copy(),
        radii=new_radii,
        excursion_labels=path.excursion_labels.copy(),
        driving_increments=path.driving_increments.copy(),
        explosion_flag=None,
    )

    if include_time_change is None:
        include_time_change = field.is_driftless()
    if not include_time_change:
        return TransformedPath(path=scaled, time_change=None)

    filled = _fill_zero_rays(rays)
    sig2 = np.empty(len(rays))
    for ray_id in set(int(v) for v in np.unique(filled)):
        m = filled == ray_id
        sig2[m] = np.asarray(field.coefficients(ray_id).sigma(path.radii[m])) ** 2
    dt = path.dt
    increments = 0.5 * (sig2[1:] + sig2[:-1]) * dt
    table = np.concatenate([[0.0], np.cumsum(increments)])
    return TransformedPath(path=scaled, time_change=table)


def _fill_zero_rays(rays: np.ndarray) -> np.ndarray:
    """Replace -1 markers with the previous ray (next ray at the start)."""
    filled = rays.copy()
    bad = filled == -1
    if bad.all():
        raise ValueError("path never leaves the origin; rays undefined")
    idx = np.arange(len(filled))
    prev = np.maximum.accumulate(np.where(bad, -1, idx))
    has_prev = prev >= 0
    filled[bad & has_prev] = filled[prev[bad & has_prev]]
    still = filled == -1
    if still.any():
        nxt = np.minimum.accumulate(np.where(bad, len(filled), idx)[::-1])[::-1]
        filled[still] = filled[nxt[still]]
    return filled


# ---------------------------------------------------------- local time


def estimate_local_time(
    path: WalshPath,
    ray_set,
    epsilon: float,
    field: Optional[CoefficientField] = None,
) -> LocalTimeEstimate:
    """Shell estimate (1/2 eps) sum 1{0 < r < eps} sigma^2 dt along the path.

    The split accumulates only nodes whose excursion ray lies in ray_set.
    With no field given, sigma is taken to be 1 (Walsh BM).  Zero-radius
    nodes belong to no excursion and contribute to neither series.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    ray_set = tuple(sorted(set(int(i) for i in ray_set)))
    radii = path.radii
    rays = path.rays
    in_shell = (radii > 0.0) & (radii < epsilon)
    if field is None:
        sig2 = np.ones(len(radii))
    else:
        sig2 = np.empty(len(radii))
        sig2[~in_shell] = 0.0
        for ray_id in set(int(v) for v in np.unique(rays[in_shell])):
            m = in_shell & (rays == ray_id)
            sig2[m] = np.asarray(field.coefficients(ray_id).sigma(radii[m])) ** 2
    dt = path.dt
    contrib = np.where(in_shell, sig2, 0.0) * (dt / (2.0 * epsilon))
    in_split = in_shell & np.isin(rays, ray_set)
    split_contrib = np.where(in_split, sig2, 0.0) * (dt / (2.0 * epsilon))
    values = np.concatenate([[0.0], np.cumsum(contrib[1:])])
    split = np.concatenate([[0.0], np.cumsum(split_contrib[1:])])
    return LocalTimeEstimate(times=path.times, values=values, split=split,
                             epsilon=float(epsilon), ray_set=ray_set)


# ------------------------------------------------- excursion statistics


def excursion_decomposition(
    path,
    delta: float,
    ell: Optional[float] = None,
    epsilon: float = 0.02,
) -> ExcursionStats:
    """Excursion intervals, heights, and delta-high counts of a radial path.

    Accepts a RadialPath or a WalshPath.  Excursion boundaries sit at
    crossings and zero-radius nodes.  With a local-time level `ell` given,
    counts the delta-high excursions whose first grid passage above delta
    happens before the shell local time reaches `ell`; the trailing
    meander counts if its running maximum exceeds delta.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    radii = path.radii
    if isinstance(path, WalshPath):
        labels = path.excursion_labels
        boundary = np.zeros(len(radii), dtype=bool)
        boundary[1:] = labels[1:] != labels[:-1]
        run_id = np.cumsum(boundary)
    else:
        lab, _ = _labels_from_events(radii, path.crossings)
        boundary = np.zeros(len(radii), dtype=bool)
        boundary[1:] = lab[1:] != lab[:-1]
        run_id = np.cumsum(boundary)

    positive = radii > 0.0
    intervals = []
    heights = []
    passage_steps = []
    pos_idx = np.flatnonzero(positive)
    if len(pos_idx):
        new_seg = np.empty(len(pos_idx), dtype=bool)
        new_seg[0] = True
        new_seg[1:] = (run_id[pos_idx[1:]] != run_id[pos_idx[:-1]]) | (np.diff(pos_idx) > 1)
        starts = np.flatnonzero(new_seg)
        ends = np.append(starts[1:] - 1, len(pos_idx) - 1)
        pos_radii = radii[pos_idx]
        for s, e in zip(starts, ends):
            lo, hi = int(pos_idx[s]), int(pos_idx[e])
            intervals.append((lo, hi))
            seg = pos_radii[s:e + 1]
            heights.append(float(seg.max()))
            above = np.flatnonzero(seg >= delta)
            passage_steps.append(lo + int(above[0]) if len(above) else -1)
    heights = np.asarray(heights)
    count_above = int(np.sum(heights >= delta))

    count_before = None
    reached = False
    estimate = None
    if ell is not None:
        if isinstance(path, WalshPath):
            estimate = estimate_local_time(path, (), epsilon)
        else:
            dt = float(path.times[1] - path.times[0])
            in_shell = (radii > 0.0) & (radii < epsilon)
            vals = np.concatenate(
                [[0.0], np.cumsum(np.where(in_shell, dt / (2.0 * epsilon), 0.0)[1:])]
            )
            estimate = LocalTimeEstimate(times=path.times, values=vals,
                                         split=np.zeros_like(vals), epsilon=float(epsilon),
                                         ray_set=())
        hit = np.flatnonzero(estimate.values >= ell)
        reached = len(hit) > 0
        stop = int(hit[0]) if reached else len(radii)
        count_before = int(sum(1 for p in passage_steps if 0 <= p < stop))
    return ExcursionStats(
        intervals=tuple(intervals),
        heights=heights,
        count_above_delta=count_above,
        delta=float(delta),
        count_before_level=count_before,
        reached_level=reached,
        local_time=estimate,
    )


def excursion_poisson_counts(
    delta: float, ell: float, replications: int, cfg: SimConfig,
    index_offset: int = 0,
) -> np.ndarray:
    """Counts of delta-high excursions before the inverse local time of `ell`.

    Replicated driver for the unit reflected walk (g=0, sigma=1).  Each
    excursion is truncated at its first passage above delta: the walk
    teleports to the origin, the count increments, and the skipped return
    leg's shell occupation is replaced by its exact mean, epsilon/2 in
    local-time units.  Within-step passages are recovered by the Brownian
    bridge maximum law, which removes the grid-maximum bias.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    if not ell > 0:
        raise ValueError("local-time level must be positive")
    eps = cfg.local_time_epsilon
    if eps >= delta:
        raise ValueError("shell width must be below delta")
    dt, sq = cfg.dt, math.sqrt(cfg.dt)
    n_rep = int(replications)
    counts = np.zeros(n_rep, dtype=np.int64)
    # live holds the original indices of unfinished replications; finished
    # state is frozen, so compacting between chunks never changes results
    live = np.arange(n_rep)
    r = np.zeros(n_rep)
    lam = np.zeros(n_rep)
    gens_z = [stream(cfg.seed, index_offset + i, TAG_RADIAL) for i in range(n_rep)]
    gens_u = [stream(cfg.seed, index_offset + i, TAG_BRIDGE) for i in range(n_rep)]
    shell_rate = dt / (2.0 * eps)
    compensation = 0.5 * eps
    max_steps = int(200.0 * (ell * delta + 1.0) / dt)

    steps_done = 0
    while len(live):
        if steps_done >= max_steps:
            raise NumericsError(steps_done,
                                "replications failed to reach the local-time level")
        chunk = int(max(1, min(_STEP_CHUNK, _BLOCK_BUDGET // max(1, len(live)))))
        z = _fill_normals(gens_z, chunk)
        u = np.empty((len(live), chunk))
        for i, g in enumerate(gens_u):
            u[i] = g.random(chunk)
        active = np.ones(len(live), dtype=bool)
        for j in range(chunk):
            s = r + sq * z[:, j]
            gap_hi = np.maximum(delta - r, 0.0) * np.maximum(delta - s, 0.0)
            gap_lo = (delta + r) * np.maximum(delta + s, 0.0)
            bridge = np.exp(-2.0 * gap_hi / dt) + np.exp(-2.0 * gap_lo / dt)
            passage = active & ((np.abs(s) >= delta) | (u[:, j] < bridge))
            counts[live[passage]] += 1
            r_new = np.where(passage, 0.0, np.abs(s))
            r_new[r_new < ZERO_RADIUS_TOL] = 0.0
            gain = np.where((r_new > 0.0) & (r_new < eps), shell_rate, 0.0)
            gain = gain + np.where(passage, compensation, 0.0)
            lam = lam + np.where(active, gain, 0.0)
            r = np.where(active, r_new, r)
            active = active & (lam < ell)
            if not active.any():
                break
        steps_done += chunk
        keep = np.flatnonzero(active)
        live = live[keep]
        r = r[keep]
        lam = lam[keep]
        gens_z = [gens_z[i] for i in keep]
        gens_u = [gens_u[i] for i in keep]
    return counts
