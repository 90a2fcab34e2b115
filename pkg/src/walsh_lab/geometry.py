"""State space of a spider: ray directions, points, spinning measures, transport.

A spider is a finite union of rays glued at the origin.  Points are
(ray, radius) pairs, distances are measured along the rays through the
origin, and probability measures on the ray directions ("spinning
measures") are compared with exact optimal transport on their unit-sphere
embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

_UNIT_NORM_TOL = 1e-12
_WEIGHT_SUM_TOL = 1e-12
_MARGINAL_TOL = 1e-10


@dataclass(frozen=True)
class Direction:
    """A ray direction: integer id plus a unit-vector embedding in R^d."""

    id: int
    embedding: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.embedding) < 1:
            raise ValueError("embedding must live in R^d with d >= 1")
        norm = math.sqrt(sum(c * c for c in self.embedding))
        if abs(norm - 1.0) > _UNIT_NORM_TOL:
            raise ValueError(f"embedding must be a unit vector, got norm {norm!r}")

    @classmethod
    def from_angle(cls, id: int, angle: float) -> "Direction":
        return cls(id=id, embedding=(math.cos(angle), math.sin(angle)))


@dataclass(frozen=True)
class TreePoint:
    """A state on the spider: ray id and nonnegative radius.

    The origin is canonical: radius 0 forces ray = None, and every point
    with positive radius must name its ray.
    """

    ray: int | None
    radius: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.radius) or self.radius < 0:
            raise ValueError(f"radius must be finite and >= 0, got {self.radius!r}")
        if self.radius == 0.0:
            object.__setattr__(self, "ray", None)
        elif self.ray is None:
            raise ValueError("positive radius requires a ray id")

    @property
    def is_origin(self) -> bool:
        return self.radius == 0.0

    @classmethod
    def origin(cls) -> "TreePoint":
        return cls(ray=None, radius=0.0)


ORIGIN = TreePoint.origin()


@dataclass(frozen=True)
class SpinningMeasure:
    """Finitely many unit-sphere atoms with positive weights summing to 1."""

    directions: tuple[Direction, ...]
    weights: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.directions) == 0:
            raise ValueError("spinning measure needs at least one atom")
        if len(self.directions) != len(self.weights):
            raise ValueError("directions and weights must align")
        ids = [d.id for d in self.directions]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate direction ids: {ids}")
        dims = {len(d.embedding) for d in self.directions}
        if len(dims) != 1:
            raise ValueError("all embeddings must share one dimension")
        for w in self.weights:
            if not (w > 0):
                raise ValueError(f"weights must be strictly positive, got {w!r}")
        total = math.fsum(self.weights)
        if abs(total - 1.0) > _WEIGHT_SUM_TOL:
            raise ValueError(f"weights must sum to 1, got {total!r}")

    @classmethod
    def from_weights(
        cls,
        weights: "list[float] | tuple[float, ...]",
        ids: "list[int] | None" = None,
        angles: "list[float] | None" = None,
    ) -> "SpinningMeasure":
        """Build a measure with the default circle embedding.

        Atom i sits at angle 2*pi*i/p unless explicit angles are given.
        """
        p = len(weights)
        if ids is None:
            ids = list(range(p))
        if angles is None:
            angles = [2.0 * math.pi * i / p for i in range(p)]
        dirs = tuple(Direction.from_angle(i, a) for i, a in zip(ids, angles))
        return cls(directions=dirs, weights=tuple(float(w) for w in weights))

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(d.id for d in self.directions)

    @property
    def weight_array(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=float)

    @property
    def embedding_array(self) -> np.ndarray:
        return np.asarray([d.embedding for d in self.directions], dtype=float)

    def index_of(self, ray_id: int) -> int:
        for k, d in enumerate(self.directions):
            if d.id == ray_id:
                return k
        raise KeyError(f"no atom with id {ray_id}")

    def weight_of(self, ray_id: int) -> float:
        return self.weights[self.index_of(ray_id)]

    def subset_weight(self, ray_ids) -> float:
        wanted = set(ray_ids)
        unknown = wanted - set(self.ids)
        if unknown:
            raise KeyError(f"unknown ray ids {sorted(unknown)}")
        return math.fsum(w for d, w in zip(self.directions, self.weights) if d.id in wanted)


@dataclass(frozen=True, eq=False)
class CouplingPlan:
    """A joint distribution over atom pairs with prescribed marginals."""

    first: SpinningMeasure
    second: SpinningMeasure
    joint: np.ndarray

    def __post_init__(self) -> None:
        joint = np.array(self.joint, dtype=float)
        if joint.shape != (len(self.first.directions), len(self.second.directions)):
            raise ValueError(f"joint has shape {joint.shape}, expected "
                             f"({len(self.first.directions)}, {len(self.second.directions)})")
        if np.any(joint < -_MARGINAL_TOL):
            raise ValueError("joint masses must be nonnegative")
        joint = np.clip(joint, 0.0, None)
        row_err = np.abs(joint.sum(axis=1) - self.first.weight_array).max()
        col_err = np.abs(joint.sum(axis=0) - self.second.weight_array).max()
        if row_err > _MARGINAL_TOL or col_err > _MARGINAL_TOL:
            raise ValueError(f"marginal mismatch: row err {row_err:.3e}, col err {col_err:.3e}")
        joint.flags.writeable = False
        object.__setattr__(self, "joint", joint)

    @property
    def is_diagonal(self) -> bool:
        off = self.joint - np.diag(np.diag(self.joint)) if self.joint.shape[0] == self.joint.shape[1] else self.joint
        return self.joint.shape[0] == self.joint.shape[1] and np.all(off == 0.0)

    def flattened(self) -> tuple[np.ndarray, list[tuple[int, int]]]:
        """Probabilities and (first ray id, second ray id) pairs, row-major."""
        pairs = [(d1.id, d2.id)
                 for d1 in self.first.directions
                 for d2 in self.second.directions]
        return self.joint.ravel().copy(), pairs


def tree_distance(x1: TreePoint, x2: TreePoint) -> float:
    """Distance along the rays through the origin (the railway metric)."""
    if x1.is_origin:
        return x2.radius
    if x2.is_origin:
        return x1.radius
    if x1.ray == x2.ray:
        return abs(x1.radius - x2.radius)
    return x1.radius + x2.radius


def chord_cost_matrix(mu1: SpinningMeasure, mu2: SpinningMeasure, p: float) -> np.ndarray:
    """Pairwise Euclidean chord distances between atom embeddings, raised to p."""
    e1 = mu1.embedding_array
    e2 = mu2.embedding_array
    if e1.shape[1] != e2.shape[1]:
        raise ValueError("measures live in different embedding dimensions")
    diff = e1[:, None, :] - e2[None, :, :]
    return np.linalg.norm(diff, axis=2) ** p


def _solve_transport(cost: np.ndarray, w1: np.ndarray, w2: np.ndarray) -> np.ndarray:
    """Exact optimal transport on the bipartite atom graph via LP."""
    m, n = cost.shape
    if m == 1:
        return w2[None, :].copy()
    if n == 1:
        return w1[:, None].copy()
    # Equality constraints: row sums then column sums (one is redundant; HiGHS copes).
    a_rows = np.zeros((m, m * n))
    for i in range(m):
        a_rows[i, i * n:(i + 1) * n] = 1.0
    a_cols = np.zeros((n, m * n))
    for j in range(n):
        a_cols[j, j::n] = 1.0
    res = linprog(
        c=cost.ravel(),
        A_eq=np.vstack([a_rows, a_cols]),
        b_eq=np.concatenate([w1, w2]),
        bounds=(0, None),
        method="highs",
    )
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    plan = res.x.reshape(m, n)
    return _repair_marginals(plan, w1, w2)


def _repair_marginals(plan: np.ndarray, w1: np.ndarray, w2: np.ndarray) -> np.ndarray:
    """Re-solve flows exactly on the support forest of a basic LP solution.

    Simplex returns a basic (acyclic-support) plan but only to solver
    tolerance; leaf stripping on the support recovers marginals to float
    precision without changing the support or the optimal value.
    """
    m, n = plan.shape
    support = plan > 1e-12 * max(plan.max(), 1.0)
    out = np.zeros_like(plan)
    row_rem = w1.astype(float).copy()
    col_rem = w2.astype(float).copy()
    active = support.copy()
    for _ in range(m * n):
        row_deg = active.sum(axis=1)
        col_deg = active.sum(axis=0)
        progressed = False
        for i in np.where(row_deg == 1)[0]:
            j = int(np.argmax(active[i]))
            out[i, j] = max(row_rem[i], 0.0)
            col_rem[j] -= row_rem[i]
            row_rem[i] = 0.0
            active[i, j] = False
            progressed = True
        col_deg = active.sum(axis=0)
        for j in np.where(col_deg == 1)[0]:
            i = int(np.argmax(active[:, j]))
            out[i, j] = max(col_rem[j], 0.0)
            row_rem[i] -= col_rem[j]
            col_rem[j] = 0.0
            active[i, j] = False
            progressed = True
        if not active.any():
            break
        if not progressed:
            # Degenerate support with a cycle: keep the solver's flows there.
            out[active] = plan[active]
            break
    return out


def wasserstein_p(mu1: SpinningMeasure, mu2: SpinningMeasure, p: float) -> float:
    """Order-p Wasserstein distance between spinning measures, solved exactly.

    Cost is the Euclidean chord distance between embeddings raised to p;
    the return value is the p-th root of the minimal expected cost.
    """
    if p < 1:
        raise ValueError(f"order p must be >= 1, got {p!r}")
    cost = chord_cost_matrix(mu1, mu2, p)
    plan = _solve_transport(cost, mu1.weight_array, mu2.weight_array)
    value = float((plan * cost).sum())
    return max(value, 0.0) ** (1.0 / p)


def _measures_equal(mu1: SpinningMeasure, mu2: SpinningMeasure) -> bool:
    if mu1.ids != mu2.ids:
        return False
    if not np.allclose(mu1.embedding_array, mu2.embedding_array, rtol=0.0, atol=1e-12):
        return False
    return bool(np.allclose(mu1.weight_array, mu2.weight_array, rtol=0.0, atol=1e-12))


def build_coupling_plan(
    mu1: SpinningMeasure,
    mu2: SpinningMeasure,
    kind: str,
    p: float = 1.0,
) -> CouplingPlan:
    """Build a coupling of two spinning measures.

    kind is one of "independent" (product measure), "identity" (diagonal,
    requires equal measures) or "optimal" (attains wasserstein_p for the
    given order p).
    """
    if kind == "independent":
        joint = np.outer(mu1.weight_array, mu2.weight_array)
    elif kind == "identity":
        if not _measures_equal(mu1, mu2):
            raise ValueError("identity coupling requires equal measures atom-for-atom")
        joint = np.diag(mu1.weight_array)
    elif kind == "optimal":
        if p < 1:
            raise ValueError(f"order p must be >= 1, got {p!r}")
        cost = chord_cost_matrix(mu1, mu2, p)
        joint = _solve_transport(cost, mu1.weight_array, mu2.weight_array)
    else:
        raise ValueError(f"unknown coupling kind {kind!r}")
    return CouplingPlan(first=mu1, second=mu2, joint=joint)
