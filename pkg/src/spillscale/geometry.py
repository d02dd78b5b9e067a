"""Premetric populations, s-neighborhoods, and geometric regularity audits.

A population is a finite set of units with a pairwise "distance" table that
only needs to satisfy rho(i,i)=0 and rho(i,j)>0 for i != j (no symmetry or
triangle inequality required).  Neighborhoods N(i,s) collect every unit whose
distance from i is at most a threshold radius_rule(s); in Euclidean space the
threshold is s**(1/q) so that |N(i,s)| grows linearly in s under bounded
density.  Everything downstream (clustering, exposures, weights) consumes
only N(i,s).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EUCLIDEAN = "euclidean"
IDENTITY = "identity"


class GeometryError(ValueError):
    """Invalid population input (non-finite, duplicated, or malformed)."""


@dataclass(frozen=True)
class InterferenceBudget:
    """Decay-rate budget: off-neighborhood influence is at most k1 * s**-eta.

    ybar bounds outcomes in absolute value; k_effects (<= ybar) is the
    constant used in the quadratic term of the optimal-weighting objective
    and defaults to ybar.
    """

    eta: float
    k1: float
    ybar: float
    k_effects: float | None = None

    def __post_init__(self):
        if not (self.eta > 0 and self.k1 > 0 and self.ybar > 0):
            raise ValueError("eta, k1, ybar must be strictly positive")
        if self.k_effects is None:
            object.__setattr__(self, "k_effects", self.ybar)
        if not (0 < self.k_effects <= self.ybar):
            raise ValueError("k_effects must lie in (0, ybar]")


@dataclass(frozen=True, eq=False)
class PremetricSpace:
    """Population of n units with a pairwise distance table.

    coords/q are present only for Euclidean populations, in which case
    dist is the L2 distance matrix and radius_rule(s) = s**(1/q).  Abstract
    populations supply dist directly and use the identity radius rule.
    Instances are immutable; all operations on them are pure.
    """

    n: int
    dist: np.ndarray
    rule: str = EUCLIDEAN
    coords: np.ndarray | None = None
    q: int | None = None

    def radius(self, s) -> float:
        """Distance threshold of the size-s neighborhood."""
        if np.any(np.asarray(s) <= 0):
            raise ValueError("neighborhood size s must be > 0")
        if self.rule == EUCLIDEAN:
            return np.power(s, 1.0 / self.q)
        return s

    def size_of_radius(self, r):
        """Inverse of radius(): the size parameter whose threshold is r."""
        if self.rule == EUCLIDEAN:
            return np.power(r, float(self.q))
        return r

    def neighborhood(self, i: int, s) -> np.ndarray:
        """Unit ids j with dist[i, j] <= radius(s); always contains i."""
        if not 0 <= i < self.n:
            raise ValueError(f"unit id {i} out of range [0, {self.n})")
        return np.flatnonzero(self.dist[i] <= self.radius(s))

    def neighborhood_matrix(self, s) -> np.ndarray:
        """Boolean n x n matrix M with M[i, j] = (j in N(i, s))."""
        return self.dist <= self.radius(s)

    def min_positive_distance(self) -> float:
        off = self.dist[~np.eye(self.n, dtype=bool)]
        return float(off.min()) if off.size else np.inf

    def saturation_floor(self) -> float:
        """Largest size s0 with N(i, s0) = {i} for every unit.

        Backed off a relative epsilon below the minimum pairwise distance so
        the <= comparison in neighborhood() cannot capture the closest pair.
        For n = 1 any size works; returns 1.0.
        """
        dmin = self.min_positive_distance()
        if not np.isfinite(dmin):
            return 1.0
        return float(self.size_of_radius(dmin * (1.0 - 1e-9)))


def build_space(coords) -> PremetricSpace:
    """Build a Euclidean population from an n x q coordinate array.

    Rejects non-finite coordinates and duplicated points (a zero
    off-diagonal distance breaks the premetric requirement).
    """
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    if coords.ndim != 2 or coords.shape[0] < 1 or coords.shape[1] < 1:
        raise GeometryError("coords must be a nonempty n x q array")
    if not np.all(np.isfinite(coords)):
        raise GeometryError("coordinates must be finite")
    n, q = coords.shape
    diff = coords[:, None, :] - coords[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    np.fill_diagonal(dist, 0.0)
    if n > 1:
        off = dist[~np.eye(n, dtype=bool)]
        if np.any(off == 0.0):
            raise GeometryError("duplicate coordinates: rho(i,j)=0 for i != j")
    return PremetricSpace(n=n, dist=dist, rule=EUCLIDEAN, coords=coords, q=q)


def build_space_from_dist(dist) -> PremetricSpace:
    """Build an abstract population from a distance table (identity rule)."""
    dist = np.asarray(dist, dtype=float)
    if dist.ndim != 2 or dist.shape[0] != dist.shape[1] or dist.shape[0] < 1:
        raise GeometryError("dist must be a square n x n table")
    if not np.all(np.isfinite(dist)):
        raise GeometryError("distances must be finite")
    if np.any(np.diag(dist) != 0.0):
        raise GeometryError("dist[i][i] must be 0")
    n = dist.shape[0]
    if n > 1 and np.any(dist[~np.eye(n, dtype=bool)] <= 0.0):
        raise GeometryError("off-diagonal distances must be strictly positive")
    return PremetricSpace(n=n, dist=dist, rule=IDENTITY)


def neighborhood(space: PremetricSpace, i: int, s) -> np.ndarray:
    return space.neighborhood(i, s)


def uniform_disk(n: int, rng: np.random.Generator, radius: float | None = None) -> np.ndarray:
    """n points uniform on a disk of the given radius (default sqrt(n), q=2)."""
    if radius is None:
        radius = np.sqrt(n)
    r = radius * np.sqrt(rng.uniform(size=n))
    ang = rng.uniform(0.0, 2.0 * np.pi, size=n)
    return np.column_stack([r * np.cos(ang), r * np.sin(ang)])


# --- assumption audits -------------------------------------------------------

@dataclass
class GeometryAudit:
    """Empirical regularity constants over a tested s-grid.

    Greedy constructions make k5_hat an upper bound on the true covering
    constant and k4_hat a lower bound on the true packing constant; both are
    reported as approximations, not certificates.
    """

    k3_hat: float
    k4_hat: float
    k5_hat: float
    s_grid: list = field(default_factory=list)
    tested_units: list = field(default_factory=list)
    passes: dict = field(default_factory=dict)

    def evaluate(self, thresholds: dict) -> dict:
        """pass/fail per assumption given user thresholds (k3, k4, k5)."""
        self.passes = {
            name: bool(getattr(self, f"{name}_hat") <= thresholds[name])
            for name in ("k3", "k4", "k5")
            if name in thresholds
        }
        return self.passes


def greedy_set_cover(members: np.ndarray, nbhd_matrix: np.ndarray) -> list:
    """Greedy s-cover of the `members` mask by neighborhoods of its own units.

    Returns the picked unit ids in coverage order (ties to the lowest id).
    Greedy never beats the minimal cover, so len() is an upper bound on the
    covering number.
    """
    members = np.asarray(members, dtype=bool)
    cand = np.flatnonzero(members)
    sets = nbhd_matrix[cand][:, cand]
    uncovered = np.ones(len(cand), dtype=bool)
    picked = []
    while uncovered.any():
        gains = sets[:, uncovered].sum(axis=1)
        best = int(np.argmax(gains))
        if gains[best] == 0:
            raise GeometryError("neighborhoods cannot cover the member set")
        picked.append(int(cand[best]))
        uncovered &= ~sets[best]
    return picked


def greedy_packing(candidates: np.ndarray, in_nbhd: np.ndarray) -> list:
    """Greedy maximal s-packing of the candidate units (ids ascending).

    in_nbhd[i, j] = (j in N(i, s)). Two units conflict when some candidate's
    neighborhood contains both; greedy insertion yields a maximal packing, a
    lower bound on the packing number.
    """
    cand = np.flatnonzero(candidates)
    conflict = in_nbhd[cand][:, cand]
    # pair conflict: exists i among candidates with both a, b in N(i, s)
    pair_conflict = conflict.T @ conflict > 0
    blocked = np.zeros(len(cand), dtype=bool)
    packed = []
    for k in range(len(cand)):
        if not blocked[k]:
            packed.append(int(cand[k]))
            blocked |= pair_conflict[k]
    return packed


def audit_geometry(space: PremetricSpace, s_grid, max_units: int = 60,
                   n_subsets: int = 5, seed: int = 0) -> GeometryAudit:
    """Measure the density/covering/packing constants on a grid of sizes.

    k3_hat: max over tested (i, s) of (|N(i,s)| - 1) / s.
    k5_hat: max greedy-cover size of U(N(i,s), s) and V(N(i,s), s) by
            s-neighborhoods of their own members.
    k4_hat: max over random subsets Q and s of |greedy packing| * s / n.

    Cover/packing audits scan a deterministic unit subsample of size
    max_units when the population is larger (cost is cubic in |N|).
    """
    s_grid = [float(s) for s in np.atleast_1d(s_grid)]
    if not s_grid or min(s_grid) <= 0:
        raise ValueError("s_grid must be nonempty with positive sizes")
    n = space.n
    if n > max_units:
        tested = list(np.linspace(0, n - 1, max_units).astype(int))
    else:
        tested = list(range(n))

    k3 = 0.0
    k5 = 0.0
    k4 = 0.0
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy=seed, spawn_key=(9,))))
    for s in s_grid:
        M = space.neighborhood_matrix(s)
        sizes = M.sum(axis=1)
        k3 = max(k3, float((sizes.max() - 1) / s))
        for i in tested:
            nbhd = M[i]
            # U: union of neighborhoods of members; V: units whose
            # neighborhoods reach into N(i,s)
            u_set = M[nbhd].any(axis=0)
            v_set = M[:, nbhd].any(axis=1)
            for target in (u_set, v_set):
                k5 = max(k5, float(len(greedy_set_cover(target, M))))
        for _ in range(n_subsets):
            q_mask = rng.uniform(size=n) < 0.5
            if not q_mask.any():
                continue
            pack = greedy_packing(q_mask, M)
            k4 = max(k4, len(pack) * s / n)
    return GeometryAudit(k3_hat=k3, k4_hat=k4, k5_hat=k5,
                         s_grid=s_grid, tested_units=tested)


def default_audit_grid(n: int, points: int = 16) -> np.ndarray:
    """Logarithmic s-grid from 1 to n used when the caller supplies none."""
    return np.geomspace(1.0, max(float(n), 2.0), points)


def off_neighborhood_sums(A: np.ndarray, space: PremetricSpace, s) -> np.ndarray:
    """Per-unit sum of |A[i, j]| over j outside N(i, s)."""
    M = space.neighborhood_matrix(s)
    return np.abs(np.where(M, 0.0, A)).sum(axis=1)


def audit_interference(A, space: PremetricSpace, budget: InterferenceBudget,
                       s_grid=None) -> tuple[bool, float]:
    """Check sum_{j not in N(i,s)} |A[i,j]| <= k1 * s**-eta on a log grid.

    Returns (pass, worst_ratio) where worst_ratio is the largest observed
    off-neighborhood sum divided by its budget bound; pass iff ratio <= 1.
    """
    A = np.asarray(A, dtype=float)
    if not np.all(np.isfinite(A)):
        raise ValueError("A must be finite")
    if s_grid is None:
        s_grid = default_audit_grid(space.n)
    worst = 0.0
    for s in np.atleast_1d(s_grid):
        off = off_neighborhood_sums(A, space, s)
        bound = budget.k1 * float(s) ** (-budget.eta)
        worst = max(worst, float(off.max()) / bound)
    return worst <= 1.0, worst


def fit_interference_constant(A, space: PremetricSpace, eta: float,
                              s_grid=None) -> float:
    """Smallest k1 making the decay bound hold on the tested grid."""
    A = np.asarray(A, dtype=float)
    if s_grid is None:
        s_grid = default_audit_grid(space.n)
    k1 = 0.0
    for s in np.atleast_1d(s_grid):
        off = off_neighborhood_sums(A, space, s)
        k1 = max(k1, float(off.max()) * float(s) ** eta)
    return k1
