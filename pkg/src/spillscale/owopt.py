"""Optimized outcome weighting over saturation sizes.

Weights are per-unit functions of the largest grid size at which the unit's
neighborhood is fully treated or fully untreated, odd in own treatment
status.  The mean-squared-error bound they minimize is a quadratic form in
the weight table whose coefficients are joint saturation-size probabilities,
all computable from the design alone (exactly by enumerating cluster
assignments, or by Monte Carlo).  The constrained minimization runs by
projected gradient descent over per-unit scaled simplices, warm-started at
the inverse-probability weights, which are a feasible point of the class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .design import TAG_TABLES, ClusterPartition, rng_for
from .estimators import EstimateReport, effective_grid
from .geometry import InterferenceBudget, PremetricSpace
from .oracle import all_assignments

_CHUNK = 1 << 14


@dataclass(frozen=True, eq=False)
class SaturationTables:
    """Marginal and pairwise saturation-size probabilities on a grid.

    joint rows exist only for unit pairs whose largest-grid neighborhoods
    share a cluster; all other pairs factor exactly into marginal products
    because their saturation sizes depend on disjoint cluster bits.
    """

    grid: np.ndarray                # ascending, grid[0] = floor s0
    marg: np.ndarray                # n x S, P(s_tilde_i = s)
    pairs: np.ndarray               # (P, 2) unit ids with i <= j
    joint: np.ndarray               # (P, S, S), P(s_tilde_i = s, s_tilde_j = t)
    p: float
    method: str                     # "exact" | "mc"
    mc_draws: int | None = None
    seed: int | None = None

    @property
    def n(self) -> int:
        return self.marg.shape[0]

    @property
    def n_sizes(self) -> int:
        return self.grid.size


def cluster_incidence_stack(space: PremetricSpace, partition: ClusterPartition,
                            grid: np.ndarray) -> np.ndarray:
    """S x n x C booleans: cluster c meets N(i, grid[k])."""
    P = partition.indicator()
    return np.stack([(space.neighborhood_matrix(s) @ P) > 0 for s in grid])


def stilde_indices(G: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Saturation-size grid index per (draw, unit) for assignments B (m x C).

    A neighborhood is pure when its clusters are all treated or all
    untreated; purity is monotone down the grid, so the index is the last
    level before the first impure one.
    """
    m = B.shape[0]
    n = G.shape[1]
    idx = np.zeros((m, n), dtype=np.int64)
    alive = np.ones((m, n), dtype=bool)
    Bf = B.astype(np.float64)
    for k in range(G.shape[0]):
        counts = Bf @ G[k].T.astype(np.float64)      # treated clusters met
        phi_k = G[k].sum(axis=1).astype(np.float64)
        pure = (counts == 0.0) | (counts == phi_k[None, :])
        alive &= pure
        idx[alive] = k
    return idx


def interacting_pairs(G_max: np.ndarray) -> np.ndarray:
    """Unit pairs (i <= j, self included) sharing a cluster at the top size."""
    share = (G_max @ G_max.T) > 0
    iu = np.triu_indices_from(share)
    keep = share[iu]
    return np.column_stack([iu[0][keep], iu[1][keep]])


def saturation_tables(space: PremetricSpace, partition: ClusterPartition,
                      grid, p: float, method: str = "mc",
                      mc_draws: int = 100_000, seed: int = 0) -> SaturationTables:
    """Tabulate P(s_tilde_i = s) and interacting-pair joints.

    method "exact" enumerates all 2**C cluster assignments (C <= 20) with
    their product-Bernoulli weights; "mc" averages mc_draws seeded draws.
    """
    if not 0.0 < p < 1.0:
        raise ValueError("p must be in (0, 1)")
    grid_eff = effective_grid(space, grid)
    G = cluster_incidence_stack(space, partition, grid_eff)
    S = grid_eff.size
    n = space.n
    pairs = interacting_pairs(G[-1])

    if method == "exact":
        B_all = all_assignments(partition.n_clusters)
        k = B_all.sum(axis=1).astype(float)
        C = partition.n_clusters
        weights_all = np.exp(k * np.log(p) + (C - k) * np.log1p(-p))
        draws_used, seed_used = None, None
    elif method == "mc":
        gen = rng_for(seed, TAG_TABLES)
        B_all = (gen.uniform(size=(mc_draws, partition.n_clusters)) < p).astype(np.int8)
        weights_all = np.full(mc_draws, 1.0 / mc_draws)
        draws_used, seed_used = int(mc_draws), int(seed)
    else:
        raise ValueError("method must be 'exact' or 'mc'")

    marg = np.zeros((n, S))
    joint = np.zeros((len(pairs), S, S))
    for lo in range(0, B_all.shape[0], _CHUNK):
        B = B_all[lo:lo + _CHUNK]
        w = weights_all[lo:lo + _CHUNK]
        idx = stilde_indices(G, B)
        for i in range(n):
            marg[i] += np.bincount(idx[:, i], weights=w, minlength=S)
        for r, (i, j) in enumerate(pairs):
            code = idx[:, i] * S + idx[:, j]
            joint[r] += np.bincount(code, weights=w, minlength=S * S).reshape(S, S)
    return SaturationTables(grid=grid_eff, marg=marg, pairs=pairs, joint=joint,
                            p=float(p), method=method, mc_draws=draws_used,
                            seed=seed_used)


def objective_kernel(grid: np.ndarray, budget: InterferenceBudget) -> np.ndarray:
    """S x S size kernel 2*K^2 + k1^2 (s*t)**-eta of the MSE bound."""
    if np.any(grid <= 0):
        raise ValueError("grid sizes must be positive so (s*t)**-eta is finite")
    decay = grid ** -budget.eta
    return 2.0 * budget.k_effects ** 2 + budget.k1 ** 2 * np.outer(decay, decay)


def assemble_objective(tables: SaturationTables, budget: InterferenceBudget) -> np.ndarray:
    """Dense quadratic form over (unit, size) index pairs.

    Entry [(i,s),(j,t)] is P(s_tilde_i = s, s_tilde_j = t) * kernel(s, t);
    non-interacting pairs use the exact factorization into marginals.
    """
    k = objective_kernel(tables.grid, budget)
    n, S = tables.marg.shape
    u = tables.marg.reshape(-1)
    Q = np.tile(k, (n, n)) * np.outer(u, u)
    for r, (i, j) in enumerate(tables.pairs):
        block = tables.joint[r] * k
        Q[i * S:(i + 1) * S, j * S:(j + 1) * S] = block
        Q[j * S:(j + 1) * S, i * S:(i + 1) * S] = block.T
    return 0.5 * (Q + Q.T)


@dataclass
class OwWeightTable:
    """Nonnegative weight table; realized weight is (2 d_i - 1) W[i, s_idx]."""

    W: np.ndarray                   # n x S
    grid: np.ndarray
    objective_value: float
    iterations: int
    kkt_residual: float
    converged: bool
    p: float

    def constraint_gap(self, marg: np.ndarray, n: int) -> float:
        lhs = np.sum(self.W * marg, axis=1)
        return float(np.max(np.abs(lhs - 1.0 / (self.p * n))))


def ipw_weight_table(tables: SaturationTables, h, p: float) -> OwWeightTable:
    """Inverse-probability weights expressed over the saturation grid.

    W[i, s] = const_i * 1{s >= h}, scaled per unit so sum_s W[i,s] marg[i,s]
    equals 1/(p n) exactly against the supplied tables.  This is the
    feasible warm start; at p = 1/2 it reproduces the Horvitz-Thompson
    estimator draw for draw.
    """
    mask = tables.grid >= float(h) * (1.0 - 1e-12)
    if not mask.any():
        raise ValueError("grid must reach the estimator size h")
    cover = (tables.marg * mask).sum(axis=1)
    if np.any(cover <= 0.0):
        raise ValueError("some unit never has a pure size-h neighborhood "
                         "under the tables; enlarge mc_draws or the grid")
    W = mask.astype(float)[None, :] / (p * tables.n * cover)[:, None]
    return OwWeightTable(W=W, grid=tables.grid, objective_value=np.nan,
                         iterations=0, kkt_residual=np.nan, converged=True,
                         p=float(p))


def project_rows(V: np.ndarray, M: np.ndarray, r: float) -> np.ndarray:
    """Row-wise Euclidean projection onto {w >= 0, sum_s M[i,s] w[s] = r}.

    Water-filling with exact breakpoints: w = max(0, v - lam*m) with the
    per-row lam solving the equality.  Coordinates with m = 0 are free and
    only clipped at zero.
    """
    V = np.asarray(V, dtype=float)
    M = np.asarray(M, dtype=float)
    n, S = V.shape
    beta = np.where(M > 0, V / np.where(M > 0, M, 1.0), -np.inf)
    order = np.argsort(-beta, axis=1)
    beta_s = np.take_along_axis(beta, order, axis=1)
    mv_s = np.take_along_axis(M * V, order, axis=1)
    mm_s = np.take_along_axis(M * M, order, axis=1)
    cum_mv = np.cumsum(mv_s, axis=1)
    cum_mm = np.cumsum(mm_s, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        lam_k = (cum_mv - r) / cum_mm
    upper = beta_s
    lower = np.concatenate([beta_s[:, 1:], np.full((n, 1), -np.inf)], axis=1)
    # boundary slack: a coordinate exactly at its breakpoint clips to zero
    # either way, so accepting both adjacent segments is harmless
    valid = (lam_k <= upper + 1e-12) & (lam_k >= lower - 1e-12) & (cum_mm > 0)
    first = np.argmax(valid, axis=1)
    lam = lam_k[np.arange(n), first]
    return np.maximum(0.0, V - lam[:, None] * M)


def _power_lmax(Q: np.ndarray, iters: int = 60, seed: int = 0) -> float:
    gen = rng_for(seed, TAG_TABLES)
    v = gen.standard_normal(Q.shape[0])
    v /= np.linalg.norm(v)
    lam = 1.0
    for _ in range(iters):
        w = Q @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 1.0
        lam = nw
        v = w / nw
    return float(lam)


def _active_set_solve(Q, marg, r, free, S):
    """Equality-constrained exact solve with the complement pinned at zero.

    Returns the stacked candidate (zeros on pinned coords) or None when the
    linear solve cannot satisfy the per-unit constraints.
    """
    n = marg.shape[0]
    flat_m = marg.reshape(-1)
    idx = np.flatnonzero(free)
    if idx.size == 0:
        return None
    nf = idx.size
    A = np.zeros((n, nf))
    A[idx // S, np.arange(nf)] = flat_m[idx]
    if not A.any(axis=1).all():        # some unit has no free coordinate
        return None
    kkt = np.zeros((nf + n, nf + n))
    kkt[:nf, :nf] = 2.0 * Q[np.ix_(idx, idx)]
    kkt[:nf, nf:] = A.T
    kkt[nf:, :nf] = A
    rhs = np.concatenate([np.zeros(nf), np.full(n, r)])
    sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    cand = np.zeros_like(flat_m, dtype=float)
    cand[idx] = sol[:nf]
    lhs = (cand.reshape(n, S) * marg).sum(axis=1)
    if np.max(np.abs(lhs - r)) > 1e-9 * max(r, 1.0):
        return None
    return cand


def _active_set_polish(Q, marg, r, w_proj, S, rounds: int = 12):
    """Primal-dual active-set refinement seeded by a projected iterate.

    Coordinates the projection pinned at zero start active.  Each round
    solves the equality-constrained problem on the free set exactly, moves
    newly negative coordinates back to the active set, and releases active
    coordinates whose KKT multiplier comes out negative.  Returns a
    feasible candidate (clipped at zero) or None.
    """
    n = marg.shape[0]
    flat_m = marg.reshape(-1)
    usable = flat_m > 0
    free = (w_proj > 1e-14) & usable
    best = None
    for _ in range(rounds):
        cand = _active_set_solve(Q, marg, r, free, S)
        if cand is None:
            return best
        neg = cand < -1e-12
        if neg.any():
            free &= ~neg
            continue
        cand = np.maximum(cand, 0.0)
        g = 2.0 * (Q @ cand)
        # per-unit multiplier from the free coords (g = lam * m at optimum)
        gm = np.where(free, g * flat_m, 0.0).reshape(n, S).sum(axis=1)
        mm = np.where(free, flat_m * flat_m, 0.0).reshape(n, S).sum(axis=1)
        lam = gm / np.where(mm > 0, mm, 1.0)
        mu = g - np.repeat(lam, S) * flat_m
        best = cand
        blocked = usable & ~free & (mu < -1e-10 * max(1.0, np.abs(g).max()))
        if not blocked.any():
            return cand
        release = np.argmin(np.where(blocked, mu, np.inf))
        free[release] = True
    return best


def solve_qp(Q: np.ndarray, marg: np.ndarray, p: float, n: int,
             warm_start: np.ndarray = None, max_iter: int = 50_000,
             tol: float = 1e-7) -> OwWeightTable:
    """Minimize w'Qw over the per-unit constraint polytope.

    Accelerated projected gradient with gradient-scheme restarts, run on the
    Jacobi-preconditioned variable sqrt(diag Q) * w (diag entries span many
    orders of magnitude because they carry saturation probabilities), with
    periodic exact active-set refinements.  A final monotone projected
    gradient pass guarantees the returned objective never exceeds the warm
    start's.  Non-convergence is reported on the result, never silent.
    """
    S = marg.shape[1]
    r = 1.0 / (p * n)
    if warm_start is None:
        start = np.zeros_like(marg)
    else:
        start = np.asarray(warm_start, dtype=float).reshape(n, S)

    # preconditioned variable x = sd * w; a PSD row with zero diagonal is a
    # zero row, so the unit scale placeholder is inert there
    dq = np.diag(Q).copy()
    sd = np.sqrt(np.where(dq > 0, dq, 1.0))
    Qt = Q / np.outer(sd, sd)
    mt = (marg.reshape(-1) / sd).reshape(n, S)

    def f_w(wv):
        return float(wv @ (Q @ wv))

    def proj_x(xv):
        return project_rows(xv.reshape(n, S), mt, r).reshape(-1)

    lmax = _power_lmax(Qt)
    step = 1.0 / max(2.0 * lmax, 1e-30)

    def residual_x(xv):
        g = 2.0 * (Qt @ xv)
        return float(np.max(np.abs(xv - proj_x(xv - step * g))) / step)

    x = proj_x(start.reshape(-1) * sd)
    best_x = x.copy()
    best_f = f_w(best_x / sd)
    y = x.copy()
    t = 1.0
    it = 0
    res = residual_x(x)
    while res > tol and it < max_iter:
        it += 1
        x_new = proj_x(y - step * 2.0 * (Qt @ y))
        if (y - x_new) @ (x_new - x) > 0.0:   # momentum points uphill
            y = x_new.copy()
            t = 1.0
        else:
            t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            y = x_new + ((t - 1.0) / t_new) * (x_new - x)
            t = t_new
        x = x_new
        f_new = f_w(x_new / sd)
        if f_new < best_f:
            best_f = f_new
            best_x = x_new.copy()
        if it % 50 == 0:
            res = residual_x(x)
            if res > tol and it % 1000 == 0:
                # projected step identifies the active face; refine on it
                x_probe = proj_x(x - step * 2.0 * (Qt @ x))
                cand = _active_set_polish(Qt, mt, r, x_probe, S)
                if cand is not None:
                    f_cand = f_w(cand / sd)
                    if f_cand <= best_f + 1e-12 * abs(best_f):
                        cand_res = residual_x(cand)
                        if cand_res < res:
                            x = cand
                            y = cand.copy()
                            t = 1.0
                            res = cand_res
                        if f_cand < best_f:
                            best_f = f_cand
                            best_x = cand.copy()
    # monotone tail from the best point: plain projected-gradient descent,
    # so the returned objective never exceeds the warm start's
    if f_w(x / sd) > best_f:
        x = best_x.copy()
        res = residual_x(x)
    while res > tol and it < max_iter:
        it += 1
        x = proj_x(x - step * 2.0 * (Qt @ x))
        if it % 50 == 0:
            res = residual_x(x)
    res = residual_x(x)
    w = x / sd
    return OwWeightTable(W=w.reshape(n, S), grid=None,
                         objective_value=f_w(w), iterations=it,
                         kkt_residual=res, converged=res <= tol, p=float(p))


def optimize_weights(space: PremetricSpace, partition: ClusterPartition,
                     grid, p: float, budget: InterferenceBudget, h,
                     method: str = "mc", mc_draws: int = 100_000,
                     seed: int = 0, max_iter: int = 50_000,
                     tol: float = 1e-7):
    """Full pipeline: tables -> objective -> warm-started QP solve.

    Returns (tables, ipw_table, ow_table); both weight tables share the
    tables' effective grid.
    """
    tables = saturation_tables(space, partition, grid, p, method=method,
                               mc_draws=mc_draws, seed=seed)
    Q = assemble_objective(tables, budget)
    start = ipw_weight_table(tables, h, p)
    start.objective_value = float(start.W.reshape(-1) @ (Q @ start.W.reshape(-1)))
    ow = solve_qp(Q, tables.marg, p, space.n, warm_start=start.W,
                  max_iter=max_iter, tol=tol)
    ow.grid = tables.grid
    return tables, start, ow


def default_ow_grid(h: float) -> list:
    """Size grid h * 2**k for k = -5..2 (the floor is added downstream)."""
    return [float(h) * 2.0 ** k for k in range(-5, 3)]


def ow_estimate(Y, d, profile, weights: OwWeightTable) -> EstimateReport:
    """Weighted outcome sum sum_i (2 d_i - 1) W[i, s_tilde_i] Y_i."""
    if weights.grid is None or profile.grid.size != weights.grid.size or \
            not np.allclose(profile.grid, weights.grid):
        raise ValueError("saturation profile and weight table use different grids")
    Y = np.asarray(Y, dtype=float)
    d = np.asarray(d)
    w_real = (2.0 * d - 1.0) * weights.W[np.arange(Y.size), profile.idx]
    return EstimateReport(estimate=float(w_real @ Y), estimator="ow",
                          params={"grid_size": int(weights.grid.size)},
                          diagnostics={"objective": weights.objective_value})
