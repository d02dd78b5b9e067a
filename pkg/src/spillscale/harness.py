"""Monte Carlo replication engine over designs, estimators, and sizes.

Each (population size, design) cell builds a fresh uniform-disk population,
the linear simulation outcomes, a guess matrix, and the partition, then
replays seeded treatment draws.  Replicates are vectorized in blocks but
reproduce the per-draw estimator functions bit for bit (same Philox streams,
same arithmetic shapes), so identical configs give identical CSV bytes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.stats import norm

from . import owopt
from .design import (TAG_COORDS, ClusterPartition, extend_uniform_overlap,
                     incidence, rng_for, scaling_clusters, scaling_rule,
                     singleton_partition)
from .estimators import dependency_graph
from .geometry import PremetricSpace, build_space, uniform_disk
from .outcomes import GuessMatrix, LinearOutcomes, make_guess, make_sim_dgp, sim_budget

DESIGNS = ("scaling_clusters", "iid")
ESTIMATORS = ("ht", "hajek", "ols", "shrink", "ow")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class ExperimentConfig:
    n_list: list
    designs: list = field(default_factory=lambda: ["scaling_clusters"])
    estimators: list = field(default_factory=lambda: ["ht", "hajek", "ols", "shrink"])
    eta: float = 1.0
    c0: float = 1.0
    p: float = 0.5
    reps: int = 2000
    base_seed: int = 0
    grid_factors: list = field(default_factory=lambda: [2.0 ** k for k in range(-5, 3)])
    ci_level: float = 0.95
    epsilon: float = 0.1
    ow_max_n: int = 120
    ow_mc_draws: int = 100_000
    h_fixed: float | None = None

    def validate(self):
        if not self.n_list or any(int(n) < 2 for n in self.n_list):
            raise ConfigError("n_list must be nonempty with every n >= 2")
        if not self.designs or any(d not in DESIGNS for d in self.designs):
            raise ConfigError(f"designs must be a nonempty subset of {DESIGNS}")
        if not self.estimators or any(e not in ESTIMATORS for e in self.estimators):
            raise ConfigError(f"estimators must be a nonempty subset of {ESTIMATORS}")
        if not 0.0 < self.p < 1.0:
            raise ConfigError("p must be in (0, 1)")
        if self.reps < 1:
            raise ConfigError("reps must be >= 1")
        if self.eta <= 0 or self.c0 <= 0:
            raise ConfigError("eta and c0 must be positive")
        if not 0.0 < self.ci_level < 1.0:
            raise ConfigError("ci_level must be in (0, 1)")
        return self


@dataclass
class ResultRow:
    n: int
    design: str
    estimator: str
    reps_ok: int
    fail_rate: float
    mean_est: float
    bias: float
    rmse: float
    coverage: float | None
    seconds: float

    CSV_COLUMNS = ("n", "design", "estimator", "reps_ok", "fail_rate",
                   "mean_est", "bias", "rmse", "coverage")

    def csv_values(self):
        # seconds is wall clock and would break byte-for-byte reruns
        vals = []
        for name in self.CSV_COLUMNS:
            v = getattr(self, name)
            if v is None:
                vals.append("")
            elif isinstance(v, float):
                vals.append(f"{v:.12g}")
            else:
                vals.append(str(v))
        return vals


def build_population(n: int, seed: int) -> tuple[PremetricSpace, LinearOutcomes, GuessMatrix]:
    """Uniform disk of radius sqrt(n), outcomes, and guess from one seed."""
    coords = uniform_disk(n, rng_for(seed, TAG_COORDS))
    space = build_space(coords)
    outcomes = make_sim_dgp(space, seed)
    guess = make_guess(space, seed)
    return space, outcomes, guess


def make_partition(space: PremetricSpace, design: str, h: float) -> ClusterPartition:
    if design == "scaling_clusters":
        return scaling_clusters(space, h)
    if design == "iid":
        return singleton_partition(space.n)
    raise ConfigError(f"unknown design {design!r}")


def draw_bits_batch(n_clusters: int, p: float, seeds) -> np.ndarray:
    """Cluster bits for many replicates, one Philox stream per seed.

    Stream-for-stream identical to design.draw_treatments(partition, p, s).
    """
    from .design import TAG_TREAT

    B = np.empty((len(seeds), n_clusters), dtype=np.int8)
    for k, s in enumerate(seeds):
        B[k] = rng_for(int(s), TAG_TREAT).uniform(size=n_clusters) < p
    return B


@dataclass
class CellResult:
    """Per-replicate estimator outputs for one (n, design) cell."""

    estimates: dict                 # name -> (reps,) float, NaN on failure
    covers: dict                    # name -> (reps,) bool array (ci estimators)
    theta: float
    seconds: float


def simulate_design(space, outcomes, guess, partition, h, p, reps, base_seed,
                    estimators, ci_level=0.95, epsilon=0.1, eta=1.0,
                    ow_mc_draws=100_000, grid_factors=None,
                    block: int = 512) -> CellResult:
    """Replay `reps` seeded draws and evaluate the requested estimators.

    Replicate r uses treatment seed base_seed + r.  Estimator failures
    (empty Hajek group, degenerate exposure, weak first stage) are recorded
    as NaN, never raised.
    """
    t0 = time.perf_counter()
    n = space.n
    A = outcomes.A
    eps_b0 = outcomes.eps + outcomes.beta0
    counts = incidence(space, partition, h)
    phi = counts.phi
    inc_base = counts.incidence.astype(np.float64)
    M_h = space.neighborhood_matrix(h).astype(np.float64)
    extended = extend_uniform_overlap(space, partition, h)
    inc_ext = extended.incidence.astype(np.float64)
    phi_u = float(extended.phi_target)
    assignment = partition.assignment
    inv_p_phi = p ** -phi.astype(float)
    inv_q_phi = (1.0 - p) ** -phi.astype(float)
    z = norm.ppf(0.5 + ci_level / 2.0)
    need_ci = {"hajek", "ols"} & set(estimators)
    lam = dependency_graph(space, partition, h, eta, epsilon) if need_ci else None
    if "shrink" in estimators:
        A_hat = guess.A_hat
        scale_hat = A_hat.sum() / n

    ow_table = None
    if "ow" in estimators:
        budget = sim_budget(outcomes, space, eta,
                            s_grid=sorted({h, *np.geomspace(1.0, max(n, 2), 12)}))
        factors = grid_factors or [2.0 ** k for k in range(-5, 3)]
        grid = [h * f for f in factors]
        tables, _, ow_table = owopt.optimize_weights(
            space, partition, grid, p, budget, h, method="mc",
            mc_draws=ow_mc_draws, seed=base_seed + n)
        G_stack = owopt.cluster_incidence_stack(space, partition, ow_table.grid)

    estimates = {name: np.full(reps, np.nan) for name in estimators}
    covers = {name: np.zeros(reps, dtype=bool) for name in need_ci}

    for lo in range(0, reps, block):
        seeds = range(base_seed + lo, base_seed + min(lo + block, reps))
        B = draw_bits_batch(partition.n_clusters, p, list(seeds))
        D = B[:, assignment].T.astype(np.float64)        # n x m
        Bf = B.T.astype(np.float64)                      # C x m
        m = D.shape[1]
        sl = slice(lo, lo + m)
        Y = A @ D + eps_b0[:, None]
        ybar = Y.mean(axis=0)

        sat = (M_h @ (1.0 - D)) == 0.0
        dis = (M_h @ D) == 0.0

        if "ht" in estimators:
            w = sat * inv_p_phi[:, None] - dis * inv_q_phi[:, None]
            estimates["ht"][sl] = np.einsum("im,im->m", w, Y) / n

        T = None
        if {"hajek", "ols", "shrink"} & set(estimators):
            T = (inc_ext @ Bf) / phi_u
            tbar = T.mean(axis=0)

        if "hajek" in estimators:
            w1 = sat * inv_p_phi[:, None]
            w0 = dis * inv_q_phi[:, None]
            s1 = w1.sum(axis=0)
            s0 = w0.sum(axis=0)
            ok = (s1 > 0) & (s0 > 0)
            w_haj = np.where(ok, 1.0, np.nan) * (
                w1 / np.where(s1 > 0, s1, 1.0)
                - w0 / np.where(s0 > 0, s0, 1.0))
            est = np.einsum("im,im->m", w_haj, Y)
            estimates["hajek"][sl] = np.where(ok, est, np.nan)
            if lam is not None:
                # Hajek centers on its own exposure: treated-cluster share
                # of the base neighborhood, 1 when saturated, 0 when not
                T_haj = (inc_base @ Bf) / phi[:, None]
                e = w_haj * (Y - ybar[None, :] - est[None, :] * (T_haj - p))
                sig2 = np.maximum(np.einsum("im,im->m", e, lam @ e), 0.0)
                covers["hajek"][sl] = ok & (
                    np.abs(est - outcomes.theta) <= z * np.sqrt(sig2))

        if {"ols", "shrink"} & set(estimators):
            cov_ty = np.einsum("im,im->m", T, Y) / n - tbar * ybar
            var_t = np.einsum("im,im->m", T, T) / n - tbar ** 2

        if "ols" in estimators:
            ok = var_t > 1e-12
            est = cov_ty / np.where(ok, var_t, 1.0)
            estimates["ols"][sl] = np.where(ok, est, np.nan)
            if lam is not None:
                w_ols = (T - tbar[None, :]) / (n * np.where(ok, var_t, 1.0))
                e = w_ols * (Y - ybar[None, :] - est[None, :] * (T - p))
                sig2 = np.maximum(np.einsum("im,im->m", e, lam @ e), 0.0)
                covers["ols"][sl] = ok & (
                    np.abs(est - outcomes.theta) <= z * np.sqrt(sig2))

        if "shrink" in estimators:
            Tg = A_hat @ D
            cov_ttg = (np.einsum("im,im->m", T, Tg) / n
                       - tbar * Tg.mean(axis=0))
            ok = np.abs(cov_ttg) > 1e-12
            estimates["shrink"][sl] = np.where(
                ok, cov_ty / np.where(ok, cov_ttg, 1.0) * scale_hat, np.nan)

        if "ow" in estimators:
            idx = owopt.stilde_indices(G_stack, B)       # m x n
            w_real = (2.0 * D - 1.0) * ow_table.W[np.arange(n)[None, :], idx].T
            estimates["ow"][sl] = np.einsum("im,im->m", w_real, Y)

    return CellResult(estimates=estimates, covers=covers,
                      theta=outcomes.theta,
                      seconds=time.perf_counter() - t0)


def summarize(cell: CellResult, n: int, design: str, reps: int) -> list:
    rows = []
    for name, vals in cell.estimates.items():
        ok = ~np.isnan(vals)
        reps_ok = int(ok.sum())
        good = vals[ok]
        mean_est = float(good.mean()) if reps_ok else np.nan
        bias = mean_est - cell.theta if reps_ok else np.nan
        rmse = float(np.sqrt(np.mean((good - cell.theta) ** 2))) if reps_ok else np.nan
        coverage = None
        if name in cell.covers and reps_ok:
            coverage = float(cell.covers[name][ok].mean())
        rows.append(ResultRow(n=n, design=design, estimator=name,
                              reps_ok=reps_ok,
                              fail_rate=float(1.0 - reps_ok / reps),
                              mean_est=mean_est, bias=bias, rmse=rmse,
                              coverage=coverage, seconds=cell.seconds))
    return rows


def run_experiment(config: ExperimentConfig) -> list:
    """All (n, design) cells of the configured grid, as ResultRows."""
    config.validate()
    rows = []
    for n in [int(v) for v in config.n_list]:
        space, outcomes, guess = build_population(n, config.base_seed + n)
        h = config.h_fixed if config.h_fixed is not None else scaling_rule(
            n, config.eta, config.c0)
        for design in config.designs:
            partition = make_partition(space, design, h)
            names = [e for e in config.estimators
                     if not (e == "ow" and n > config.ow_max_n)]
            if not names:
                continue
            cell = simulate_design(
                space, outcomes, guess, partition, h, config.p, config.reps,
                config.base_seed, names, ci_level=config.ci_level,
                epsilon=config.epsilon, eta=config.eta,
                ow_mc_draws=config.ow_mc_draws,
                grid_factors=config.grid_factors)
            rows.extend(summarize(cell, n, design, config.reps))
    return rows


def rate_slope(rows: list) -> float:
    """Least-squares slope of log RMSE on log n over one estimator/design."""
    pts = [(r.n, r.rmse) for r in rows if np.isfinite(r.rmse)]
    if len({n for n, _ in pts}) < 3:
        raise ValueError("rate_slope needs at least 3 distinct n")
    x = np.log([float(n) for n, _ in pts])
    y = np.log([v for _, v in pts])
    return float(np.polyfit(x, y, 1)[0])


def slopes_table(rows: list) -> list:
    """(estimator, design, slope, n_points) for every series with >= 3 sizes."""
    out = []
    combos = sorted({(r.estimator, r.design) for r in rows})
    for est, design in combos:
        series = [r for r in rows if r.estimator == est and r.design == design]
        if len({r.n for r in series}) >= 3:
            out.append((est, design, rate_slope(series), len(series)))
    return out


# --- config file parsing (key = value, lists comma-separated) ---------------

_LIST_FIELDS = {"n_list", "designs", "estimators", "grid_factors"}
_INT_FIELDS = {"reps", "base_seed", "ow_max_n", "ow_mc_draws"}
_FLOAT_FIELDS = {"eta", "c0", "p", "ci_level", "epsilon", "h_fixed"}


def parse_config(text: str) -> ExperimentConfig:
    known = {f.name for f in fields(ExperimentConfig)}
    kwargs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            if key in _LIST_FIELDS:
                items = [v.strip() for v in value.split(",") if v.strip()]
                if key == "n_list":
                    kwargs[key] = [int(v) for v in items]
                elif key == "grid_factors":
                    kwargs[key] = [float(v) for v in items]
                else:
                    kwargs[key] = items
            elif key in _INT_FIELDS:
                kwargs[key] = int(value)
            elif key in _FLOAT_FIELDS:
                kwargs[key] = float(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from exc
    if "n_list" not in kwargs:
        raise ConfigError("config must set n_list")
    return ExperimentConfig(**kwargs).validate()


def results_csv(rows: list) -> str:
    lines = [",".join(ResultRow.CSV_COLUMNS)]
    lines += [",".join(r.csv_values()) for r in rows]
    return "\n".join(lines) + "\n"


def slopes_csv(rows: list) -> str:
    lines = ["estimator,design,slope,n_points"]
    for est, design, slope, k in slopes_table(rows):
        lines.append(f"{est},{design},{slope:.12g},{k}")
    return "\n".join(lines) + "\n"
