"""Point estimators for the average global effect, and their HAC intervals.

Horvitz-Thompson compares units whose whole size-h neighborhood is treated
against units whose whole neighborhood is untreated, inverse-weighted by the
exact saturation probabilities p**phi and (1-p)**phi.  Hajek renormalizes
each comparison group's weights to sum to one.  OLS regresses outcomes on
the fraction of treated clusters among those meeting each (extended)
neighborhood, and the shrinkage estimator instruments a guess-implied
exposure with that fraction.  Variances come from a spatial HAC sum over
pairs whose slightly inflated neighborhoods share a randomization cluster.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .design import ClusterPartition, ExtendedNeighborhoods, incidence
from .geometry import PremetricSpace
from .outcomes import GuessMatrix


class EstimatorUndefinedError(RuntimeError):
    """Draw on which the estimator is undefined; callers record a failure."""

    undefined_draw = True

    def __init__(self, reason: str, message: str = ""):
        self.reason = reason
        super().__init__(message or reason)


@dataclass
class EstimateReport:
    estimate: float
    estimator: str
    params: dict = field(default_factory=dict)
    variance_hat: float | None = None
    ci: tuple | None = None         # (level, lo, hi)
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ExposureVector:
    """Fraction of treated clusters among those meeting each neighborhood."""

    T: np.ndarray
    phi_used: int


@dataclass(frozen=True)
class SaturationProfile:
    """Largest grid size at which each unit's neighborhood is pure."""

    grid: np.ndarray                # ascending, grid[0] is the floor s0
    s_tilde: np.ndarray
    idx: np.ndarray                 # index of s_tilde in grid


def emp_cov(x, y) -> float:
    """Empirical covariance x'y/n - mean(x)mean(y), no dof correction."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return float(x @ y / x.size - x.mean() * y.mean())


def exposure_values(T) -> np.ndarray:
    """Accept an ExposureVector or a plain array of exposures."""
    if isinstance(T, ExposureVector):
        return T.T
    return np.asarray(T, dtype=float)


def saturation_indicators(space: PremetricSpace, d, h) -> tuple[np.ndarray, np.ndarray]:
    """(saturated, dissaturated) flags of each unit's size-h neighborhood."""
    d = np.asarray(d)
    M = space.neighborhood_matrix(h)
    untreated_in = M @ (1 - d)
    treated_in = M @ d
    return untreated_in == 0, treated_in == 0


def ipw_ht(Y, d, space: PremetricSpace, partition: ClusterPartition,
           h, p: float) -> EstimateReport:
    """Horvitz-Thompson difference in saturation-weighted means.

    Units that are neither saturated nor dissaturated contribute zero, so
    the estimator is defined for every draw.
    """
    Y = np.asarray(Y, dtype=float)
    sat, dis = saturation_indicators(space, d, h)
    phi = incidence(space, partition, h).phi
    w = sat / p ** phi - dis / (1.0 - p) ** phi
    est = float(np.sum(w * Y) / Y.size)
    return EstimateReport(
        estimate=est, estimator="ht", params={"h": float(h), "p": p},
        diagnostics={"phi_max": int(phi.max()), "n_saturated": int(sat.sum()),
                     "n_dissaturated": int(dis.sum())})


def hajek_weights(d, space: PremetricSpace, partition: ClusterPartition,
                  h, p: float) -> np.ndarray:
    """Per-unit weights whose dot with Y is the Hajek estimate."""
    sat, dis = saturation_indicators(space, d, h)
    if not sat.any() or not dis.any():
        raise EstimatorUndefinedError(
            "undefined_draw", "Hajek needs at least one saturated and one "
            "dissaturated unit")
    phi = incidence(space, partition, h).phi
    w1 = sat / p ** phi
    w0 = dis / (1.0 - p) ** phi
    return w1 / w1.sum() - w0 / w0.sum()


def hajek(Y, d, space: PremetricSpace, partition: ClusterPartition,
          h, p: float) -> EstimateReport:
    """Group-renormalized IPW: saturated and dissaturated weights each sum to 1."""
    Y = np.asarray(Y, dtype=float)
    w = hajek_weights(d, space, partition, h, p)
    sat, dis = saturation_indicators(space, d, h)
    return EstimateReport(
        estimate=float(w @ Y), estimator="hajek", params={"h": float(h), "p": p},
        diagnostics={"n_saturated": int(sat.sum()), "n_dissaturated": int(dis.sum())})


def exposure(partition: ClusterPartition, extended: ExtendedNeighborhoods,
             b) -> ExposureVector:
    """Mean treatment status among clusters meeting the extended neighborhood."""
    phi = extended.exposure_phi()
    if np.any(phi != extended.phi_target):
        raise ValueError("exposure requires uniform overlap; extend first")
    b = np.asarray(b, dtype=float)
    T = (extended.incidence @ b) / extended.phi_target
    return ExposureVector(T=T, phi_used=int(extended.phi_target))


def ols_weights(T) -> np.ndarray:
    """Per-unit weights whose dot with Y is the OLS estimate."""
    T = exposure_values(T)
    var_t = emp_cov(T, T)
    if var_t <= 1e-12:
        raise EstimatorUndefinedError(
            "degenerate_exposure", "exposure has zero sample variance")
    return (T - T.mean()) / (T.size * var_t)


def ols(Y, T) -> EstimateReport:
    """Regression slope of outcomes on exposures, empirical-covariance form."""
    Y = np.asarray(Y, dtype=float)
    Tv = exposure_values(T)
    w = ols_weights(Tv)
    return EstimateReport(estimate=float(w @ Y), estimator="ols",
                          params={}, diagnostics={})


def shrinkage(Y, T, d, guess: GuessMatrix, h=None) -> EstimateReport:
    """Exposure-instrumented regression on guess-implied exposures.

    theta = [Cov(T, Y) / Cov(T, A_hat d)] * (1'A_hat 1 / n); consistent for
    any guess with nonzero total mass, tighter when the guess's split of
    spillovers across the neighborhood boundary matches the truth.
    """
    Y = np.asarray(Y, dtype=float)
    Tv = exposure_values(T)
    t_guess = guess.A_hat @ np.asarray(d, dtype=float)
    first_stage = emp_cov(Tv, t_guess)
    if abs(first_stage) <= 1e-12:
        raise EstimatorUndefinedError(
            "weak_instrument", "near-zero first stage Cov(T, A_hat d)")
    scale = guess.A_hat.sum() / guess.n
    est = emp_cov(Tv, Y) / first_stage * scale
    return EstimateReport(estimate=float(est), estimator="shrink",
                          params={"h": h}, diagnostics={"first_stage": first_stage})


def effective_grid(space: PremetricSpace, grid) -> np.ndarray:
    """Ascending grid with the saturation floor s0 prepended.

    s0 is the largest size at which every unit's neighborhood is just itself,
    so own treatment status keeps every s_tilde well defined.
    """
    s0 = space.saturation_floor()
    grid = np.asarray(sorted(set(float(s) for s in np.atleast_1d(grid))))
    if np.any(grid <= 0):
        raise ValueError("grid sizes must be positive")
    return np.concatenate([[s0], grid[grid > s0]])


def saturation(space: PremetricSpace, d, grid) -> SaturationProfile:
    """Largest grid size whose neighborhood is fully treated or untreated."""
    grid_eff = effective_grid(space, grid)
    d = np.asarray(d)
    idx = np.zeros(space.n, dtype=np.int64)
    alive = np.ones(space.n, dtype=bool)   # purity is monotone down the grid
    for k, s in enumerate(grid_eff):
        sat, dis = saturation_indicators(space, d, s)
        alive &= sat | dis
        idx[alive] = k
    return SaturationProfile(grid=grid_eff, s_tilde=grid_eff[idx], idx=idx)


@dataclass(frozen=True)
class VarianceResult:
    variance_hat: float
    ci: tuple                       # (level, lo, hi)
    truncated: bool                 # negative HAC sum clipped to zero


def dependency_graph(space: PremetricSpace, partition: ClusterPartition,
                     h, eta: float, epsilon: float = 0.1) -> np.ndarray:
    """Pairs whose size-h**(1+eps) neighborhoods share a cluster.

    The inflation keeps the variance estimator consistent even for slow
    decay (eta < 1); epsilon must lie in (0, 2*eta/3).
    """
    if not 0.0 < epsilon < 2.0 * eta / 3.0:
        raise ValueError("epsilon must lie in (0, 2*eta/3)")
    s_dep = float(h) ** (1.0 + epsilon)
    inc = incidence(space, partition, s_dep).incidence
    return (inc @ inc.T) > 0


def variance_ci(Y, d, T, estimate: float, space: PremetricSpace,
                partition: ClusterPartition, h, eta: float, p: float,
                level: float = 0.95, weights=None, estimator: str = None,
                epsilon: float = 0.1) -> VarianceResult:
    """Spatial HAC variance and normal confidence interval.

    sigma2 = sum over dependent pairs of e_i e_j with
    e_i = w_i (Y_i - mean(Y) - theta_hat (T_i - p)), where w are the weights
    implied by the chosen estimator (pass them, or name "hajek"/"ols").
    The weights carry the 1/n scale, so sigma2 estimates Var(theta_hat)
    directly and the interval is theta_hat +/- z * sqrt(sigma2).
    """
    Y = np.asarray(Y, dtype=float)
    Tv = exposure_values(T)
    if weights is None:
        if estimator == "hajek":
            weights = hajek_weights(d, space, partition, h, p)
        elif estimator == "ols":
            weights = ols_weights(Tv)
        else:
            raise ValueError("pass weights or estimator in {'hajek','ols'}")
    lam = dependency_graph(space, partition, h, eta, epsilon)
    e = np.asarray(weights) * (Y - Y.mean() - estimate * (Tv - p))
    sigma2 = float(e @ (lam @ e))
    truncated = sigma2 < 0.0
    sigma2 = max(sigma2, 0.0)
    z = norm.ppf(0.5 + level / 2.0)
    half = z * np.sqrt(sigma2)
    return VarianceResult(variance_hat=sigma2,
                          ci=(level, estimate - half, estimate + half),
                          truncated=truncated)
