"""Potential-outcome engines: the linear spillover model and simulation DGP.

Under linearity, Y_i(d) = beta0 + A_i d + eps_i with a deterministic residual
that sums to zero, and the average global effect is 1'A1/n.  The simulation
DGP places spillovers proportional to (dist+1)**-4, normalized so the
estimand equals 2 in every population, with spatially autocorrelated noise
drawn once per population.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .design import TAG_DGP, TAG_GUESS, rng_for
from .geometry import InterferenceBudget, PremetricSpace, fit_interference_constant


class OutcomeModelError(ValueError):
    """Degenerate outcome-model construction."""


@dataclass(frozen=True, eq=False)
class LinearOutcomes:
    """Y_i(d) = beta0 + A_i d + eps_i with sum(eps) = 0."""

    beta0: float
    A: np.ndarray
    eps: np.ndarray
    theta: float

    def __post_init__(self):
        n = self.A.shape[0]
        if abs(float(self.eps.sum())) > 1e-9 * n:
            raise OutcomeModelError("residuals must sum to zero")
        if not np.isclose(self.theta, self.A.sum() / n, rtol=1e-12, atol=0):
            raise OutcomeModelError("theta must equal 1'A1/n")

    @property
    def n(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True, eq=False)
class GuessMatrix:
    """Researcher's deterministic guess for the spillover matrix."""

    A_hat: np.ndarray
    strength: float                 # |1'A_hat 1| / n

    @property
    def n(self) -> int:
        return self.A_hat.shape[0]


@dataclass(frozen=True, eq=False)
class OutcomeOracle:
    """Black-box deterministic outcome map, for non-linear settings."""

    n: int
    evaluator: object               # callable: d (n,) -> Y (n,)

    def __call__(self, d):
        return np.asarray(self.evaluator(np.asarray(d)))


def make_linear(A, eps=None, beta0: float = 0.0) -> LinearOutcomes:
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    if eps is None:
        eps = np.zeros(n)
    eps = np.asarray(eps, dtype=float) - np.mean(eps)
    return LinearOutcomes(beta0=float(beta0), A=A, eps=eps, theta=float(A.sum() / n))


def make_sim_dgp(space: PremetricSpace, seed: int) -> LinearOutcomes:
    """Simulation outcome model on the given population.

    B = (dist+1)**-4, A = 2*B*n/(1'B1), residuals (sqrt(n)/||A||_F) * A @ e
    with e i.i.d. standard normal drawn once from the population seed and
    then re-centered to sum exactly to zero.  The estimand is 2 by
    normalization.
    """
    n = space.n
    B = (space.dist + 1.0) ** -4.0
    A = 2.0 * B * n / B.sum()
    gen = rng_for(seed, TAG_DGP)
    e = gen.standard_normal(n)
    eps = (np.sqrt(n) / np.linalg.norm(A, "fro")) * (A @ e)
    eps = eps - eps.mean()
    return LinearOutcomes(beta0=0.0, A=A, eps=eps, theta=float(A.sum() / n))


def make_guess(space: PremetricSpace, seed: int, scale: float = 1.1,
               exponent: float = 4.25, noise_lo: float = 0.9,
               noise_hi: float = 1.0) -> GuessMatrix:
    """Noisy, structurally wrong but decay-respecting guess for A.

    B_hat = (scale*dist + 1)**-exponent * delta with delta i.i.d.
    Uniform(noise_lo, noise_hi), normalized like the true matrix so
    1'A_hat 1 / n = 2 exactly.  Degeneration to the true recipe
    (scale=1, exponent=4, delta=1) reproduces A.
    """
    n = space.n
    gen = rng_for(seed, TAG_GUESS)
    delta = gen.uniform(noise_lo, noise_hi, size=(n, n))
    B_hat = (scale * space.dist + 1.0) ** -exponent * delta
    total = B_hat.sum()
    if abs(total) <= 1e-12:
        raise OutcomeModelError("guess matrix has degenerate total mass")
    A_hat = 2.0 * B_hat * n / total
    strength = abs(A_hat.sum()) / n
    if strength <= 1e-12:
        raise OutcomeModelError("guess strength is degenerate")
    return GuessMatrix(A_hat=A_hat, strength=float(strength))


def realize(outcomes, d) -> np.ndarray:
    """Outcome vector under the full treatment assignment d."""
    d = np.asarray(d)
    if d.shape != (outcomes.n,):
        raise ValueError(f"treatment vector must have shape ({outcomes.n},)")
    if isinstance(outcomes, LinearOutcomes):
        return outcomes.beta0 + outcomes.A @ d.astype(float) + outcomes.eps
    return outcomes(d)


def age(outcomes) -> float:
    """Average global effect: mean of Y(1) - Y(0)."""
    n = outcomes.n
    y1 = realize(outcomes, np.ones(n, dtype=np.int8))
    y0 = realize(outcomes, np.zeros(n, dtype=np.int8))
    return float(np.mean(y1 - y0))


def sim_budget(outcomes: LinearOutcomes, space: PremetricSpace, eta: float,
               s_grid=None) -> InterferenceBudget:
    """Fit the decay/bound constants realized by a linear outcome model."""
    k1 = fit_interference_constant(outcomes.A, space, eta, s_grid)
    row_mass = np.abs(outcomes.A).sum(axis=1)
    ybar = float(np.max(abs(outcomes.beta0) + row_mass + np.abs(outcomes.eps)))
    return InterferenceBudget(eta=eta, k1=max(k1, 1e-12), ybar=ybar)
