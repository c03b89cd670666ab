"""Mutual-information machinery for the correlated-Gaussian toy pair.

The joint is q ~ N(0, I_d), k = rho*q + sqrt(1-rho^2)*eps with independent
standard-normal eps, so every marginal is standard normal, the conditional
density is N(k; rho*q, (1-rho^2) I), and the mutual information has the
closed form -(d/2) log(1 - rho^2).  Because the density ratio is analytic,
the "optimal" contrastive loss and the theoretical bound can be estimated
by plain Monte Carlo and serve as oracles for the empirical quantities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import log1p_exp, log_sum_exp
from .rng import SeededRng
from .validation import as_float_matrix


@dataclass(frozen=True)
class CorrelatedGaussian:
    """Jointly Gaussian (q, k) pair with per-dimension correlation rho."""

    dim: int
    rho: float

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if not abs(self.rho) < 1.0:
            raise ValueError("need |rho| < 1")

    def sample_joint(self, rng: SeededRng, n: int) -> tuple[np.ndarray, np.ndarray]:
        """n rows of (q, k) from the joint distribution."""
        q = rng.standard_normal((n, self.dim))
        eps = rng.standard_normal((n, self.dim))
        k = self.rho * q + math.sqrt(1.0 - self.rho * self.rho) * eps
        return q, k

    def sample_marginal(self, rng: SeededRng, n: int) -> np.ndarray:
        """n rows from the marginal of k (standard normal)."""
        return rng.standard_normal((n, self.dim))


def true_mi(dist: CorrelatedGaussian) -> float:
    """Closed-form mutual information -(d/2) log(1 - rho^2), in nats."""
    return -0.5 * dist.dim * math.log1p(-dist.rho * dist.rho)


def log_density_ratio(dist: CorrelatedGaussian, q, k):
    """log P(k|q) - log P(k), evaluated analytically.

    Accepts single vectors or row-stacked batches; returns a scalar or a
    1-D array accordingly.
    """
    q_arr = as_float_matrix(q, "q")
    k_arr = as_float_matrix(k, "k")
    if q_arr.shape != k_arr.shape or q_arr.shape[1] != dist.dim:
        raise ValueError(f"q and k must both have {dist.dim} columns")
    one_minus = 1.0 - dist.rho * dist.rho
    resid = k_arr - dist.rho * q_arr
    out = (
        -0.5 * dist.dim * math.log(one_minus)
        - np.sum(resid * resid, axis=1) / (2.0 * one_minus)
        + np.sum(k_arr * k_arr, axis=1) / 2.0
    )
    if np.asarray(q).ndim == 1:
        return float(out[0])
    return out


@dataclass(frozen=True)
class McEstimate:
    """A Monte-Carlo estimate with its standard error."""

    value: float
    std_error: float
    n_samples: int


def optimal_loss_mc(
    dist: CorrelatedGaussian,
    weight: float,
    k: int,
    n_samples: int,
    rng: SeededRng,
    chunk: int = 262144,
) -> McEstimate:
    """Monte-Carlo estimate of the optimal contrastive loss.

    Averages log(1 + weight * (P(k0)/P(k0|q)) * sum_i P(ki|q)/P(ki)) over
    (q, k0) from the joint and K negatives from the marginal.  ``weight``
    is the combined margin factor exp(m/tau); pass alpha/K for the
    equivalent rule.  Evaluated fully in log space.
    """
    if n_samples < 1000:
        raise ValueError("n_samples must be >= 1000")
    if k < 1:
        raise ValueError("k must be >= 1")
    if weight <= 0.0:
        raise ValueError("weight must be positive")
    log_w = math.log(weight)
    values = np.empty(n_samples, dtype=np.float64)
    per_chunk = max(1, chunk // k)
    done = 0
    while done < n_samples:
        t = min(per_chunk, n_samples - done)
        q, k0 = dist.sample_joint(rng, t)
        log_r0 = log_density_ratio(dist, q, k0)
        negs = dist.sample_marginal(rng, t * k).reshape(t, k, dist.dim)
        q_rep = np.repeat(q, k, axis=0)
        log_ri = log_density_ratio(dist, q_rep, negs.reshape(t * k, dist.dim)).reshape(t, k)
        z = log_w - log_r0 + log_sum_exp(log_ri, axis=1)
        values[done : done + t] = log1p_exp(z)
        done += t
    return McEstimate(
        value=float(np.mean(values)),
        std_error=float(np.std(values, ddof=1) / math.sqrt(n_samples)),
        n_samples=n_samples,
    )


def theoretical_bound_mc(
    dist: CorrelatedGaussian,
    combined_weight: float,
    n_samples: int,
    rng: SeededRng,
) -> McEstimate:
    """MC estimate of log(1+W) - E log(1 + W * P(k0)/P(k0|q)), W = K exp(m/tau).

    Only the combined weight matters, so configurations with equal
    K*exp(m/tau) share one estimand; eqco configurations pass W = alpha.
    """
    if n_samples < 1000:
        raise ValueError("n_samples must be >= 1000")
    if combined_weight <= 0.0:
        raise ValueError("combined_weight must be positive")
    q, k0 = dist.sample_joint(rng, n_samples)
    log_r0 = log_density_ratio(dist, q, k0)
    terms = log1p_exp(math.log(combined_weight) - log_r0)
    return McEstimate(
        value=float(math.log1p(combined_weight) - np.mean(terms)),
        std_error=float(np.std(terms, ddof=1) / math.sqrt(n_samples)),
        n_samples=n_samples,
    )


def empirical_bound(loss_nce: float, tau: float, m: float, k: int) -> float:
    """log(1 + K*exp(m/tau)) - loss; equals log(1+alpha) - loss under eqco."""
    if not math.isfinite(loss_nce):
        raise ValueError("loss_nce must be finite")
    if tau <= 0.0:
        raise ValueError("tau must be positive")
    if k < 1:
        raise ValueError("k must be >= 1")
    return log1p_exp(math.log(k) + m / tau) - loss_nce


@dataclass(frozen=True)
class BoundReport:
    """One measured configuration with its empirical bound.

    ``bound`` always satisfies bound + loss = log(1 + K*exp(m/tau)).
    """

    k: int
    alpha: float
    m: float
    tau: float
    loss: float
    bound: float
    true_mi: float | None = None

    @classmethod
    def from_loss(
        cls, loss: float, tau: float, m: float, k: int, alpha: float, mi: float | None = None
    ) -> "BoundReport":
        return cls(
            k=k,
            alpha=alpha,
            m=m,
            tau=tau,
            loss=loss,
            bound=empirical_bound(loss, tau, m, k),
            true_mi=mi,
        )
