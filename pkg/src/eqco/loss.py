"""Margin InfoNCE loss, analytic gradients, and gradient-norm bounds.

Two algebraically identical routes are kept deliberately distinct:

* the margin form, where the positive logit is ``(q.k0 - m)/tau`` and all
  negatives carry unit weight, and
* the weighted form, where the positive logit is unmargined and every
  negative logit carries an additive ``log(alpha/K)`` weight.

Setting ``m = tau*log(alpha/K)`` makes the two coincide; tests reconcile
them to 1e-12 relative.  Training uses the weighted route, which avoids a
per-step margin computation and keeps per-step numbers independent of K
when ``alpha`` is held fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import log1p_exp, log_sum_exp
from .rng import SeededRng
from .validation import NumericError, as_float_matrix, as_float_vector, check_unit_vector

MARGIN_MODE_FIXED = "fixed"
MARGIN_MODE_EQCO = "eqco"


def eqco_margin(tau: float, alpha: float, k: int) -> float:
    """Margin tau*log(alpha/K), the setting that cancels K from the bounds.

    Satisfies K*exp(m/tau) == alpha to floating-point accuracy.
    """
    if tau <= 0.0:
        raise ValueError("tau must be positive")
    if alpha <= 0.0:
        raise ValueError("alpha must be positive")
    if k < 1:
        raise ValueError("k must be >= 1")
    return tau * math.log(alpha / k)


@dataclass(frozen=True)
class LossConfig:
    """Temperature, margin rule, and negative count for one loss instance.

    ``margin_mode`` is "fixed" (use ``margin`` as-is) or "eqco" (derive the
    margin as tau*log(alpha/k)).
    """

    k: int
    tau: float = 0.2
    margin_mode: str = MARGIN_MODE_EQCO
    alpha: float = 256.0
    margin: float = 0.0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.tau <= 0.0:
            raise ValueError("tau must be positive")
        if self.margin_mode not in (MARGIN_MODE_FIXED, MARGIN_MODE_EQCO):
            raise ValueError(f"unknown margin_mode {self.margin_mode!r}")
        if self.margin_mode == MARGIN_MODE_EQCO and self.alpha <= 0.0:
            raise ValueError("alpha must be positive in eqco mode")
        if not math.isfinite(self.margin):
            raise ValueError("margin must be finite")

    @property
    def effective_margin(self) -> float:
        if self.margin_mode == MARGIN_MODE_FIXED:
            return self.margin
        return eqco_margin(self.tau, self.alpha, self.k)

    def mode_params(self) -> tuple[float, float]:
        """(margin/tau applied to the positive, log-weight on negatives).

        Fixed mode puts everything in the margin; eqco mode puts everything
        in the weight.  With m = 0 or alpha = K both entries are exactly 0.0,
        so the two modes produce bitwise identical numbers in that case.
        """
        if self.margin_mode == MARGIN_MODE_FIXED:
            return self.margin / self.tau, 0.0
        return 0.0, math.log(self.alpha / self.k)

    def log_normalizer(self) -> float:
        """log(1 + K*exp(m/tau)); equals log(1 + alpha) exactly in eqco mode."""
        m_over_tau, log_w = self.mode_params()
        return log1p_exp(math.log(self.k) + m_over_tau + log_w)


@dataclass(frozen=True)
class QueryInstance:
    """One query with its positive key and K negative keys (all unit-norm)."""

    q: np.ndarray
    k0: np.ndarray
    negs: np.ndarray  # shape (K, d)

    def __post_init__(self):
        q = as_float_vector(self.q, "q")
        k0 = as_float_vector(self.k0, "k0")
        negs = as_float_matrix(self.negs, "negs")
        if k0.shape != q.shape or negs.shape[1] != q.shape[0]:
            raise ValueError("q, k0 and negs must share one embedding dimension")
        check_unit_vector(q, "q")
        check_unit_vector(k0, "k0")
        norms = np.linalg.norm(negs, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("all negative keys must be unit-norm")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "k0", k0)
        object.__setattr__(self, "negs", negs)

    @property
    def k(self) -> int:
        return self.negs.shape[0]

    @property
    def dim(self) -> int:
        return self.q.shape[0]


@dataclass(frozen=True)
class LossGrad:
    """Loss value plus analytic gradients w.r.t. query and all keys."""

    value: float
    grad_q: np.ndarray
    grad_k0: np.ndarray
    grad_negs: np.ndarray


def _check_instance_config(inst: QueryInstance, cfg: LossConfig) -> None:
    if inst.k != cfg.k:
        raise ValueError(f"instance has {inst.k} negatives but config expects {cfg.k}")


def _logits(inst: QueryInstance, tau: float, pos_shift: float, neg_shift: float) -> tuple[float, np.ndarray]:
    pos = (float(inst.q @ inst.k0) / tau) - pos_shift
    negs = (inst.negs @ inst.q) / tau + neg_shift
    if not (math.isfinite(pos) and np.all(np.isfinite(negs))):
        raise NumericError("non-finite logits in InfoNCE loss")
    return pos, negs


def infonce_forward(inst: QueryInstance, cfg: LossConfig) -> float:
    """Margin-form loss: -log softmax of (q.k0 - m)/tau against q.ki/tau."""
    _check_instance_config(inst, cfg)
    m = cfg.effective_margin
    pos = (float(inst.q @ inst.k0) - m) / cfg.tau
    negs = (inst.negs @ inst.q) / cfg.tau
    if not (math.isfinite(pos) and np.all(np.isfinite(negs))):
        raise NumericError("non-finite logits in InfoNCE loss")
    return float(log_sum_exp(np.concatenate(([pos], negs))) - pos)


def infonce_forward_weighted(inst: QueryInstance, tau: float, alpha: float) -> float:
    """Weighted-form loss: -log s0/(s0 + (alpha/K) * sum(si))."""
    if tau <= 0.0 or alpha <= 0.0:
        raise ValueError("tau and alpha must be positive")
    log_w = math.log(alpha / inst.k)
    pos, negs = _logits(inst, tau, 0.0, log_w)
    return float(log_sum_exp(np.concatenate(([pos], negs))) - pos)


def _posterior(inst: QueryInstance, tau: float, pos_shift: float, neg_shift: float):
    """Softmax probabilities (p0, p_i) of the shifted logits."""
    pos, negs = _logits(inst, tau, pos_shift, neg_shift)
    all_logits = np.concatenate(([pos], negs))
    lse = log_sum_exp(all_logits)
    probs = np.exp(all_logits - lse)
    return float(lse - pos), float(probs[0]), probs[1:]


def infonce_grad(inst: QueryInstance, cfg: LossConfig) -> LossGrad:
    """Loss plus analytic d/dq, d/dk0 and d/dki.

    grad_q = -(1/tau)(1 - p0) k0 + (1/tau) sum_i p_i k_i with p the softmax
    posterior of the (margined or weighted) logits; the key gradients follow
    by symmetry of the bilinear logits.
    """
    _check_instance_config(inst, cfg)
    m_over_tau, log_w = cfg.mode_params()
    value, p0, p_neg = _posterior(inst, cfg.tau, m_over_tau, log_w)
    inv_tau = 1.0 / cfg.tau
    grad_q = inv_tau * (-(1.0 - p0) * inst.k0 + p_neg @ inst.negs)
    grad_k0 = -inv_tau * (1.0 - p0) * inst.q
    grad_negs = inv_tau * p_neg[:, None] * inst.q[None, :]
    return LossGrad(value=value, grad_q=grad_q, grad_k0=grad_k0, grad_negs=grad_negs)


def grad_norm_bound_pointwise(inst: QueryInstance, tau: float, alpha: float) -> float:
    """(2/tau)(1 - p0) with weighted-form p0; dominates ||grad_q|| per instance."""
    if tau <= 0.0 or alpha <= 0.0:
        raise ValueError("tau and alpha must be positive")
    log_w = math.log(alpha / inst.k)
    _, p0, _ = _posterior(inst, tau, 0.0, log_w)
    return (2.0 / tau) * (1.0 - p0)


@dataclass(frozen=True)
class GradNormBoundCheck:
    """Monte-Carlo gradient-norm mean versus the expectation-form bound.

    ``mean_key_exp`` is the estimate of E[exp(q.k/tau)] over the sampler,
    with its own standard error, so callers can propagate uncertainty of
    the bound value itself.
    """

    mc_mean_norm: float
    mc_std_error: float
    theorem_bound: float
    n_samples: int
    mean_key_exp: float
    mean_key_exp_se: float

    @property
    def holds(self) -> bool:
        return self.mc_mean_norm <= self.theorem_bound + 3.0 * self.mc_std_error


def grad_norm_bound_expectation(
    q,
    k0,
    key_sampler,
    tau: float,
    alpha: float,
    k: int,
    mc_samples: int,
    rng: SeededRng,
    chunk: int = 131072,
) -> GradNormBoundCheck:
    """Estimate E||dL/dq|| over fresh negative draws and the matching bound.

    ``key_sampler(rng, n)`` must return n unit keys as rows.  Each Monte
    Carlo sample draws K fresh negatives, evaluates the weighted-form
    gradient norm, and the bound (2/tau)(1 - s0/(s0 + alpha*E[s])) uses
    E[s] estimated from the same draws.
    """
    if mc_samples < 1000:
        raise ValueError("mc_samples must be >= 1000")
    if k < 1:
        raise ValueError("k must be >= 1")
    q = as_float_vector(q, "q")
    k0 = as_float_vector(k0, "k0")
    check_unit_vector(q, "q")
    check_unit_vector(k0, "k0")

    inv_tau = 1.0 / tau
    log_w = math.log(alpha / k)
    pos = float(q @ k0) * inv_tau

    norms = np.empty(mc_samples, dtype=np.float64)
    sum_exp = 0.0
    sum_exp_sq = 0.0
    n_exp = 0
    trials_per_chunk = max(1, chunk // k)
    done = 0
    while done < mc_samples:
        t = min(trials_per_chunk, mc_samples - done)
        keys = key_sampler(rng, t * k).reshape(t, k, -1)
        neg_logits = (keys @ q) * inv_tau  # (t, k)
        exps = np.exp(neg_logits)
        sum_exp += float(np.sum(exps))
        sum_exp_sq += float(np.sum(exps * exps))
        n_exp += t * k
        shifted = neg_logits + log_w
        m = np.maximum(np.max(shifted, axis=1), pos)
        exp_shifted = np.exp(shifted - m[:, None])
        denom = np.exp(pos - m) + np.sum(exp_shifted, axis=1)
        p0 = np.exp(pos - m) / denom
        p_neg = exp_shifted / denom[:, None]
        grads = inv_tau * (-(1.0 - p0)[:, None] * k0[None, :] + np.einsum("tk,tkd->td", p_neg, keys))
        norms[done : done + t] = np.linalg.norm(grads, axis=1)
        done += t

    mean_exp = sum_exp / n_exp
    var_exp = max(sum_exp_sq / n_exp - mean_exp * mean_exp, 0.0)
    s0 = math.exp(pos)
    bound = (2.0 / tau) * (1.0 - s0 / (s0 + alpha * mean_exp))
    mean_norm = float(np.mean(norms))
    std_error = float(np.std(norms, ddof=1) / math.sqrt(mc_samples)) if mc_samples > 1 else 0.0
    return GradNormBoundCheck(
        mc_mean_norm=mean_norm,
        mc_std_error=std_error,
        theorem_bound=bound,
        n_samples=mc_samples,
        mean_key_exp=mean_exp,
        mean_key_exp_se=math.sqrt(var_exp / n_exp),
    )


@dataclass
class BatchLossResult:
    """Per-query losses, query gradients, and logging statistics for a batch."""

    per_query_loss: np.ndarray  # (N,)
    grad_q: np.ndarray  # (N, d), gradient of each per-query loss w.r.t. its q
    grad_norms: np.ndarray  # (N,)
    p0: np.ndarray  # (N,)
    theorem_bound: np.ndarray  # (N,) expectation-form bound with batch E[s]
    loss: float = field(init=False)

    def __post_init__(self):
        self.loss = float(np.mean(self.per_query_loss))


def batch_infonce(
    queries: np.ndarray,
    positives: np.ndarray,
    pool: np.ndarray,
    neg_idx: np.ndarray | None,
    cfg: LossConfig,
) -> BatchLossResult:
    """Weighted-route loss over a batch of queries.

    ``pool`` holds candidate negative keys as rows.  With ``neg_idx`` None
    every query uses the whole pool (which must then have exactly cfg.k
    rows); otherwise ``neg_idx[j]`` selects cfg.k distinct pool rows for
    query j.
    """
    n, d = queries.shape
    m_over_tau, log_w = cfg.mode_params()
    inv_tau = 1.0 / cfg.tau

    pos = np.sum(queries * positives, axis=1) * inv_tau - m_over_tau  # (N,)
    logits_pool = (queries @ pool.T) * inv_tau  # (N, M)
    if neg_idx is None:
        if pool.shape[0] != cfg.k:
            raise ValueError("shared pool must have exactly cfg.k rows")
        neg_logits = logits_pool
    else:
        if neg_idx.shape != (n, cfg.k):
            raise ValueError("neg_idx must have shape (n_queries, k)")
        neg_logits = np.take_along_axis(logits_pool, neg_idx, axis=1)
    shifted = neg_logits + log_w

    m = np.maximum(np.max(shifted, axis=1), pos)
    exp_pos = np.exp(pos - m)
    exp_neg = np.exp(shifted - m[:, None])
    denom = exp_pos + np.sum(exp_neg, axis=1)
    per_query_loss = np.log(denom) + m - pos
    if not np.all(np.isfinite(per_query_loss)):
        raise NumericError("non-finite loss in batch")

    p0 = exp_pos / denom
    p_neg = exp_neg / denom[:, None]
    if neg_idx is None:
        neg_term = p_neg @ pool
    else:
        scatter = np.zeros_like(logits_pool)
        np.put_along_axis(scatter, neg_idx, p_neg, axis=1)
        neg_term = scatter @ pool
    grad_q = inv_tau * (-(1.0 - p0)[:, None] * positives + neg_term)
    grad_norms = np.linalg.norm(grad_q, axis=1)

    # Expectation-form bound with W = K exp(m/tau) (= alpha in eqco mode) and
    # E[s] taken over each query's own negatives:
    #   (2/tau) * (1 - sigmoid(q.k0/tau - log W - log E[s])).
    log_mean_exp = log_sum_exp(neg_logits, axis=1) - math.log(cfg.k)
    log_big_w = math.log(cfg.k) + m_over_tau + log_w
    z = np.sum(queries * positives, axis=1) * inv_tau - log_big_w - log_mean_exp
    theorem_bound = (2.0 / cfg.tau) * (1.0 - 1.0 / (1.0 + np.exp(-z)))

    return BatchLossResult(
        per_query_loss=per_query_loss,
        grad_q=grad_q,
        grad_norms=grad_norms,
        p0=p0,
        theorem_bound=theorem_bound,
    )
