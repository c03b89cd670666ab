"""Batched contrastive training on augmented vector views.

One logical thread owns the query parameters, optimizer state, momentum
encoder, and memory bank.  Per step: sample a batch, make two noisy views,
embed view A with the query encoder and view B with the momentum encoder,
source K negatives per the configured strategy, take an SGD-with-momentum
step on the query encoder only, then EMA-update the key encoder.  Key
gradients are never applied.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import make_views
from .encoder import (
    MlpParams,
    MomentumEncoder,
    encode_batch,
    encode_backward_batch,
    init_mlp_params,
    momentum_update,
)
from .loss import LossConfig, batch_infonce
from .rng import SeededRng
from .validation import ConfigError, NumericError, as_float_matrix

NEG_SOURCE_BANK = "bank"
NEG_SOURCE_BATCH = "batch"
NEG_SOURCE_SUBSAMPLE = "subsample"
_NEG_SOURCES = (NEG_SOURCE_BANK, NEG_SOURCE_BATCH, NEG_SOURCE_SUBSAMPLE)


class MemoryBank:
    """Fixed-capacity FIFO queue of key embeddings (oldest evicted first)."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1 or dim < 1:
            raise ValueError("capacity and dim must be positive")
        self.capacity = capacity
        self._buf = np.zeros((capacity, dim), dtype=np.float64)
        self._size = 0
        self._ptr = 0

    def __len__(self) -> int:
        return self._size

    def enqueue(self, keys: np.ndarray) -> None:
        keys = as_float_matrix(keys, "keys")
        if keys.shape[1] != self._buf.shape[1]:
            raise ValueError("key dimension does not match the bank")
        m = keys.shape[0]
        if m >= self.capacity:
            self._buf[:] = keys[m - self.capacity :]
            self._ptr = 0
            self._size = self.capacity
            return
        first = min(m, self.capacity - self._ptr)
        self._buf[self._ptr : self._ptr + first] = keys[:first]
        if first < m:
            self._buf[: m - first] = keys[first:]
        self._ptr = (self._ptr + m) % self.capacity
        self._size = min(self._size + m, self.capacity)

    def as_array(self) -> np.ndarray:
        """Contents in insertion order, oldest first."""
        if self._size < self.capacity:
            return self._buf[: self._size].copy()
        return np.concatenate((self._buf[self._ptr :], self._buf[: self._ptr]), axis=0)


def negatives_from_bank(bank: MemoryBank, k: int, rng: SeededRng) -> np.ndarray:
    """K negative keys from the bank, shared by every query of the step.

    Returns the whole bank (insertion order) when it holds exactly k keys;
    samples k distinct keys without replacement when it holds more; raises
    when it holds fewer (callers skip the step during bootstrap).
    """
    size = len(bank)
    if size < k:
        raise ConfigError(f"memory bank holds {size} keys, need {k}")
    arr = bank.as_array()
    if size == k:
        return arr
    return arr[rng.choice_no_replace(size, k)]


def negatives_in_batch(batch_keys: np.ndarray, query_index: int, k: int, rng: SeededRng) -> np.ndarray:
    """K keys from the batch excluding the query's own key.

    With k == N-1 this is all other keys in index order (no randomness);
    otherwise a uniform draw without replacement among the other keys.
    """
    keys = as_float_matrix(batch_keys, "batch_keys")
    n = keys.shape[0]
    if not 0 <= query_index < n:
        raise ValueError("query_index out of range")
    if k > n - 1:
        raise ConfigError(f"k={k} exceeds the {n - 1} other keys in the batch")
    others = np.concatenate((np.arange(query_index), np.arange(query_index + 1, n)))
    if k == n - 1:
        return keys[others]
    return keys[others[rng.choice_no_replace(n - 1, k)]]


def _inbatch_shared_indices(n: int, k: int, rng: SeededRng) -> np.ndarray:
    """Index matrix for 'batch' mode: one shared candidate pool per step.

    All queries read the first k entries of a single permutation, each
    skipping itself, so the pool of distinct negatives per step has size
    k or k+1.
    """
    if k == n - 1:
        base = np.arange(n, dtype=np.int64)
        return np.stack([np.concatenate((base[:j], base[j + 1 :])) for j in range(n)])
    prefix = rng.permutation(n)[: k + 1]
    rows = np.empty((n, k), dtype=np.int64)
    head = prefix[:k]
    for j in range(n):
        rows[j] = head if j not in head else prefix[prefix != j][:k]
    return rows


def _subsample_indices(n: int, k: int, rng: SeededRng) -> np.ndarray:
    """Index matrix for 'subsample' mode: independent draw per query.

    Each row ranks the other n-1 keys by an independent uniform draw and
    keeps the k smallest, a without-replacement sample that vectorizes.
    """
    u = rng.uniform(n * (n - 1)).reshape(n, n - 1)
    pick = np.argpartition(u, k - 1, axis=1)[:, :k]
    return (pick + (pick >= np.arange(n)[:, None])).astype(np.int64)


def scaled_lr(base_lr: float, n: int, n_ref: int) -> float:
    """Linear scaling rule over the number of queries per batch."""
    if n < 1 or n_ref < 1:
        raise ValueError("n and n_ref must be >= 1")
    return base_lr * (n / n_ref)


def lr_at_step(step: int, total_steps: int, warmup_frac: float, peak_lr: float) -> float:
    """Linear warm-up from 0 to peak, then cosine decay.

    lr(0) = 0; lr(warmup_end) = peak; the final step evaluates the cosine
    at (total-1-w)/(total-w), so it is small but nonzero.
    """
    if not 0 <= step < total_steps:
        raise ValueError("need 0 <= step < total_steps")
    warmup_steps = int(round(warmup_frac * total_steps))
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return peak_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run needs besides the data itself."""

    loss: LossConfig
    n_queries: int = 256
    neg_source: str = NEG_SOURCE_BANK
    base_lr: float = 0.03
    n_ref: int = 256
    epochs: int = 10
    warmup_frac: float = 0.1
    sgd_momentum: float = 0.9
    beta: float = 0.999
    seed: int = 0
    hidden_dims: tuple[int, ...] = (64, 64)
    embed_dim: int = 32
    bank_capacity: int | None = None

    def __post_init__(self):
        if self.neg_source not in _NEG_SOURCES:
            raise ConfigError(f"neg_source must be one of {_NEG_SOURCES}")
        if self.n_queries < 2:
            raise ConfigError("n_queries must be >= 2")
        if self.neg_source in (NEG_SOURCE_BATCH, NEG_SOURCE_SUBSAMPLE) and self.loss.k > self.n_queries - 1:
            raise ConfigError(f"in-batch negatives need k <= n_queries - 1, got k={self.loss.k}")
        if self.bank_capacity is not None and self.bank_capacity < self.loss.k:
            raise ConfigError("bank_capacity must be >= k")
        if self.base_lr <= 0.0 or self.epochs < 1 or self.n_ref < 1:
            raise ConfigError("base_lr, epochs and n_ref must be positive")
        if not 0.0 <= self.warmup_frac <= 1.0:
            raise ConfigError("warmup_frac must lie in [0, 1]")
        if not 0.0 <= self.sgd_momentum < 1.0 or not 0.0 <= self.beta <= 1.0:
            raise ConfigError("sgd_momentum must lie in [0, 1) and beta in [0, 1]")
        if self.embed_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ConfigError("hidden_dims and embed_dim must be positive")

    @property
    def k(self) -> int:
        return self.loss.k

    def resolved_bank_capacity(self) -> int:
        return self.bank_capacity if self.bank_capacity is not None else self.loss.k

    def to_dict(self) -> dict:
        return {
            "loss": {
                "k": self.loss.k,
                "tau": self.loss.tau,
                "margin_mode": self.loss.margin_mode,
                "alpha": self.loss.alpha,
                "margin": self.loss.margin,
            },
            "n_queries": self.n_queries,
            "neg_source": self.neg_source,
            "base_lr": self.base_lr,
            "n_ref": self.n_ref,
            "epochs": self.epochs,
            "warmup_frac": self.warmup_frac,
            "sgd_momentum": self.sgd_momentum,
            "beta": self.beta,
            "seed": self.seed,
            "hidden_dims": list(self.hidden_dims),
            "embed_dim": self.embed_dim,
            "bank_capacity": self.bank_capacity,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        loss_doc = dict(doc.pop("loss", {}))
        known_loss = {"k", "tau", "margin_mode", "alpha", "margin"}
        extra = set(loss_doc) - known_loss
        if extra:
            raise ConfigError(f"unknown loss config keys: {sorted(extra)}")
        try:
            loss = LossConfig(**loss_doc)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad loss config: {exc}") from exc
        if "hidden_dims" in doc:
            doc["hidden_dims"] = tuple(doc["hidden_dims"])
        try:
            return cls(loss=loss, **doc)
        except TypeError as exc:
            raise ConfigError(f"bad train config: {exc}") from exc


def simo_train_config(
    n_queries: int = 256, alpha: float = 256.0, tau: float = 0.2, **overrides
) -> TrainConfig:
    """The no-bank preset: momentum keys, full in-batch negatives, warm-up."""
    loss = LossConfig(k=n_queries - 1, tau=tau, margin_mode="eqco", alpha=alpha)
    cfg = TrainConfig(loss=loss, n_queries=n_queries, neg_source=NEG_SOURCE_BATCH)
    return replace(cfg, **overrides) if overrides else cfg


@dataclass(frozen=True)
class StepRecord:
    """Per-step log entry of an executed (non-skipped) training step."""

    step: int
    epoch: int
    lr: float
    loss: float
    f_hat_bound: float
    grad_norm_mean: float
    grad_norm_var: float
    theorem2_bound: float


@dataclass
class TrainResult:
    encoder: MlpParams
    momentum: MomentumEncoder
    log: list[StepRecord]
    skipped_steps: int
    steps_per_epoch: int
    total_steps: int

    def epoch_mean(self, attr: str, epoch: int) -> float:
        vals = [getattr(r, attr) for r in self.log if r.epoch == epoch]
        if not vals:
            raise ValueError(f"no executed steps in epoch {epoch}")
        return float(np.mean(vals))

    def final_epoch_mean(self, attr: str) -> float:
        return self.epoch_mean(attr, self.log[-1].epoch)


class SgdMomentum:
    """Plain SGD with heavy-ball momentum: v <- mu*v + g; p <- p - lr*v."""

    def __init__(self, params: MlpParams, momentum: float):
        self.momentum = momentum
        self.velocity = params.zeros_like()

    def step(self, params: MlpParams, grads: MlpParams, lr: float) -> None:
        for p, g, v in zip(
            params.weights + params.biases,
            grads.weights + grads.biases,
            self.velocity.weights + self.velocity.biases,
        ):
            v *= self.momentum
            v += g
            p -= lr * v


def train(config: TrainConfig, dataset, step_hook=None) -> TrainResult:
    """Run the contrastive training loop on ``dataset.latents``.

    ``dataset`` needs ``latents`` (n, latent_dim) and ``aug_noise_std``.
    ``step_hook(record, params, momentum)``, when given, runs after every
    executed step.  Raises NumericError (with the partial ``log`` attached)
    if the loss stops being finite.
    """
    latents = as_float_matrix(dataset.latents, "dataset.latents")
    n, latent_dim = latents.shape
    if n < config.n_queries:
        raise ConfigError(f"dataset has {n} instances, need at least n_queries={config.n_queries}")

    rng = SeededRng(config.seed)
    params = init_mlp_params(rng, [latent_dim, *config.hidden_dims, config.embed_dim])
    momentum = MomentumEncoder.from_query(params, config.beta)
    optimizer = SgdMomentum(params, config.sgd_momentum)
    bank = (
        MemoryBank(config.resolved_bank_capacity(), config.embed_dim)
        if config.neg_source == NEG_SOURCE_BANK
        else None
    )

    steps_per_epoch = n // config.n_queries
    total_steps = config.epochs * steps_per_epoch
    peak_lr = scaled_lr(config.base_lr, config.n_queries, config.n_ref)
    log_normalizer = config.loss.log_normalizer()

    log: list[StepRecord] = []
    skipped = 0
    step = 0
    try:
        for epoch in range(config.epochs):
            order = rng.permutation(n)
            for b in range(steps_per_epoch):
                batch = order[b * config.n_queries : (b + 1) * config.n_queries]
                lr = lr_at_step(step, total_steps, config.warmup_frac, peak_lr)
                view_a, view_b = make_views(latents[batch], dataset.aug_noise_std, rng)
                queries, cache = encode_batch(params, view_a)
                keys, _ = encode_batch(momentum.params, view_b)

                if bank is not None:
                    if len(bank) < config.k:
                        bank.enqueue(keys)
                        skipped += 1
                        step += 1
                        continue
                    pool, neg_idx = negatives_from_bank(bank, config.k, rng), None
                elif config.neg_source == NEG_SOURCE_BATCH:
                    pool, neg_idx = keys, _inbatch_shared_indices(config.n_queries, config.k, rng)
                else:
                    pool, neg_idx = keys, _subsample_indices(config.n_queries, config.k, rng)

                result = batch_infonce(queries, keys, pool, neg_idx, config.loss)
                grads, _ = encode_backward_batch(params, cache, result.grad_q / config.n_queries)
                optimizer.step(params, grads, lr)
                momentum_update(momentum, params)
                if bank is not None:
                    bank.enqueue(keys)

                record = StepRecord(
                    step=step,
                    epoch=epoch,
                    lr=lr,
                    loss=result.loss,
                    f_hat_bound=log_normalizer - result.loss,
                    grad_norm_mean=float(np.mean(result.grad_norms)),
                    grad_norm_var=float(np.var(result.grad_norms)),
                    theorem2_bound=float(np.mean(result.theorem_bound)),
                )
                log.append(record)
                if step_hook is not None:
                    step_hook(record, params, momentum)
                step += 1
    except NumericError as exc:
        exc.log = log
        exc.last_step = step
        raise

    if not log:
        raise ConfigError("no executed steps: the bank never reached k keys")
    return TrainResult(
        encoder=params,
        momentum=momentum,
        log=log,
        skipped_steps=skipped,
        steps_per_epoch=steps_per_epoch,
        total_steps=total_steps,
    )


def fit_linear_classifier(
    x: np.ndarray, y_idx: np.ndarray, n_classes: int, n_iters: int = 500, lr: float = 0.1
) -> tuple[np.ndarray, np.ndarray]:
    """Full-batch GD on multinomial softmax cross-entropy; no regularizer."""
    n, d = x.shape
    w = np.zeros((n_classes, d), dtype=np.float64)
    b = np.zeros(n_classes, dtype=np.float64)
    onehot = np.zeros((n, n_classes), dtype=np.float64)
    onehot[np.arange(n), y_idx] = 1.0
    for _ in range(n_iters):
        logits = x @ w.T + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        delta = (p - onehot) / n
        w -= lr * (delta.T @ x)
        b -= lr * delta.sum(axis=0)
    return w, b


def linear_probe(embeddings, labels, train_frac: float, rng: SeededRng) -> float:
    """Held-out accuracy of a linear classifier on frozen embeddings.

    Fixed protocol: shuffled train_frac split, 500 full-batch GD steps at
    lr 0.1, argmax prediction with ties resolved toward the lowest class
    index.
    """
    x = as_float_matrix(embeddings, "embeddings")
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (x.shape[0],):
        raise ValueError("labels must be one id per embedding row")
    if not 0.0 < train_frac < 1.0:
        raise ValueError("train_frac must lie strictly between 0 and 1")
    classes, y_idx = np.unique(y, return_inverse=True)
    perm = rng.permutation(x.shape[0])
    n_train = int(train_frac * x.shape[0])
    if n_train < 1 or n_train >= x.shape[0]:
        raise ValueError("split leaves an empty train or test set")
    train_sel, test_sel = perm[:n_train], perm[n_train:]
    if np.unique(y_idx[train_sel]).size < 2:
        raise ValueError("train split must contain at least 2 classes")
    w, b = fit_linear_classifier(x[train_sel], y_idx[train_sel], classes.size)
    pred = np.argmax(x[test_sel] @ w.T + b, axis=1)
    return float(np.mean(pred == y_idx[test_sel]))
