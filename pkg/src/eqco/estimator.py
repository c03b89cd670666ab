"""Estimator-style wrappers so the trainer composes with sklearn tooling.

Both classes follow the scikit-learn contract (all hyperparameters as
plain ``__init__`` attributes, ``get_params``/``set_params``, fitted state
in trailing-underscore attributes) without importing scikit-learn, so
``sklearn.base.clone`` and ``Pipeline`` accept them when available.
"""

from __future__ import annotations

import inspect

import numpy as np

from .data import AugmentedVectors
from .encoder import encode_batch
from .loss import LossConfig
from .rng import SeededRng
from .training import TrainConfig, fit_linear_classifier, train
from .validation import as_float_matrix, check_fitted


class ParamsMixin:
    """scikit-learn style get_params/set_params via __init__ introspection."""

    @classmethod
    def _param_names(cls) -> list[str]:
        sig = inspect.signature(cls.__init__)
        return [name for name in sig.parameters if name != "self"]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for key, value in params.items():
            if key not in valid:
                raise ValueError(f"invalid parameter {key!r} for {type(self).__name__}")
            setattr(self, key, value)
        return self

    def __sklearn_tags__(self):
        # Only ever invoked by scikit-learn itself, so the import is safe.
        from sklearn.base import BaseEstimator

        return BaseEstimator.__sklearn_tags__(self)


class ContrastiveEncoder(ParamsMixin):
    """Self-supervised embedding transformer: fit on raw vectors, transform
    to unit-norm embeddings.

    ``k=None`` uses all other in-batch keys (n_queries - 1) for the batch
    and subsample sources, and n_queries for the bank source.
    """

    def __init__(
        self,
        n_queries: int = 256,
        k: int | None = None,
        tau: float = 0.2,
        margin_mode: str = "eqco",
        alpha: float = 256.0,
        margin: float = 0.0,
        neg_source: str = "batch",
        epochs: int = 10,
        base_lr: float = 0.03,
        n_ref: int = 256,
        warmup_frac: float = 0.1,
        sgd_momentum: float = 0.9,
        beta: float = 0.999,
        hidden_dims: tuple[int, ...] = (64, 64),
        embed_dim: int = 32,
        aug_noise_std: float = 0.3,
        seed: int = 0,
    ):
        self.n_queries = n_queries
        self.k = k
        self.tau = tau
        self.margin_mode = margin_mode
        self.alpha = alpha
        self.margin = margin
        self.neg_source = neg_source
        self.epochs = epochs
        self.base_lr = base_lr
        self.n_ref = n_ref
        self.warmup_frac = warmup_frac
        self.sgd_momentum = sgd_momentum
        self.beta = beta
        self.hidden_dims = hidden_dims
        self.embed_dim = embed_dim
        self.aug_noise_std = aug_noise_std
        self.seed = seed

    def _build_config(self) -> TrainConfig:
        if self.k is not None:
            k = self.k
        elif self.neg_source == "bank":
            k = self.n_queries
        else:
            k = self.n_queries - 1
        loss = LossConfig(
            k=k, tau=self.tau, margin_mode=self.margin_mode, alpha=self.alpha, margin=self.margin
        )
        return TrainConfig(
            loss=loss,
            n_queries=self.n_queries,
            neg_source=self.neg_source,
            base_lr=self.base_lr,
            n_ref=self.n_ref,
            epochs=self.epochs,
            warmup_frac=self.warmup_frac,
            sgd_momentum=self.sgd_momentum,
            beta=self.beta,
            seed=self.seed,
            hidden_dims=tuple(self.hidden_dims),
            embed_dim=self.embed_dim,
        )

    def fit(self, X, y=None):
        X = as_float_matrix(X, "X")
        config = self._build_config()
        result = train(config, AugmentedVectors(latents=X, aug_noise_std=self.aug_noise_std))
        self.n_features_in_ = X.shape[1]
        self.train_config_ = config
        self.encoder_ = result.encoder
        self.momentum_ = result.momentum
        self.log_ = result.log
        return self

    def transform(self, X) -> np.ndarray:
        check_fitted(self, "encoder_")
        X = as_float_matrix(X, "X")
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return encode_batch(self.encoder_, X)[0]

    def fit_transform(self, X, y=None) -> np.ndarray:
        return self.fit(X, y).transform(X)


class LinearProbe(ParamsMixin):
    """Multinomial linear classifier on frozen embeddings (fixed GD recipe)."""

    def __init__(self, n_iters: int = 500, lr: float = 0.1):
        self.n_iters = n_iters
        self.lr = lr

    def fit(self, X, y):
        X = as_float_matrix(X, "X")
        y = np.asarray(y, dtype=np.int64)
        if y.shape != (X.shape[0],):
            raise ValueError("y must hold one label per row of X")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need at least 2 classes to fit the probe")
        self.coef_, self.intercept_ = fit_linear_classifier(
            X, y_idx, self.classes_.size, n_iters=self.n_iters, lr=self.lr
        )
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X) -> np.ndarray:
        check_fitted(self, "coef_")
        X = as_float_matrix(X, "X")
        return X @ self.coef_.T + self.intercept_

    def predict(self, X) -> np.ndarray:
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def score(self, X, y) -> float:
        y = np.asarray(y, dtype=np.int64)
        return float(np.mean(self.predict(X) == y))
