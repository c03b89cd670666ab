"""Small ReLU MLP with hand-derived backprop and an EMA key encoder.

The forward map is ``x -> linear/relu stack -> final linear -> L2
normalize``; the backward pass routes gradients through the normalization
Jacobian (I - q q^T)/||z|| before the linear layers.  The momentum encoder
is a same-shape parameter set updated as beta*theta_k + (1-beta)*theta_q
and never receives loss gradients.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import SeededRng
from .validation import NumericError, as_float_matrix

CHECKPOINT_FORMAT = "eqco-mlp"
CHECKPOINT_VERSION = 1


@dataclass
class MlpParams:
    """Weights (out x in) and biases of each linear layer, in order."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix, at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {i} shapes are inconsistent: {w.shape} vs {b.shape}")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i} input dim does not chain from layer {i - 1}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} has non-finite parameters")

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "MlpParams":
        return MlpParams([np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases])


def init_mlp_params(rng: SeededRng, layer_dims: list[int]) -> MlpParams:
    """He-scaled Gaussian weights (std sqrt(2/fan_in)), zero biases."""
    if len(layer_dims) < 2 or any(d <= 0 for d in layer_dims):
        raise ValueError("layer_dims needs >= 2 positive entries")
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        std = math.sqrt(2.0 / fan_in)
        weights.append(rng.standard_normal((fan_out, fan_in)) * std)
        biases.append(np.zeros(fan_out, dtype=np.float64))
    return MlpParams(weights, biases)


@dataclass
class ForwardCache:
    """Activations retained by the forward pass for backprop."""

    layer_inputs: list[np.ndarray]  # input to each linear layer
    hidden_preacts: list[np.ndarray]  # pre-ReLU values of hidden layers
    final_norms: np.ndarray  # (n, 1) norms of the pre-normalization output
    embeddings: np.ndarray  # (n, d_out) unit rows


def encode_batch(params: MlpParams, x) -> tuple[np.ndarray, ForwardCache]:
    """Embed rows of ``x``; returns unit-norm embeddings and the cache."""
    h = as_float_matrix(x, "x")
    if h.shape[1] != params.weights[0].shape[1]:
        raise ValueError(f"input dim {h.shape[1]} does not match first layer {params.weights[0].shape[1]}")
    layer_inputs, hidden_preacts = [], []
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        layer_inputs.append(h)
        z = h @ w.T + b
        if i < n_layers - 1:
            hidden_preacts.append(z)
            h = np.maximum(z, 0.0)
        else:
            h = z
    norms = np.sqrt(np.sum(h * h, axis=1, keepdims=True))
    if np.any(norms == 0.0) or not np.all(np.isfinite(norms)):
        raise NumericError("MLP output cannot be normalized (zero or non-finite norm)")
    emb = h / norms
    return emb, ForwardCache(layer_inputs, hidden_preacts, norms, emb)


def encode(params: MlpParams, x) -> tuple[np.ndarray, ForwardCache]:
    """Single-vector convenience wrapper around encode_batch."""
    emb, cache = encode_batch(params, np.asarray(x, dtype=np.float64).reshape(1, -1))
    return emb[0], cache


def encode_backward_batch(
    params: MlpParams, cache: ForwardCache, d_embedding: np.ndarray
) -> tuple[MlpParams, np.ndarray]:
    """Backprop d(loss)/d(embedding rows) to parameter and input gradients."""
    d_emb = np.asarray(d_embedding, dtype=np.float64)
    if d_emb.shape != cache.embeddings.shape:
        raise ValueError("d_embedding shape does not match the cached forward pass")
    e = cache.embeddings
    dz = (d_emb - np.sum(d_emb * e, axis=1, keepdims=True) * e) / cache.final_norms
    grad_w = [np.empty(0)] * len(params.weights)
    grad_b = [np.empty(0)] * len(params.biases)
    for i in range(len(params.weights) - 1, -1, -1):
        grad_w[i] = dz.T @ cache.layer_inputs[i]
        grad_b[i] = np.sum(dz, axis=0)
        dz = dz @ params.weights[i]
        if i > 0:
            dz = dz * (cache.hidden_preacts[i - 1] > 0.0)
    return MlpParams(grad_w, grad_b), dz


def encode_backward(params: MlpParams, cache: ForwardCache, d_embedding) -> tuple[MlpParams, np.ndarray]:
    """Single-vector wrapper: gradients for one embedding's upstream grad."""
    grads, dx = encode_backward_batch(params, cache, np.asarray(d_embedding, dtype=np.float64).reshape(1, -1))
    return grads, dx[0]


@dataclass
class MomentumEncoder:
    """EMA copy of a query encoder; beta is the retention coefficient."""

    params: MlpParams
    beta: float

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")

    @classmethod
    def from_query(cls, params: MlpParams, beta: float) -> "MomentumEncoder":
        return cls(params=params.copy(), beta=beta)


def momentum_update(target: MomentumEncoder, source: MlpParams) -> MomentumEncoder:
    """In-place EMA step: every p_k becomes beta*p_k + (1-beta)*p_q."""
    if target.params.layer_dims != source.layer_dims:
        raise ValueError("momentum update requires identical layer shapes")
    b = target.beta
    for pk, pq in zip(target.params.weights, source.weights):
        pk *= b
        pk += (1.0 - b) * pq
    for pk, pq in zip(target.params.biases, source.biases):
        pk *= b
        pk += (1.0 - b) * pq
    return target


def save_checkpoint(path, params: MlpParams, meta: dict | None = None) -> None:
    """Write a versioned JSON checkpoint with row-major float64 parameters."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "layer_dims": params.layer_dims,
        "weights": [w.reshape(-1).tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")


def load_checkpoint(path) -> tuple[MlpParams, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"not a {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} checkpoint: {path}")
    dims = doc["layer_dims"]
    weights = [
        np.asarray(flat, dtype=np.float64).reshape(out, inp)
        for flat, inp, out in zip(doc["weights"], dims[:-1], dims[1:])
    ]
    biases = [np.asarray(b, dtype=np.float64) for b in doc["biases"]]
    return MlpParams(weights, biases), doc.get("meta", {})
