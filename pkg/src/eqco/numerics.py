"""Stable scalar reductions shared by the loss and bound code."""

from __future__ import annotations

import numpy as np

from .validation import as_float_vector


def log_sum_exp(values, axis=None):
    """log(sum(exp(values))) with max-subtraction.

    Safe for inputs of magnitude ~1e3 and beyond; the only requirement is
    that the values themselves are finite.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("log_sum_exp of empty input")
    if not np.all(np.isfinite(v)):
        raise ValueError("log_sum_exp requires finite inputs")
    m = np.max(v, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True)) + m
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def log1p_exp(z):
    """log(1 + exp(z)), elementwise, without overflow for large z."""
    z = np.asarray(z, dtype=np.float64)
    out = np.where(z > 0.0, z + np.log1p(np.exp(-np.abs(z))), np.log1p(np.exp(np.minimum(z, 0.0))))
    return float(out) if out.ndim == 0 else out


def l2_normalize(v) -> np.ndarray:
    """v / ||v||. Raises on a zero (or non-finite) vector."""
    v = as_float_vector(v, "v")
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise ValueError("cannot normalize the zero vector")
    return v / norm


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise L2 normalization of a 2-D array."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    if np.any(norms == 0.0) or not np.all(np.isfinite(norms)):
        raise ValueError("cannot normalize zero or non-finite rows")
    return x / norms
