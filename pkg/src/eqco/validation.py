"""Input validation helpers used across the public API."""

from __future__ import annotations

import numpy as np


class ConfigError(ValueError):
    """A configuration value is out of its documented domain."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values it cannot recover from."""


def as_float_vector(x, name: str = "x") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite entries")
    return v


def as_float_matrix(x, name: str = "X") -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2 or m.shape[0] == 0 or m.shape[1] == 0:
        raise ValueError(f"{name} must be a non-empty 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def check_unit_vector(v: np.ndarray, name: str, tol: float = 1e-9) -> None:
    norm = float(np.linalg.norm(v))
    if abs(norm - 1.0) > tol:
        raise ValueError(f"{name} must be unit-norm (|norm - 1| = {abs(norm - 1.0):.3g} > {tol:g})")


def check_fitted(estimator, attribute: str) -> None:
    if not hasattr(estimator, attribute):
        raise RuntimeError(
            f"{type(estimator).__name__} is not fitted yet; call fit() before using this method"
        )
