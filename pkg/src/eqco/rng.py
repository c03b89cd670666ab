"""Deterministic, seedable random number generation.

The generator is a counter-based SplitMix64: output ``i`` of a stream with
seed ``s`` is ``mix64(s + i * GOLDEN)``.  Everything downstream (uniforms,
Gaussians, permutations) is derived from that stream with fixed arithmetic,
so identical seeds give identical sample bytes on every platform.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX_A = np.uint64(0xBF58476D1CE4E5B9)
_MIX_B = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1

_TWO_NEG_53 = 2.0 ** -53


def _mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer on a uint64 array (wrapping arithmetic)."""
    z = (z ^ (z >> np.uint64(30))) * _MIX_A
    z = (z ^ (z >> np.uint64(27))) * _MIX_B
    return z ^ (z >> np.uint64(31))


def _mix64_int(z: int) -> int:
    return int(_mix64(np.array([z & _MASK64], dtype=np.uint64))[0])


class SeededRng:
    """Counter-based SplitMix64 stream with derived samplers.

    One instance is meant to be owned by a single logical thread.  Parallel
    or per-task work should use ``split(index)``, which derives a
    statistically independent child stream without advancing the parent.
    """

    def __init__(self, seed: int):
        self._seed = int(seed) & _MASK64
        self._counter = 0

    @property
    def seed(self) -> int:
        return self._seed

    def split(self, index: int) -> "SeededRng":
        """Derive an independent child generator for task ``index``.

        The child seed is ``mix64(mix64(seed) ^ (GOLDEN * (index + 1)))``,
        a pure function of (seed, index): it does not consume parent draws.
        """
        if index < 0:
            raise ValueError("split index must be >= 0")
        key = _mix64_int(self._seed) ^ ((int(_GOLDEN) * (index + 1)) & _MASK64)
        return SeededRng(_mix64_int(key))

    def _raw(self, n: int) -> np.ndarray:
        """Next ``n`` uint64 outputs of the stream."""
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        return _mix64(np.uint64(self._seed) + _GOLDEN * idx)

    def uniform(self, n: int) -> np.ndarray:
        """n i.i.d. uniforms on [0, 1) with 53-bit resolution."""
        if n <= 0:
            raise ValueError("sample count must be positive")
        return (self._raw(n) >> np.uint64(11)).astype(np.float64) * _TWO_NEG_53

    def standard_normal(self, shape) -> np.ndarray:
        """Standard normal draws via Box-Muller on the uniform stream."""
        if np.isscalar(shape):
            shape = (int(shape),)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if n <= 0:
            raise ValueError("sample count must be positive")
        pairs = (n + 1) // 2
        # u1 in (0, 1] so log(u1) is finite.
        u1 = ((self._raw(pairs) >> np.uint64(11)) + np.uint64(1)).astype(np.float64) * _TWO_NEG_53
        u2 = self.uniform(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * np.pi) * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n].reshape(shape)

    def integers(self, bound: int, n: int | None = None):
        """Uniform integers in [0, bound). Scalar when ``n`` is None."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        count = 1 if n is None else int(n)
        vals = np.floor(self.uniform(count) * bound).astype(np.int64)
        return int(vals[0]) if n is None else vals

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        if n < 0:
            raise ValueError("n must be >= 0")
        out = np.arange(n, dtype=np.int64)
        if n < 2:
            return out
        u = self.uniform(n - 1)
        for i in range(n - 1, 0, -1):
            j = int(u[n - 1 - i] * (i + 1))
            out[i], out[j] = out[j], out[i]
        return out

    def choice_no_replace(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), via partial Fisher-Yates."""
        if not 0 <= k <= n:
            raise ValueError("need 0 <= k <= n")
        arr = np.arange(n, dtype=np.int64)
        if k == 0:
            return arr[:0]
        u = self.uniform(k)
        for i in range(k):
            j = i + int(u[i] * (n - i))
            arr[i], arr[j] = arr[j], arr[i]
        return arr[:k].copy()


def sample_std_gaussian(rng: SeededRng, n: int) -> np.ndarray:
    """n standard normal draws; advances ``rng`` deterministically."""
    return rng.standard_normal(n)


def unit_sphere(rng: SeededRng, n: int, dim: int) -> np.ndarray:
    """n points uniform on the unit sphere in R^dim, as rows."""
    x = rng.standard_normal((n, dim))
    norms = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    # A zero row has probability 0; regenerate defensively if it occurs.
    while np.any(norms == 0.0):
        bad = norms[:, 0] == 0.0
        x[bad] = rng.standard_normal((int(bad.sum()), dim))
        norms = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    return x / norms
