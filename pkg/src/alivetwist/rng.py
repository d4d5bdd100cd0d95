"""Deterministic random-number streams.

Every stochastic routine in this package draws from a stream derived from a
``SeedSpec``.  Streams are built on the counter-based Philox generator, so a
(master_seed, stream_id) pair always yields the same sequence regardless of
how many other streams exist or in which order they are consumed.  That is
what makes serial and worker-pool runs byte-identical: each unit of work owns
its own stream id and never shares generator state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MAX_UINT64 = 2**64 - 1


@dataclass(frozen=True)
class SeedSpec:
    """Addresses one reproducible random stream.

    master_seed: session-level seed shared by a whole run.
    stream_id: distinguishes independent streams within the run.
    """

    master_seed: int
    stream_id: int = 0

    def __post_init__(self) -> None:
        for field in ("master_seed", "stream_id"):
            value = getattr(self, field)
            if not isinstance(value, (int, np.integer)):
                raise TypeError(f"{field} must be an integer, got {value!r}")
            if not 0 <= value <= _MAX_UINT64:
                raise ValueError(f"{field} must be in [0, 2**64), got {value}")

    def child(self, offset: int) -> "SeedSpec":
        """A sibling stream with stream_id shifted by ``offset``."""
        return SeedSpec(self.master_seed, self.stream_id + offset)


def derive_stream(seed: SeedSpec) -> np.random.Generator:
    """Create the generator addressed by ``seed``.

    The 128-bit Philox key is (master_seed, stream_id), so distinct stream
    ids give statistically independent sequences by construction.
    """
    key = np.array([seed.master_seed, seed.stream_id], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def gaussian(stream: np.random.Generator, mean: float, variance: float, size=None):
    """Draw N(mean, variance) variates; variance 0 returns the mean exactly."""
    if variance < 0:
        raise ValueError(f"variance must be nonnegative, got {variance}")
    if variance == 0:
        if size is None:
            return float(mean)
        return np.full(size, float(mean))
    draw = mean + np.sqrt(variance) * stream.standard_normal(size)
    return float(draw) if size is None else draw


def uniform_index(stream: np.random.Generator, n: int) -> int:
    """Uniform draw from {0, ..., n-1}."""
    if n <= 0:
        raise ValueError(f"need a positive number of options, got {n}")
    return int(stream.integers(n))


def _check_weights(weights: np.ndarray) -> np.ndarray:
    weights = np.asarray(weights, dtype=float)
    if weights.ndim != 1 or weights.size == 0:
        raise ValueError("invalid categorical weights: need a nonempty 1-d array")
    if not np.all(np.isfinite(weights)) or np.any(weights < 0):
        raise ValueError("invalid categorical weights: entries must be finite and nonnegative")
    if weights.sum() <= 0:
        raise ValueError("invalid categorical weights: total mass is zero")
    return weights


def categorical(stream: np.random.Generator, weights) -> int:
    """Single index draw with probability proportional to ``weights``."""
    weights = _check_weights(weights)
    cdf = np.cumsum(weights)
    u = stream.random() * cdf[-1]
    return int(np.searchsorted(cdf, u, side="right"))


def categorical_many(stream: np.random.Generator, weights, size: int) -> np.ndarray:
    """Vector of ``size`` iid index draws proportional to ``weights``."""
    weights = _check_weights(weights)
    if size < 0:
        raise ValueError(f"size must be nonnegative, got {size}")
    cdf = np.cumsum(weights)
    u = stream.random(size) * cdf[-1]
    idx = np.searchsorted(cdf, u, side="right")
    return np.minimum(idx, weights.size - 1).astype(np.int64)
