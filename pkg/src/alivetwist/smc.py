"""Particle filters built on accept/reject weights.

The central routine is :func:`sample_until_alive`: keep proposing particles
for the current step until exactly ``target`` of them have been accepted,
and record how many proposals that took.  The position of the final
acceptance is the step's stopping time T; by construction the last stored
particle is accepted, and only the first T - 1 particles (carrying target - 1
acceptances) feed resampling and the normalising-constant factor
(target - 1) / (T - 1).  The count of proposals per step is capped so a
too-tight tolerance fails loudly instead of looping forever.

Proposals are drawn in speculative batches for vectorisation.  The batch
schedule is a deterministic function of the run so far, and a batch is always
generated in full before truncating at the stopping position, so results are
bit-for-bit reproducible: the same seed gives the same trajectory regardless
of batching internals.

A standard multinomial bootstrap filter over an explicit observation density
is included as the baseline the accept/reject filters are compared against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
from scipy.special import logsumexp

from .rng import categorical_many

DEFAULT_TRIAL_CAP = 1_000_000

_MAX_BATCH = 1 << 18


class StoppingTimeCapError(RuntimeError):
    """Raised when a step exhausts its proposal budget before going alive."""

    def __init__(self, step: int, drawn: int, accepted: int, target: int, cap: int):
        self.step = step
        self.drawn = drawn
        self.accepted = accepted
        self.target = target
        self.cap = cap
        super().__init__(
            f"stopping-time cap exceeded at step {step}: "
            f"{accepted}/{target} acceptances after {drawn} of at most {cap} proposals"
        )


class ParticleDeathError(RuntimeError):
    """Raised when every bootstrap particle has zero observation weight."""

    def __init__(self, step: int):
        self.step = step
        super().__init__(f"particle death at step {step}: all weights vanished")


@dataclass(slots=True)
class ParticleGeneration:
    """One step's pool from an accept/reject filter.

    states/pseudo_obs/weights all have length ``stopping_time``; weights are
    binary with the final entry 1.  ancestors holds, for each stored particle,
    the index it was propagated from in the previous pool (None at the first
    step).  twisted_index marks the slot occupied by the guided particle when
    a twisted variant produced this generation, and the two log sums record
    that step's guidance diagnostics.
    """

    states: np.ndarray
    pseudo_obs: np.ndarray
    weights: np.ndarray
    stopping_time: int
    ancestors: Optional[np.ndarray] = None
    twisted_index: Optional[int] = None
    log_qh_sum: Optional[float] = None
    log_wh_sum: Optional[float] = None

    def validate(self, target: int, prev_stopping_time: Optional[int] = None) -> None:
        """Assert the structural invariants; used by tests and the selftest."""
        t = self.stopping_time
        assert t >= target, "stopping time cannot be below the acceptance target"
        assert len(self.states) == len(self.pseudo_obs) == len(self.weights) == t
        assert set(np.unique(self.weights)).issubset({0, 1}), "weights must be binary"
        assert int(self.weights.sum()) == target, "acceptances must hit the target exactly"
        assert int(self.weights[-1]) == 1, "the final stored particle must be accepted"
        if self.ancestors is not None and prev_stopping_time is not None:
            assert len(self.ancestors) == t
            assert self.ancestors.min() >= 0
            assert self.ancestors.max() <= prev_stopping_time - 2, (
                "ancestors must come from the previous pool's first T - 1 slots"
            )
        if self.twisted_index is not None:
            assert 0 <= self.twisted_index <= t - 2, "twisted slot must sit within the first T - 1"


@dataclass(slots=True)
class BootstrapGeneration:
    """One step's pool from a density-weighted filter."""

    states: np.ndarray
    log_weights: np.ndarray
    ancestors: Optional[np.ndarray] = None
    twisted_index: Optional[int] = None
    log_qh_sum: Optional[float] = None
    log_wh_sum: Optional[float] = None


@dataclass
class NormConstEstimate:
    """Per-step log factors of a normalising-constant estimate and their sum."""

    log_factors: List[float]
    log_total: float

    @classmethod
    def from_log_factors(cls, log_factors) -> "NormConstEstimate":
        log_factors = [float(f) for f in log_factors]
        return cls(log_factors, float(sum(log_factors)))


def multinomial_resample(stream: np.random.Generator, weights, count: int) -> np.ndarray:
    """``count`` ancestor indices drawn iid proportional to ``weights``."""
    return categorical_many(stream, weights, count)


def _batch_schedule(target: int, cap: int, batch_hint: Optional[int]):
    """Deterministic proposal batch sizes: start near the expected need, then double."""
    size = max(target, batch_hint) if batch_hint else max(2 * target, 64)
    while True:
        yield min(size, _MAX_BATCH)
        size = min(2 * size, _MAX_BATCH)


def sample_until_alive(propose: Callable[[np.random.Generator, int], dict],
                       kernel, observed, target: int, cap: int,
                       stream: np.random.Generator,
                       batch_hint: Optional[int] = None,
                       step: int = 0):
    """Propose until ``target`` particles are accepted; return (pool, T).

    ``propose(stream, count)`` returns a dict of equal-length arrays that must
    include 'pseudo_obs'; the returned pool contains the same keys truncated
    at the stopping position plus binary 'weights'.  Raises
    StoppingTimeCapError if ``cap`` proposals do not yield ``target``
    acceptances.
    """
    if target < 1:
        raise ValueError(f"acceptance target must be at least 1, got {target}")
    if cap < target:
        raise ValueError(f"cap {cap} cannot be below the acceptance target {target}")

    chunks: List[dict] = []
    drawn = 0
    accepted = 0
    schedule = _batch_schedule(target, cap, batch_hint)
    while True:
        size = min(next(schedule), cap - drawn)
        if size <= 0:
            raise StoppingTimeCapError(step, drawn, accepted, target, cap)
        batch = propose(stream, size)
        weights = kernel.weights(batch["pseudo_obs"], observed)
        cumulative = accepted + np.cumsum(weights)
        if int(cumulative[-1]) >= target:
            stop = int(np.searchsorted(cumulative, target, side="left")) + 1
            batch["weights"] = weights
            if not chunks:  # common case: the first batch already covers the target
                return {name: values[:stop] for name, values in batch.items()}, stop
            chunks.append(batch)
            pool = {
                name: np.concatenate([chunk[name] for chunk in chunks])[: drawn + stop]
                for name in chunks[0]
            }
            return pool, drawn + stop
        batch["weights"] = weights
        chunks.append(batch)
        drawn += size
        accepted = int(cumulative[-1])


def alive_filter(model, kernel, observations, n_particles: int,
                 cap: int = DEFAULT_TRIAL_CAP,
                 stream: Optional[np.random.Generator] = None):
    """Accept/reject filter that keeps proposing until each step is alive.

    Each step proposes (ancestor, transition, simulated observation) triples
    until n_particles of them are accepted by the kernel; ancestors are drawn
    uniformly from the previous step's accepted particles among its first
    T - 1 slots.  Returns (generations, estimate) where the estimate's step
    factor is (n_particles - 1) / (T_step - 1).
    """
    if stream is None:
        raise ValueError("an explicit random stream is required")
    if n_particles < 2:
        raise ValueError(f"need at least 2 particles, got {n_particles}")
    observations = np.asarray(observations)
    if observations.size == 0:
        raise ValueError("need at least one observation")

    generations: List[ParticleGeneration] = []
    log_factors: List[float] = []
    batch_hint = None
    prev: Optional[ParticleGeneration] = None

    for t, y in enumerate(observations):
        if prev is None:
            def propose(stream, count):
                k0 = model.init_state_sampler(stream, count)
                k = model.transition_sampler(k0, stream)
                return {"states": k, "pseudo_obs": model.observation_sampler(k, stream)}
        else:
            accepted_idx = prev.weights[: prev.stopping_time - 1].nonzero()[0]
            prev_states = prev.states

            def propose(stream, count):
                ancestors = accepted_idx[stream.integers(0, accepted_idx.size, size=count)]
                k = model.transition_sampler(prev_states[ancestors], stream)
                return {
                    "states": k,
                    "pseudo_obs": model.observation_sampler(k, stream),
                    "ancestors": ancestors,
                }

        pool, stopping_time = sample_until_alive(
            propose, kernel, y, n_particles, cap, stream,
            batch_hint=batch_hint, step=t,
        )
        generation = ParticleGeneration(
            states=pool["states"],
            pseudo_obs=pool["pseudo_obs"],
            weights=pool["weights"],
            stopping_time=stopping_time,
            ancestors=pool.get("ancestors"),
        )
        generations.append(generation)
        log_factors.append(math.log(n_particles - 1) - math.log(stopping_time - 1))
        batch_hint = min(math.ceil(1.3 * stopping_time), cap)
        prev = generation

    return generations, NormConstEstimate.from_log_factors(log_factors)


def bootstrap_filter(model, observations, n_particles: int,
                     stream: Optional[np.random.Generator] = None):
    """Multinomial bootstrap filter over an explicit observation density.

    Step factor is the mean observation likelihood of the current pool.
    Raises ParticleDeathError if every particle's weight underflows to zero.
    """
    if stream is None:
        raise ValueError("an explicit random stream is required")
    if n_particles < 1:
        raise ValueError(f"need at least 1 particle, got {n_particles}")
    if model.log_observation_density is None:
        raise ValueError("bootstrap filtering requires a model with an observation density")
    observations = np.asarray(observations, dtype=float)
    if observations.size == 0:
        raise ValueError("need at least one observation")

    generations: List[BootstrapGeneration] = []
    log_factors: List[float] = []
    prev: Optional[BootstrapGeneration] = None

    for t, y in enumerate(observations):
        if prev is None:
            ancestors = None
            k = model.transition_sampler(model.init_state_sampler(stream, n_particles), stream)
        else:
            probs = np.exp(prev.log_weights - prev.log_weights.max())
            ancestors = multinomial_resample(stream, probs, n_particles)
            k = model.transition_sampler(prev.states[ancestors], stream)
        log_weights = np.asarray(model.log_observation_density(y, k), dtype=float)
        total = float(logsumexp(log_weights))
        if not np.isfinite(total):
            raise ParticleDeathError(t)
        generation = BootstrapGeneration(states=k, log_weights=log_weights, ancestors=ancestors)
        generations.append(generation)
        log_factors.append(total - np.log(n_particles))
        prev = generation

    return generations, NormConstEstimate.from_log_factors(log_factors)
