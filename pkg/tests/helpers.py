"""Shared test utilities: deterministic streams, scripted fakes, and oracles."""

from __future__ import annotations

import math

import numpy as np
from scipy.special import ndtr

from alivetwist.rng import SeedSpec, derive_stream


def stream_for(master_seed: int, stream_id: int = 0) -> np.random.Generator:
    """A fresh deterministic generator for one test."""
    return derive_stream(SeedSpec(master_seed, stream_id))


class ScriptedStream:
    """Feeds pre-recorded draws to code expecting a numpy Generator.

    Each method pops from its own queue so a hand-traced run can pin every
    random choice it makes; queues the code under test never touches can be
    left empty.
    """

    def __init__(self, *, integers=(), normals=(), uniforms=(), exponentials=()):
        self._integers = list(integers)
        self._normals = list(normals)
        self._uniforms = list(uniforms)
        self._exponentials = list(exponentials)

    def integers(self, low, high=None, size=None):
        assert size is None, "hand traces only script scalar integer draws"
        return int(self._integers.pop(0))

    def standard_normal(self, size=None):
        if size is None:
            return float(self._normals.pop(0))
        shape = (size,) if np.isscalar(size) else tuple(size)
        count = int(np.prod(shape)) if shape else 1
        values = [self._normals.pop(0) for _ in range(count)]
        return np.reshape(np.asarray(values, dtype=float), shape)

    def random(self, size=None):
        if size is None:
            return float(self._uniforms.pop(0))
        values = [self._uniforms.pop(0) for _ in range(int(size))]
        return np.asarray(values, dtype=float)

    def exponential(self, scale=1.0, size=None):
        if size is None:
            return float(self._exponentials.pop(0))
        values = [self._exponentials.pop(0) for _ in range(int(size))]
        return np.asarray(values, dtype=float)

    def exhausted(self) -> bool:
        """True when every scripted queue has been fully consumed."""
        return not (self._integers or self._normals or self._uniforms or self._exponentials)


def monte_carlo_z(values: np.ndarray, target: float) -> float:
    """Standardised distance of a sample mean from its target."""
    values = np.asarray(values, dtype=float)
    se = values.std(ddof=1) / np.sqrt(values.size)
    return float(abs(values.mean() - target) / se)


def lg_abc_grid_log_marginal(params, observations, kernel, n_grid: int = 2001,
                             span: float = 8.0) -> float:
    """Absolute truth for the interval-acceptance marginal of the
    linear-Gaussian model, by deterministic grid integration.

    Forward recursion over a trapezoid grid of latent states: start from the
    density of the state one transition past the initial draw,
    N(0, (1 + phi^2) nu2); each step multiplies in the probability that a
    simulated observation from state x lands in the kernel's acceptance
    interval, P(x + noise in [lo, hi]) = ndtr((hi - x)/tau) - ndtr((lo - x)/tau),
    integrates that product for the step's factor, then pushes the normalised
    posterior through the transition density.  Shares no code with the
    filters under test.
    """
    phi, nu2, tau2 = params.phi, params.nu2, params.tau2
    observations = np.asarray(observations, dtype=float)
    v1 = (1.0 + phi * phi) * nu2
    var = v1
    max_sd = math.sqrt(v1)
    for _ in observations:
        var = phi * phi * var + nu2
        max_sd = max(max_sd, math.sqrt(var))
    limit = span * max_sd
    x = np.linspace(-limit, limit, n_grid)
    h = x[1] - x[0]
    trap = np.full(n_grid, h)
    trap[0] = trap[-1] = h / 2.0
    density = np.exp(-0.5 * x * x / v1) / math.sqrt(2.0 * math.pi * v1)
    tau = math.sqrt(tau2)
    diff = x[None, :] - phi * x[:, None]
    transition = np.exp(-0.5 * diff * diff / nu2) / math.sqrt(2.0 * math.pi * nu2)
    log_total = 0.0
    for y in observations:
        lo, hi = kernel.interval(float(y))
        mass = ndtr((hi - x) / tau) - ndtr((lo - x) / tau)
        joint = density * mass
        step = float(np.sum(trap * joint))
        if step <= 0.0:
            return float("-inf")
        log_total += math.log(step)
        density = (trap * joint / step) @ transition
    return log_total
