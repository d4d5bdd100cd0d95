"""State-space models and exact reference calculations.

A model is a bundle of vectorised sampling closures (``HmmModel``) so the
filters never need to know which concrete family they are running on.  Two
families ship here:

* a linear-Gaussian autoregression with additive Gaussian noise, whose
  marginal likelihood is available exactly via a Kalman recursion, and
* a log-volatility autoregression whose observations are scaled heavy-tailed
  stable draws, for which no observation density is available at all.

A small finite-state family plus a brute-force-checkable forward recursion
(:func:`discrete_abc_log_marginal`) serves as the exact oracle for the
accept/reject filters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np

from .rng import categorical_many

_LOG_TWO_PI = float(np.log(2.0 * np.pi))


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearGaussianParams:
    """AR(1) latent chain with Gaussian observation noise.

    Latent: K_0 ~ N(0, nu2), K_t = phi * K_{t-1} + N(0, nu2).
    Observed: Y_t = K_t + N(0, tau2).
    """

    phi: float
    nu2: float
    tau2: float

    def __post_init__(self) -> None:
        if self.nu2 <= 0:
            raise ValueError(f"nu2 must be positive, got {self.nu2}")
        if self.tau2 <= 0:
            raise ValueError(f"tau2 must be positive, got {self.tau2}")


@dataclass(frozen=True)
class StochasticVolatilityParams:
    """Log-volatility AR(1) with scaled stable observation noise.

    Latent: K_0 ~ N(0, nu2), K_t = F * K_{t-1} + N(0, nu2).
    Observed: Y_t = exp(K_t / 2) * S_t with S_t stable(alpha, beta, gamma, delta).
    """

    F: float
    nu2: float
    alpha: float
    beta: float
    gamma: float
    delta: float = 0.0

    def __post_init__(self) -> None:
        if self.nu2 <= 0:
            raise ValueError(f"nu2 must be positive, got {self.nu2}")
        if not 0 < self.alpha <= 2:
            raise ValueError(f"alpha must be in (0, 2], got {self.alpha}")
        if not -1 <= self.beta <= 1:
            raise ValueError(f"beta must be in [-1, 1], got {self.beta}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")


@dataclass(frozen=True)
class DiscreteHmmParams:
    """Finite-state chain with finite observation alphabet.

    acceptance[y, u] says whether simulated symbol u is accepted when the
    recorded observation is y (the finite-alphabet analogue of a tolerance
    ball around y).
    """

    initial: np.ndarray
    transition: np.ndarray
    emission: np.ndarray
    acceptance: np.ndarray

    def __post_init__(self) -> None:
        initial = np.asarray(self.initial, dtype=float)
        transition = np.asarray(self.transition, dtype=float)
        emission = np.asarray(self.emission, dtype=float)
        acceptance = np.asarray(self.acceptance, dtype=bool)
        object.__setattr__(self, "initial", initial)
        object.__setattr__(self, "transition", transition)
        object.__setattr__(self, "emission", emission)
        object.__setattr__(self, "acceptance", acceptance)
        n_states = initial.shape[0]
        if initial.ndim != 1:
            raise ValueError("initial must be a probability vector")
        if transition.shape != (n_states, n_states):
            raise ValueError("transition must be square and match the state count")
        if emission.ndim != 2 or emission.shape[0] != n_states:
            raise ValueError("emission must have one row per state")
        n_obs = emission.shape[1]
        if acceptance.shape != (n_obs, n_obs):
            raise ValueError("acceptance must be square over the observation alphabet")
        for name, rows in (("initial", initial[None, :]), ("transition", transition), ("emission", emission)):
            if np.any(rows < 0) or not np.allclose(rows.sum(axis=1), 1.0, atol=1e-10):
                raise ValueError(f"{name} rows must be probability vectors")

    @property
    def n_states(self) -> int:
        return self.initial.shape[0]

    @property
    def n_symbols(self) -> int:
        return self.emission.shape[1]


# ---------------------------------------------------------------------------
# the model bundle
# ---------------------------------------------------------------------------


@dataclass
class HmmModel:
    """Vectorised sampling interface shared by every filter.

    All samplers accept/return 1-d arrays of latent states.  The two density
    hooks are optional: ``log_observation_density`` is None exactly when the
    observation density is unavailable (then only accept/reject filters
    apply), and ``log_lookahead_predictive(y_future, k, lag)`` scores an
    observation ``lag`` steps ahead of a current state ``k`` (exact for the
    linear-Gaussian family, a Gaussian surrogate for the volatility family).
    """

    init_state_sampler: Callable[[np.random.Generator, int], np.ndarray]
    transition_sampler: Callable[[np.ndarray, np.random.Generator], np.ndarray]
    observation_sampler: Callable[[np.ndarray, np.random.Generator], np.ndarray]
    log_observation_density: Optional[Callable[[float, np.ndarray], np.ndarray]] = None
    log_lookahead_predictive: Optional[Callable[[float, np.ndarray, int], np.ndarray]] = None
    metadata: dict = field(default_factory=dict)


def simulate(model: HmmModel, steps: int, stream: np.random.Generator):
    """Draw one latent/observed trajectory of the given length.

    Returns (latents, observations); latents[0] is the state after one
    transition from the initial draw, matching what the filters target.
    """
    if steps <= 0:
        raise ValueError(f"steps must be positive, got {steps}")
    k = model.init_state_sampler(stream, 1)
    latents = np.empty(steps, dtype=float)
    observations = np.empty(steps, dtype=float)
    for t in range(steps):
        k = model.transition_sampler(k, stream)
        y = model.observation_sampler(k, stream)
        latents[t] = k[0]
        observations[t] = y[0]
    return latents, observations


# ---------------------------------------------------------------------------
# Gaussian lookahead arithmetic (shared with the twisting machinery)
# ---------------------------------------------------------------------------


def ar1_lookahead_variance(phi: float, nu2: float, lag: int) -> float:
    """Var(K_{t+lag} | K_t) accumulated over ``lag`` AR(1) transitions."""
    if lag < 0:
        raise ValueError(f"lag must be nonnegative, got {lag}")
    if lag == 0:
        return 0.0
    r = phi * phi
    if abs(r - 1.0) < 1e-12:
        return nu2 * lag
    return nu2 * (1.0 - r**lag) / (1.0 - r)


def norm_logpdf(x, mean, var):
    """Log density of N(mean, var); var must be positive."""
    log_var = math.log(var) if np.ndim(var) == 0 else np.log(var)
    return -0.5 * (_LOG_TWO_PI + log_var + (np.asarray(x) - mean) ** 2 / var)


def ar1_lookahead_logpdf(phi: float, nu2: float, obs_var: float, y_future, k, lag: int):
    """Log predictive density of an observation ``lag`` steps ahead.

    Under K_{t+lag} | K_t = k ~ N(phi**lag * k, ar1_lookahead_variance) and
    Y = K + N(0, obs_var), the predictive is Gaussian with both variance
    contributions added.  lag 0 scores the observation at the current state.
    """
    var = obs_var + ar1_lookahead_variance(phi, nu2, lag)
    return norm_logpdf(y_future, phi**lag * np.asarray(k, dtype=float), var)


# ---------------------------------------------------------------------------
# model constructors
# ---------------------------------------------------------------------------


def lg_model(params: LinearGaussianParams) -> HmmModel:
    """Linear-Gaussian model bundle with exact density hooks."""
    phi, nu2, tau2 = params.phi, params.nu2, params.tau2
    sd = float(np.sqrt(nu2))
    obs_sd = float(np.sqrt(tau2))

    def init_state_sampler(stream, size):
        return sd * stream.standard_normal(size)

    def transition_sampler(k, stream):
        k = np.asarray(k, dtype=float)
        return phi * k + sd * stream.standard_normal(k.shape)

    def observation_sampler(k, stream):
        k = np.asarray(k, dtype=float)
        return k + obs_sd * stream.standard_normal(k.shape)

    def log_observation_density(y, k):
        return norm_logpdf(y, np.asarray(k, dtype=float), tau2)

    def log_lookahead_predictive(y_future, k, lag):
        return ar1_lookahead_logpdf(phi, nu2, tau2, y_future, k, lag)

    return HmmModel(
        init_state_sampler,
        transition_sampler,
        observation_sampler,
        log_observation_density,
        log_lookahead_predictive,
        metadata={"kind": "linear_gaussian", "params": params},
    )


def sv_model(params: StochasticVolatilityParams) -> HmmModel:
    """Stochastic-volatility bundle; the observation density is unavailable.

    The lookahead hook uses a Gaussian observation surrogate with variance
    2 * gamma**2, the variance a stable draw would have at tail index 2 and
    unit volatility scale; metadata records the substitution.
    """
    F, nu2 = params.F, params.nu2
    sd = float(np.sqrt(nu2))
    surrogate_var = 2.0 * params.gamma**2

    def init_state_sampler(stream, size):
        return sd * stream.standard_normal(size)

    def transition_sampler(k, stream):
        k = np.asarray(k, dtype=float)
        return F * k + sd * stream.standard_normal(k.shape)

    def observation_sampler(k, stream):
        k = np.asarray(k, dtype=float)
        noise = stable_sample(stream, params.alpha, params.beta, params.gamma, params.delta, size=k.shape)
        return np.exp(k / 2.0) * noise

    def log_lookahead_predictive(y_future, k, lag):
        return ar1_lookahead_logpdf(F, nu2, surrogate_var, y_future, k, lag)

    return HmmModel(
        init_state_sampler,
        transition_sampler,
        observation_sampler,
        None,
        log_lookahead_predictive,
        metadata={
            "kind": "stochastic_volatility",
            "params": params,
            "lookahead_surrogate": {"obs_var": surrogate_var, "reference_log_vol": 0.0},
        },
    )


def discrete_model(params: DiscreteHmmParams) -> HmmModel:
    """Finite-state bundle; states and observations are integer codes."""

    transition = params.transition
    emission = params.emission

    def _row_categorical(rows, stream):
        cum = np.cumsum(rows, axis=1)
        u = stream.random(rows.shape[0]) * cum[:, -1]
        return np.minimum((cum < u[:, None]).sum(axis=1), rows.shape[1] - 1).astype(np.int64)

    def init_state_sampler(stream, size):
        return categorical_many(stream, params.initial, size)

    def transition_sampler(k, stream):
        k = np.asarray(k, dtype=np.int64)
        return _row_categorical(transition[k], stream)

    def observation_sampler(k, stream):
        k = np.asarray(k, dtype=np.int64)
        return _row_categorical(emission[k], stream)

    return HmmModel(
        init_state_sampler,
        transition_sampler,
        observation_sampler,
        metadata={"kind": "discrete", "params": params},
    )


# ---------------------------------------------------------------------------
# heavy-tailed noise
# ---------------------------------------------------------------------------


@lru_cache(maxsize=64)
def _stable_angle_scale(alpha: float, beta: float):
    """Skew angle and scale constants of the alpha != 1 stable transform."""
    skew = beta * math.tan(math.pi * alpha / 2.0)
    return math.atan(skew) / alpha, (1.0 + skew * skew) ** (1.0 / (2.0 * alpha))


def stable_sample(stream, alpha: float, beta: float = 0.0, gamma: float = 1.0,
                  delta: float = 0.0, size=None):
    """Stable-law variates via the Chambers-Mallows-Stuck transform.

    Uses the continuous-at-alpha=1 angle construction and then applies the
    classical location/scale convention in which, for alpha > 1, delta is the
    mean.  At alpha = 2 the output is exactly N(delta, 2 * gamma**2); at
    alpha = 1, beta = 0 it is Cauchy with scale gamma.
    """
    if not 0 < alpha <= 2:
        raise ValueError(f"alpha must be in (0, 2], got {alpha}")
    if not -1 <= beta <= 1:
        raise ValueError(f"beta must be in [-1, 1], got {beta}")
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")

    n = 1 if size is None else size
    u = (stream.random(n) - 0.5) * np.pi
    w = stream.exponential(1.0, n)

    if alpha == 1.0:
        half_pi = math.pi / 2.0
        shifted = half_pi + beta * u
        x = (shifted * np.tan(u) - beta * np.log(half_pi * w * np.cos(u) / shifted)) / half_pi
        out = gamma * x + delta + (2.0 / math.pi) * beta * gamma * math.log(gamma)
    else:
        angle, scale = _stable_angle_scale(alpha, beta)
        t = alpha * (u + angle)
        x = (
            scale
            * np.sin(t)
            / np.cos(u) ** (1.0 / alpha)
            * (np.cos(u - t) / w) ** ((1.0 - alpha) / alpha)
        )
        out = gamma * x + delta

    return float(out[0]) if size is None else out


# ---------------------------------------------------------------------------
# exact marginal likelihoods
# ---------------------------------------------------------------------------


def kalman_scan(params: LinearGaussianParams, observations, state=None):
    """Exact log marginal likelihood contribution of a block of observations.

    ``state`` is the (predictive mean, predictive variance) pair for the next
    unseen observation; passing the returned state back in with the next
    block gives exactly the same total as one pass over the concatenation.
    """
    phi, nu2, tau2 = params.phi, params.nu2, params.tau2
    if state is None:
        mean, var = 0.0, phi * phi * nu2 + nu2
    else:
        mean, var = state
    loglik = 0.0
    for y in np.asarray(observations, dtype=float):
        innov_var = var + tau2
        loglik += float(norm_logpdf(y, mean, innov_var))
        gain = var / innov_var
        mean_f = mean + gain * (y - mean)
        var_f = (1.0 - gain) * var
        mean = phi * mean_f
        var = phi * phi * var_f + nu2
    return loglik, (mean, var)


def kalman_log_marginal(params: LinearGaussianParams, observations) -> float:
    """Exact log p(y_1..y_T) for the linear-Gaussian model."""
    return kalman_scan(params, observations)[0]


def discrete_abc_log_marginal(params: DiscreteHmmParams, observations) -> float:
    """Exact log acceptance-smeared marginal for the finite-state model.

    Each step contributes the probability mass that a freshly simulated
    symbol lands in the acceptance set of the recorded one, i.e. the exact
    quantity the accept/reject filters estimate.  Returns -inf when some
    observation has zero reachable acceptance mass.
    """
    mass = params.emission @ params.acceptance.T.astype(float)  # mass[s, y]
    p = params.initial @ params.transition
    loglik = 0.0
    for y in np.asarray(observations):
        f = p * mass[:, int(y)]
        total = f.sum()
        if total <= 0.0:
            return float("-inf")
        loglik += float(np.log(total))
        p = (f / total) @ params.transition
    return loglik
