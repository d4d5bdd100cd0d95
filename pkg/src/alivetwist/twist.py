"""Lookahead-guided ("twisted") variants of the particle filters.

A twist is a strictly positive function h of the latent state that scores how
promising a state is for the upcoming observations.  Each filter step gets
one guided slot: its ancestor is chosen proportional to weight times
qh(ancestor) — where qh(k) = E[h(K_next) | K_now = k] integrates h through
one transition — and its new state is drawn from the transition density
reweighted by h.  All other slots behave exactly as in the untwisted filter,
and a uniformly placed index records where the guided particle sits.

Any object with this interface works as a twist (log domain throughout):

* ``log_h(y_window, k)`` and ``log_qh(y_window, k)`` — elementwise over a
  state array ``k``, where ``y_window = observations[t:]`` so the current
  step's observation is ``y_window[0]``;
* ``log_init_qh(y_window)`` — log of E[h(K_1)] under the initial draw plus
  one transition;
* ``sample_twisted_transition(k, y_window, stream)`` — h-reweighted
  transition from ancestor states ``k``;
* ``sample_twisted_init(y_window, stream)`` — h-reweighted initial step.

The three evaluation hooks must be mutually consistent (qh really is the
transition integral of h); that consistency is what keeps the reweighted
normalising-constant estimators unbiased, so it is property-tested rather
than assumed.

For the density-weighted (bootstrap) filter the guidance stops there, and
the step factor is the pool's mean likelihood times a ratio of two pool
averages: the previous pool's weighted mean of qh over the new pool's mean
of h.  With a constant twist both means are 1 and the filter collapses to
its untwisted counterpart; that collapse doubles as a regression check.

The accept/reject (alive) filter twists by more than the lookahead: the slot
that matters for its variance is the binary acceptance itself, so the
effective twist there is the product (current-step acceptance) * h.  That
product is still a twist — just one defined on the state *and* its simulated
pseudo-observation — so the same change-of-measure algebra applies, with
three extra hooks supplying the acceptance-augmented quantities:

* ``log_qh_alive(y_window, k, kernel)`` — log E[W * h] through one
  transition plus one simulation, where W is the kernel's binary weight for
  the current observation;
* ``log_init_qh_alive(y_window, kernel)`` — the same mass from the initial
  law;
* ``sample_guided_pair(k_anc, y_window, kernel, model, stream, step,
  max_trials)`` — a (state, pseudo-observation, trials) draw from the
  transition reweighted by h *conditioned on acceptance*, so the guided
  particle always lands inside the kernel's ball.

Two further hooks are optional.  When a twist implements
``propose_guided_states(k_anc, y_window, stream, count)`` (iid candidate
states from the h-reweighted transition, before any acceptance check) and
reports via ``guided_pair_is_exact(model)`` that its guided pair would need
rejection sampling for the model at hand, the alive filter batches those
candidates together with the plain pool's proposals so one simulated
observation batch and one kernel evaluation serve both.  The sampled law and
the proposal-cap accounting are identical to running the guided rejection
loop on its own; only the batching changes.

The alive step factor is then [sum of qh-with-acceptance over the previous
pool's accepted particles] / [sum of h over the current pool's accepted
among its first T - 1].  With a constant twist the factor becomes the
previous pool's average one-step acceptance mass — the exact conditional
expectation of the untwisted filter's (N - 1)/(T - 1) factor — which is why
the twisted estimator trades the stopping-time noise for smooth density
ratios.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri_exp

from .models import _LOG_TWO_PI, DiscreteHmmParams, ar1_lookahead_variance, norm_logpdf
from .rng import categorical, categorical_many, uniform_index
from .smc import (
    _MAX_BATCH,
    DEFAULT_TRIAL_CAP,
    BootstrapGeneration,
    NormConstEstimate,
    ParticleDeathError,
    ParticleGeneration,
    StoppingTimeCapError,
    sample_until_alive,
)

LOG_FLOOR = float(np.log(1e-300))


class DegenerateTwistError(RuntimeError):
    """Raised when a twist evaluates to something non-finite."""


def _clamped_log(values) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(values)):
        if np.any(np.isnan(values)) or np.any(values == np.inf):
            raise DegenerateTwistError("twist evaluated to a non-finite value")
    return np.maximum(values, LOG_FLOOR)


def _logsumexp1d(values: np.ndarray) -> float:
    """log(sum(exp(values))) for a 1-d float array, without scipy's dispatch cost."""
    shift = float(values.max())
    if not np.isfinite(shift):
        return shift
    return shift + math.log(float(np.exp(values - shift).sum()))


def _insert_scalar(arr: np.ndarray, slot: int, value) -> np.ndarray:
    """``np.insert`` for one scalar into a 1-d array, minus its generality cost."""
    out = np.empty(arr.size + 1, dtype=arr.dtype)
    out[:slot] = arr[:slot]
    out[slot] = value
    out[slot + 1 :] = arr[slot:]
    return out


def _log_interval_mass(mean, var: float, lo: float, hi: float) -> np.ndarray:
    """log P(lo <= X <= hi) for X ~ N(mean, var), elementwise over ``mean``.

    Computed through the log-CDF on whichever tail keeps the difference well
    conditioned, so masses far out in either tail stay accurate instead of
    cancelling to zero.
    """
    mean = np.asarray(mean, dtype=float)
    sd = math.sqrt(var)
    if mean.size:
        # branch on scalar extremes: (bound - m)/sd is monotone in m, so the
        # elementwise |z| maxima sit at mean.min()/mean.max()
        mn = float(mean.min())
        mx = float(mean.max())
        if (
            max(abs((lo - mx) / sd), abs((lo - mn) / sd)) < 5.0
            and max(abs((hi - mx) / sd), abs((hi - mn) / sd)) < 5.0
        ):
            # both endpoints well inside the CDF's working range: plain difference
            a = (lo - mean) / sd
            b = (hi - mean) / sd
            return np.maximum(np.log(np.maximum(ndtr(b) - ndtr(a), 1e-300)), LOG_FLOOR)
    a = (lo - mean) / sd
    b = (hi - mean) / sd
    flip = a + b > 0
    la = log_ndtr(np.where(flip, -b, a))
    lb = log_ndtr(np.where(flip, -a, b))
    d = np.exp(np.minimum(la - lb, 0.0))
    degenerate = d >= 1.0  # both log-CDFs underflow: the mass is below the floor
    if degenerate.any():
        out = lb + np.log1p(-np.where(degenerate, 0.5, d))
        out[degenerate] = LOG_FLOOR
    else:
        out = lb + np.log1p(-d)
    return np.maximum(out, LOG_FLOOR)


def _truncated_gaussian(stream, mean: float, var: float, lo: float, hi: float) -> float:
    """One draw of X ~ N(mean, var) conditioned on lo <= X <= hi.

    Inverse-CDF sampling through the log-domain normal quantile, flipped to
    the left tail for conditioning, so draws stay exact even when the
    interval carries almost no mass.
    """
    sd = math.sqrt(var)
    alpha = (lo - mean) / sd
    beta = (hi - mean) / sd
    flip = alpha + beta > 0
    if flip:
        alpha, beta = -beta, -alpha
    la = float(log_ndtr(alpha))
    lb = float(log_ndtr(beta))
    u = float(stream.random())
    with np.errstate(divide="ignore"):
        log_u = math.log(u) if u > 0 else -np.inf
        log_p = np.logaddexp(log_u, la + float(np.log1p(-u)) - lb) + lb
    z = float(ndtri_exp(min(float(log_p), 0.0)))
    if flip:
        z = -z
    return min(max(mean + sd * z, lo), hi)


# ---------------------------------------------------------------------------
# Gaussian lookahead twist
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianLookaheadTwist:
    """Twist by the Gaussian predictive density of an observation ``lag`` ahead.

    h(k) at step t scores the observation lag steps ahead under the AR(1)
    latent chain started at k with Gaussian observation variance ``obs_var``;
    qh then simply scores the same observation one transition further out, so
    the pair is consistent in closed form.  Near the end of the record the
    lag shrinks to the remaining horizon, and at the final step (effective
    lag 0) the twist is constant, i.e. the step is untwisted.
    """

    phi: float
    nu2: float
    obs_var: float
    lag: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.nu2 <= 0:
            raise ValueError(f"nu2 must be positive, got {self.nu2}")
        if self.obs_var <= 0:
            raise ValueError(f"obs_var must be positive, got {self.obs_var}")
        if self.lag < 0:
            raise ValueError(f"lag must be nonnegative, got {self.lag}")
        object.__setattr__(self, "_pvar_memo", {})

    def _effective_lag(self, y_window) -> int:
        remaining = len(y_window) - 1
        if remaining < 0:
            raise ValueError("empty observation window")
        return min(self.lag, remaining)

    def _predictive_var(self, lag: int) -> float:
        var = self._pvar_memo.get(lag)
        if var is None:
            var = self.obs_var + ar1_lookahead_variance(self.phi, self.nu2, lag)
            self._pvar_memo[lag] = var
        return var

    def log_h(self, y_window, k) -> np.ndarray:
        k = np.asarray(k, dtype=float)
        lag = self._effective_lag(y_window)
        if lag == 0:
            return np.zeros(k.shape)
        target = float(y_window[lag])
        var = self._predictive_var(lag)
        # norm_logpdf followed by _clamped_log, inlined for the filter hot loop
        values = -0.5 * (_LOG_TWO_PI + math.log(var) + (target - self.phi**lag * k) ** 2 / var)
        if not np.all(np.isfinite(values)):
            if np.any(np.isnan(values)) or np.any(values == np.inf):
                raise DegenerateTwistError("twist evaluated to a non-finite value")
        return np.maximum(values, LOG_FLOOR)

    def log_qh(self, y_window, k) -> np.ndarray:
        k = np.asarray(k, dtype=float)
        lag = self._effective_lag(y_window)
        if lag == 0:
            return np.zeros(k.shape)
        target = float(y_window[lag])
        return _clamped_log(
            norm_logpdf(target, self.phi ** (lag + 1) * k, self._predictive_var(lag + 1))
        )

    def log_init_qh(self, y_window) -> float:
        lag = self._effective_lag(y_window)
        if lag == 0:
            return 0.0
        target = float(y_window[lag])
        # marginal of the state after init + one transition is N(0, (1 + phi^2) nu2)
        var = self._predictive_var(lag) + self.phi ** (2 * lag) * (1.0 + self.phi**2) * self.nu2
        return float(_clamped_log(norm_logpdf(target, 0.0, var)))

    def _twisted_transition_moments(self, y_window, k):
        """Mean array and shared variance of the h-reweighted transition."""
        k = np.asarray(k, dtype=float)
        lag = self._effective_lag(y_window)
        if lag == 0:
            return self.phi * k, self.nu2
        target = float(y_window[lag])
        s2 = self._predictive_var(lag)
        var = 1.0 / (1.0 / self.nu2 + self.phi ** (2 * lag) / s2)
        slope = var * self.phi / self.nu2
        offset = var * self.phi**lag * target / s2
        return slope * k + offset, var

    def _twisted_init_moments(self, y_window):
        """Mean and variance of the post-transition state under init * f * h."""
        lag = self._effective_lag(y_window)
        marginal_var = (1.0 + self.phi**2) * self.nu2
        if lag == 0:
            return 0.0, marginal_var
        target = float(y_window[lag])
        s2 = self._predictive_var(lag)
        precision = 1.0 / marginal_var + self.phi ** (2 * lag) / s2
        mean = (self.phi**lag * target / s2) / precision
        return mean, 1.0 / precision

    def sample_twisted_transition(self, k, y_window, stream) -> np.ndarray:
        k = np.asarray(k, dtype=float)
        mean, var = self._twisted_transition_moments(y_window, k)
        return mean + np.sqrt(var) * stream.standard_normal(k.shape)

    def sample_twisted_init(self, y_window, stream) -> np.ndarray:
        return self._sample_twisted_init_many(y_window, stream, 1)

    def _sample_twisted_init_many(self, y_window, stream, count: int) -> np.ndarray:
        """``count`` iid draws of the h-reweighted initial step.

        Tilt the initial state by qh, then the transition by h: the joint is
        exactly the initial law reweighted by h of the post-transition state.
        """
        lag = self._effective_lag(y_window)
        if lag == 0:
            k0 = np.sqrt(self.nu2) * stream.standard_normal(count)
        else:
            target = float(y_window[lag])
            qh_var = self._predictive_var(lag + 1)
            precision0 = 1.0 / self.nu2 + self.phi ** (2 * (lag + 1)) / qh_var
            mean0 = (self.phi ** (lag + 1) * target / qh_var) / precision0
            k0 = mean0 + np.sqrt(1.0 / precision0) * stream.standard_normal(count)
        return self.sample_twisted_transition(k0, y_window, stream)

    # -- acceptance-augmented hooks for the alive twisted filter ------------

    def log_qh_alive(self, y_window, k, kernel) -> np.ndarray:
        """log E[W * h] through one transition plus one simulation from k."""
        k = np.asarray(k, dtype=float)
        lo, hi = kernel.interval(float(y_window[0]))
        lag = self._effective_lag(y_window)
        if lag == 0:
            return _log_interval_mass(self.phi * k, self.nu2 + self.obs_var, lo, hi)
        # same algebra as _twisted_transition_moments / log_qh, sharing the
        # window lookups across the two vector passes
        target = float(y_window[lag])
        s2 = self._predictive_var(lag)
        var = 1.0 / (1.0 / self.nu2 + self.phi ** (2 * lag) / s2)
        mean = (var * self.phi / self.nu2) * k + var * self.phi**lag * target / s2
        mass = _log_interval_mass(mean, var + self.obs_var, lo, hi)
        qh_var = self._predictive_var(lag + 1)
        # norm_logpdf followed by _clamped_log, inlined for the filter hot loop
        log_qh = -0.5 * (
            _LOG_TWO_PI + math.log(qh_var) + (target - self.phi ** (lag + 1) * k) ** 2 / qh_var
        )
        if not np.all(np.isfinite(log_qh)):
            if np.any(np.isnan(log_qh)) or np.any(log_qh == np.inf):
                raise DegenerateTwistError("twist evaluated to a non-finite value")
        log_qh = np.maximum(log_qh, LOG_FLOOR)
        return np.maximum(log_qh + mass, LOG_FLOOR)

    def log_init_qh_alive(self, y_window, kernel) -> float:
        """log E[W * h] from the initial law plus one transition."""
        lo, hi = kernel.interval(float(y_window[0]))
        mean, var = self._twisted_init_moments(y_window)
        mass = float(_log_interval_mass(np.array([mean]), var + self.obs_var, lo, hi)[0])
        return max(self.log_init_qh(y_window) + mass, LOG_FLOOR)

    def propose_guided_states(self, k_anc, y_window, stream, count: int) -> np.ndarray:
        """``count`` iid candidate states from the h-reweighted transition.

        ``k_anc`` None means the h-reweighted initial step.  No acceptance
        conditioning happens here; the caller pairs each candidate with a
        simulated observation and keeps the first accepted one.
        """
        if k_anc is None:
            return self._sample_twisted_init_many(y_window, stream, count)
        mean_arr, var = self._twisted_transition_moments(
            y_window, np.asarray([k_anc], dtype=float)
        )
        return float(mean_arr[0]) + math.sqrt(var) * stream.standard_normal(count)

    def guided_pair_is_exact(self, model) -> bool:
        """Whether sample_guided_pair draws without rejection for this model."""
        return model.metadata.get("kind") == "linear_gaussian"

    def sample_guided_pair(self, k_anc, y_window, kernel, model, stream,
                           step: int, max_trials: int):
        """A (state, pseudo_obs, trials) draw from f * h conditioned on acceptance.

        When the model's observation law is the Gaussian the twist already
        assumes, the pair is drawn exactly: the pseudo-observation from its
        truncated marginal over the kernel's interval, then the state from
        the conjugate conditional.  Any other observation law falls back to
        rejection — draw from the h-reweighted transition, simulate, keep the
        first accepted pair — with the trial count reported so the caller can
        charge it against the step's proposal cap.
        """
        y = float(y_window[0])
        lo, hi = kernel.interval(y)
        if model.metadata.get("kind") == "linear_gaussian":
            if k_anc is None:
                mean, var = self._twisted_init_moments(y_window)
            else:
                mean_arr, var = self._twisted_transition_moments(
                    y_window, np.asarray([k_anc], dtype=float)
                )
                mean = float(mean_arr[0])
            total_var = var + self.obs_var
            obs = _truncated_gaussian(stream, mean, total_var, lo, hi)
            shrink = var / total_var
            cond_mean = mean + shrink * (obs - mean)
            cond_var = var * self.obs_var / total_var
            state = cond_mean + math.sqrt(cond_var) * float(stream.standard_normal())
            return float(state), float(obs), 1
        trials = 0
        batch = 8
        while trials < max_trials:
            count = int(min(batch, max_trials - trials))
            states = self.propose_guided_states(k_anc, y_window, stream, count)
            obs = model.observation_sampler(states, stream)
            weights = kernel.weights(obs, y)
            hits = weights.nonzero()[0]
            if hits.size:
                first = int(hits[0])
                return float(states[first]), float(obs[first]), trials + first + 1
            trials += count
            batch = min(batch * 4, 4096)
        raise StoppingTimeCapError(step, trials, 0, 1, max_trials)


def lg_twist(params, lag: int) -> GaussianLookaheadTwist:
    """Exact lookahead twist for the linear-Gaussian model."""
    return GaussianLookaheadTwist(params.phi, params.nu2, params.tau2, lag)


def sv_twist(params, lag: int) -> GaussianLookaheadTwist:
    """Gaussian-surrogate lookahead twist for the volatility model.

    The heavy-tailed observation law has no usable density, so the twist
    scores observations under a Gaussian with variance 2 * gamma**2 — the
    observation variance at tail index 2 with the volatility factor frozen at
    its prior-mean log-volatility of 0.  The surrogate only shapes the
    guidance; the estimators stay unbiased for the model's own normalising
    constant because h, qh and the twisted samplers are mutually consistent.
    """
    surrogate_var = 2.0 * params.gamma**2
    return GaussianLookaheadTwist(
        params.F,
        params.nu2,
        surrogate_var,
        lag,
        metadata={"surrogate_obs_var": surrogate_var, "reference_log_vol": 0.0},
    )


# ---------------------------------------------------------------------------
# table twists for the finite-state oracle models
# ---------------------------------------------------------------------------


@dataclass
class DiscreteTableTwist:
    """Twist given by an explicit (step, state) table of log h values.

    qh and the twisted samplers are computed exactly from the model's
    transition matrix, so any positive table is a valid twist; this is the
    workhorse for checking the twisted estimators against the finite-state
    oracle.  The step index is inferred from the length of the remaining
    observation window.
    """

    log_h_table: np.ndarray
    params: DiscreteHmmParams

    def __post_init__(self) -> None:
        table = np.asarray(self.log_h_table, dtype=float)
        if table.ndim != 2 or table.shape[1] != self.params.n_states:
            raise ValueError("log_h_table must be (steps, n_states)")
        if not np.all(np.isfinite(table)):
            raise DegenerateTwistError("twist table must be finite")
        self.log_h_table = table
        self._h = np.exp(table)
        self._qh = self._h @ self.params.transition.T  # qh[t, k] = sum_j P(k -> j) h[t, j]
        init_marginal = self.params.initial @ self.params.transition
        self._init_qh = float(init_marginal @ self._h[0])

    @property
    def steps(self) -> int:
        return self.log_h_table.shape[0]

    def _step(self, y_window) -> int:
        t = self.steps - len(y_window)
        if not 0 <= t < self.steps:
            raise ValueError("observation window does not match the twist table")
        return t

    def log_h(self, y_window, k) -> np.ndarray:
        return self.log_h_table[self._step(y_window), np.asarray(k, dtype=np.int64)]

    def log_qh(self, y_window, k) -> np.ndarray:
        return np.log(self._qh[self._step(y_window), np.asarray(k, dtype=np.int64)])

    def log_init_qh(self, y_window) -> float:
        if self._step(y_window) != 0:
            raise ValueError("initial twist mass only applies at the first step")
        return float(np.log(self._init_qh))

    def sample_twisted_transition(self, k, y_window, stream) -> np.ndarray:
        t = self._step(y_window)
        k = np.asarray(k, dtype=np.int64)
        rows = self.params.transition[k] * self._h[t][None, :]
        cum = np.cumsum(rows, axis=1)
        u = stream.random(k.shape[0]) * cum[:, -1]
        return np.minimum((cum < u[:, None]).sum(axis=1), rows.shape[1] - 1).astype(np.int64)

    def sample_twisted_init(self, y_window, stream) -> np.ndarray:
        if self._step(y_window) != 0:
            raise ValueError("initial twist draw only applies at the first step")
        init_marginal = self.params.initial @ self.params.transition
        return np.array([categorical(stream, init_marginal * self._h[0])], dtype=np.int64)

    # -- acceptance-augmented hooks for the alive twisted filter ------------

    def _masked_h(self, y_window, kernel) -> np.ndarray:
        """Per-state h times the exact probability of an accepted simulation."""
        mask = kernel.accept_mask(int(np.asarray(y_window)[0])).astype(float)
        mass = self.params.emission @ mask
        return mass * self._h[self._step(y_window)]

    def log_qh_alive(self, y_window, k, kernel) -> np.ndarray:
        values = self.params.transition @ self._masked_h(y_window, kernel)
        k = np.asarray(k, dtype=np.int64)
        return np.log(np.maximum(values[k], np.exp(LOG_FLOOR)))

    def log_init_qh_alive(self, y_window, kernel) -> float:
        if self._step(y_window) != 0:
            raise ValueError("initial twist mass only applies at the first step")
        init_marginal = self.params.initial @ self.params.transition
        value = float(init_marginal @ self._masked_h(y_window, kernel))
        return float(np.log(max(value, np.exp(LOG_FLOOR))))

    def guided_pair_is_exact(self, model) -> bool:
        """The finite-state guided pair is always drawn without rejection."""
        return True

    def sample_guided_pair(self, k_anc, y_window, kernel, model, stream,
                           step: int, max_trials: int):
        """Exact draw of (state, symbol) from f * h conditioned on acceptance."""
        masked = self._masked_h(y_window, kernel)
        if k_anc is None:
            lattice = (self.params.initial @ self.params.transition) * masked
        else:
            lattice = self.params.transition[int(k_anc)] * masked
        state = categorical(stream, lattice)
        mask = kernel.accept_mask(int(np.asarray(y_window)[0])).astype(float)
        symbol = categorical(stream, self.params.emission[state] * mask)
        return int(state), int(symbol), 1


def constant_twist(steps: int, params: DiscreteHmmParams) -> DiscreteTableTwist:
    """The do-nothing twist (h identically 1)."""
    return DiscreteTableTwist(np.zeros((steps, params.n_states)), params)


def random_positive_twist(steps: int, params: DiscreteHmmParams,
                          stream: np.random.Generator, scale: float = 1.0) -> DiscreteTableTwist:
    """An arbitrary positive twist; unbiasedness must hold for any of these."""
    return DiscreteTableTwist(scale * stream.standard_normal((steps, params.n_states)), params)


def acceptance_prob_twist(params: DiscreteHmmParams, observations, lag: int) -> DiscreteTableTwist:
    """Twist by the probability of accepting the next ``lag`` observations.

    h_t(k) is the exact probability that fresh simulations from state k pass
    the acceptance table for observations t+1 .. t+lag (truncated at the end
    of the record), computed by backward induction — the natural guidance
    target for accept/reject filters.
    """
    observations = np.asarray(observations)
    steps = observations.size
    mass = params.emission @ params.acceptance.T.astype(float)
    table = np.ones((steps, params.n_states))
    for t in range(steps):
        horizon = min(lag, steps - 1 - t)
        value = np.ones(params.n_states)
        for s in range(t + horizon, t, -1):
            value = params.transition @ (mass[:, int(observations[s])] * value)
        table[t] = value
    return DiscreteTableTwist(np.log(np.maximum(table, 1e-300)), params)


# ---------------------------------------------------------------------------
# twisted filters
# ---------------------------------------------------------------------------


def twisted_bootstrap_filter(model, twist, observations, n_particles: int,
                             stream: Optional[np.random.Generator] = None):
    """Bootstrap filter with one lookahead-guided slot per step.

    Per step, in stream order: the guided slot index is drawn uniformly, the
    guided ancestor proportional to weight times qh, the guided state from
    the h-reweighted transition, then all other slots exactly as in the
    bootstrap filter.  The step factor is the pool's mean observation
    likelihood times (previous weighted mean of qh) / (current mean of h).
    """
    if stream is None:
        raise ValueError("an explicit random stream is required")
    if n_particles < 2:
        raise ValueError(f"need at least 2 particles, got {n_particles}")
    if model.log_observation_density is None:
        raise ValueError("bootstrap filtering requires a model with an observation density")
    observations = np.asarray(observations, dtype=float)
    if observations.size == 0:
        raise ValueError("need at least one observation")

    generations: List[BootstrapGeneration] = []
    log_factors: List[float] = []
    prev: Optional[BootstrapGeneration] = None
    prev_total = 0.0

    for t in range(observations.size):
        y = observations[t]
        y_window = observations[t:]
        slot = uniform_index(stream, n_particles)
        if prev is None:
            guided = twist.sample_twisted_init(y_window, stream)
            log_qh_sum = float(twist.log_init_qh(y_window))
            others = model.transition_sampler(
                model.init_state_sampler(stream, n_particles - 1), stream
            )
            ancestors = None
        else:
            log_qh_prev = twist.log_qh(y_window, prev.states)
            guided_scores = prev.log_weights + log_qh_prev
            guided_ancestor = categorical(stream, np.exp(guided_scores - guided_scores.max()))
            guided = twist.sample_twisted_transition(
                prev.states[guided_ancestor : guided_ancestor + 1], y_window, stream
            )
            probs = np.exp(prev.log_weights - prev.log_weights.max())
            other_ancestors = categorical_many(stream, probs, n_particles - 1)
            others = model.transition_sampler(prev.states[other_ancestors], stream)
            ancestors = _insert_scalar(other_ancestors, slot, guided_ancestor)
            # the previous pool's log-weight total is exactly last step's factor input
            log_qh_sum = _logsumexp1d(guided_scores) - prev_total
        states = _insert_scalar(others, slot, guided[0])
        log_weights = np.asarray(model.log_observation_density(y, states), dtype=float)
        total = _logsumexp1d(log_weights)
        if not np.isfinite(total):
            raise ParticleDeathError(t)
        log_wh_sum = _logsumexp1d(twist.log_h(y_window, states)) - math.log(n_particles)
        prev_total = total
        generation = BootstrapGeneration(
            states=states,
            log_weights=log_weights,
            ancestors=ancestors,
            twisted_index=slot,
            log_qh_sum=log_qh_sum,
            log_wh_sum=log_wh_sum,
        )
        generations.append(generation)
        log_factors.append(total - math.log(n_particles) + log_qh_sum - log_wh_sum)
        prev = generation

    return generations, NormConstEstimate.from_log_factors(log_factors)


def _fused_alive_step(twist, model, kernel, propose_latents, guided_anchor,
                      y_window, y, plain_target, cap, stream, batch_hint, step):
    """One guided draw plus the plain pool, through shared simulation batches.

    The guided candidates ride in front of the plain proposals so a single
    simulated-observation batch and a single kernel evaluation serve both.
    The sampled law matches running the guided rejection loop first and the
    plain accept/reject loop second; proposals of both kinds are charged
    against the same per-step cap, counting only draws up to each stopping
    position (speculative tails are free, as in sample_until_alive).

    Returns (guided_state, guided_obs, guided_trials, pool, rest) where pool
    and rest mirror sample_until_alive's output for the plain proposals.
    """
    guided_block = min(8, cap - plain_target)
    if guided_block < 1:
        raise StoppingTimeCapError(step, 0, 0, plain_target + 1, cap)
    plain_size = max(plain_target, batch_hint) if batch_hint else max(2 * plain_target, 64)
    plain_size = min(plain_size, _MAX_BATCH, cap - guided_block)

    guided_states = twist.propose_guided_states(guided_anchor, y_window, stream, guided_block)
    plain = propose_latents(stream, plain_size)
    all_obs = model.observation_sampler(
        np.concatenate([guided_states, plain["states"]]), stream
    )
    weights = kernel.weights(all_obs, y)
    spent = guided_block + plain_size

    guided_hits = weights[:guided_block].nonzero()[0]
    guided_trials = guided_block
    guided_state = guided_obs = None
    if guided_hits.size:
        hit = int(guided_hits[0])
        guided_state = float(guided_states[hit])
        guided_obs = float(all_obs[hit])
        guided_trials = hit + 1
        spent -= guided_block - guided_trials
    plain["pseudo_obs"] = all_obs[guided_block:]
    plain_weights = weights[guided_block:]

    batch = 4 * guided_block
    while guided_state is None:
        count = min(batch, cap - spent)
        if count <= 0:
            raise StoppingTimeCapError(step, guided_trials, 0, 1, cap)
        states = twist.propose_guided_states(guided_anchor, y_window, stream, count)
        obs = model.observation_sampler(states, stream)
        hits = kernel.weights(obs, y).nonzero()[0]
        if hits.size:
            hit = int(hits[0])
            guided_state = float(states[hit])
            guided_obs = float(obs[hit])
            guided_trials += hit + 1
            spent += hit + 1
        else:
            guided_trials += count
            spent += count
            batch = min(batch * 4, 4096)

    cumulative = np.cumsum(plain_weights)
    accepted = int(cumulative[-1])
    if accepted >= plain_target:
        stop = int(np.searchsorted(cumulative, plain_target, side="left")) + 1
        pool = {name: values[:stop] for name, values in plain.items()}
        pool["weights"] = plain_weights[:stop]
        return guided_state, guided_obs, guided_trials, pool, stop

    plain["weights"] = plain_weights
    chunks = [plain]
    drawn = plain_size
    size = min(2 * plain_size, _MAX_BATCH)
    while True:
        count = min(size, cap - spent)
        if count <= 0:
            raise StoppingTimeCapError(step, drawn, accepted, plain_target, cap)
        batch_p = propose_latents(stream, count)
        batch_p["pseudo_obs"] = model.observation_sampler(batch_p["states"], stream)
        w = kernel.weights(batch_p["pseudo_obs"], y)
        batch_p["weights"] = w
        chunks.append(batch_p)
        spent += count
        cumulative = accepted + np.cumsum(w)
        if int(cumulative[-1]) >= plain_target:
            stop = int(np.searchsorted(cumulative, plain_target, side="left")) + 1
            pool = {
                name: np.concatenate([chunk[name] for chunk in chunks])[: drawn + stop]
                for name in chunks[0]
            }
            return guided_state, guided_obs, guided_trials, pool, drawn + stop
        drawn += count
        accepted = int(cumulative[-1])
        size = min(2 * size, _MAX_BATCH)


def alive_twisted_filter(model, kernel, twist, observations, n_particles: int,
                         cap: int = DEFAULT_TRIAL_CAP,
                         stream: Optional[np.random.Generator] = None):
    """Accept/reject filter guided by an acceptance-augmented twist.

    The twist acts on the (state, simulated observation) pair: the effective
    guidance is h times the current step's acceptance indicator, so its
    one-step expectation ``qh_alive`` is qh times the probability that a
    fresh simulation lands inside the kernel's acceptance region.

    Per step: one guided particle is drawn first — ancestor proportional to
    qh_alive among the previous pool's accepted particles (first T - 1
    slots), then a (state, pseudo-observation) pair from the h-reweighted
    transition *conditioned on acceptance*, so the guided slot is always
    alive.  Ordinary proposals then continue until n_particles - 1 more are
    accepted, the guided particle is placed at a uniformly drawn slot among
    the first T - 1, and any trials the guided draw consumed are charged
    against the step's proposal cap.  When the twist reports that its guided
    pair needs rejection sampling for this model, the guided candidates and
    the plain pool share simulation batches (see _fused_alive_step); the
    sampled law is unchanged.

    The step factor is the previous pool's accepted-particle sum of qh_alive
    over the current pool's accepted-particle sum of h (first T - 1 slots
    both); at the first step the numerator is (n_particles - 1) times the
    initial qh_alive mass.  With a constant twist the factor collapses to
    the accepted pool's mean one-step acceptance mass — same expectation as
    the plain alive ratio (n_particles - 1) / (T - 1), with the stopping
    time integrated out.
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
    accepted_idx = accepted_states = None  # prev's weight-1 slots in its first T - 1
    exactness = getattr(twist, "guided_pair_is_exact", None)
    fused = (
        getattr(twist, "propose_guided_states", None) is not None
        and exactness is not None
        and not exactness(model)
    )

    for t in range(observations.size):
        y = observations[t]
        y_window = observations[t:]
        if prev is None:
            guided_anchor = None
            guided_ancestor = None
            log_numerator = math.log(n_particles - 1) + float(
                twist.log_init_qh_alive(y_window, kernel)
            )

            def propose_latents(stream, count):
                k0 = model.init_state_sampler(stream, count)
                return {"states": model.transition_sampler(k0, stream)}
        else:
            prev_states = prev.states
            log_qh_prev = twist.log_qh_alive(y_window, accepted_states, kernel)
            # one shifted-exp pass serves both the ancestor draw and the numerator
            shift = float(log_qh_prev.max())
            cdf = np.cumsum(np.exp(log_qh_prev - shift))
            pick = int(np.searchsorted(cdf, stream.random() * cdf[-1], side="right"))
            guided_ancestor = int(accepted_idx[min(pick, accepted_idx.size - 1)])
            guided_anchor = prev_states[guided_ancestor]
            log_numerator = shift + math.log(float(cdf[-1]))

            def propose_latents(stream, count):
                ancestors = accepted_idx[stream.integers(0, accepted_idx.size, size=count)]
                return {
                    "states": model.transition_sampler(prev_states[ancestors], stream),
                    "ancestors": ancestors,
                }

        if fused:
            guided_state, guided_obs, guided_trials, pool, rest = _fused_alive_step(
                twist, model, kernel, propose_latents, guided_anchor, y_window,
                y, n_particles - 1, cap, stream, batch_hint, t,
            )
        else:
            def propose(stream, count, propose_latents=propose_latents):
                out = propose_latents(stream, count)
                out["pseudo_obs"] = model.observation_sampler(out["states"], stream)
                return out

            guided_state, guided_obs, guided_trials = twist.sample_guided_pair(
                guided_anchor, y_window, kernel, model, stream, t, cap
            )
            remaining_cap = cap - guided_trials
            if remaining_cap < n_particles - 1:
                raise StoppingTimeCapError(t, guided_trials, 1, n_particles, cap)
            pool, rest = sample_until_alive(
                propose, kernel, y, n_particles - 1, remaining_cap, stream,
                batch_hint=batch_hint, step=t,
            )
        stopping_time = rest + 1
        slot = int(stream.integers(0, stopping_time - 1))
        states = _insert_scalar(pool["states"], slot, guided_state)
        pseudo_obs = _insert_scalar(pool["pseudo_obs"], slot, guided_obs)
        weights = _insert_scalar(pool["weights"], slot, 1)
        ancestors = None
        if prev is not None:
            ancestors = _insert_scalar(pool["ancestors"], slot, guided_ancestor)

        accepted_idx = weights[: stopping_time - 1].nonzero()[0]
        accepted_states = states[accepted_idx]
        log_denominator = _logsumexp1d(twist.log_h(y_window, accepted_states))
        generation = ParticleGeneration(
            states=states,
            pseudo_obs=pseudo_obs,
            weights=weights,
            stopping_time=stopping_time,
            ancestors=ancestors,
            twisted_index=slot,
            log_qh_sum=log_numerator,
            log_wh_sum=log_denominator,
        )
        generations.append(generation)
        log_factors.append(log_numerator - log_denominator)
        batch_hint = min(math.ceil(1.3 * stopping_time), cap)
        prev = generation

    return generations, NormConstEstimate.from_log_factors(log_factors)
