"""Particle-marginal Metropolis-Hastings on top of the alive filters.

The chain machinery is generic: it takes three callables — a log prior, a
proposal returning (candidate, log proposal correction), and a filter runner
mapping (parameter, stream) to (generations, estimate) — so the plain and
twisted alive filters, or a finite-grid toy parameter space, slot in without
touching the kernel of the algorithm.  Each accepted state carries a latent
path selected from the filter output, making the chain target the joint
posterior over parameters and paths.

A filter run that exhausts its proposal cap counts as an immediate rejection
(and is tallied), which keeps the chain well defined when a candidate
parameter makes the tolerance practically unreachable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional

import numpy as np

from .models import StochasticVolatilityParams
from .rng import gaussian
from .smc import BootstrapGeneration, ParticleGeneration, StoppingTimeCapError


# ---------------------------------------------------------------------------
# autocorrelation diagnostic
# ---------------------------------------------------------------------------


def acf(series, max_lag: int) -> np.ndarray:
    """Empirical autocorrelation at lags 0..max_lag (biased covariances).

    Raises ValueError for a series shorter than the requested lags or with
    zero variance.
    """
    series = np.asarray(series, dtype=float)
    if series.ndim != 1:
        raise ValueError("series must be one-dimensional")
    n = series.size
    if max_lag < 0:
        raise ValueError(f"max_lag must be nonnegative, got {max_lag}")
    if n <= max_lag:
        raise ValueError(f"series of length {n} is shorter than the requested {max_lag} lags")
    centred = series - series.mean()
    denom = float(np.dot(centred, centred)) / n
    if denom <= 0.0:
        raise ValueError("zero variance series has no autocorrelation")
    out = np.empty(max_lag + 1)
    out[0] = 1.0
    for lag in range(1, max_lag + 1):
        out[lag] = float(np.dot(centred[:-lag], centred[lag:])) / n / denom
    return out


# ---------------------------------------------------------------------------
# volatility-model parameter space
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SvTheta:
    """The sampled parameters: autoregression weight and the two variances."""

    F: float
    nu2: float
    gamma: float


@dataclass(frozen=True)
class SvPriorSpec:
    """Priors: F Gaussian; 1/nu2 and 1/gamma Gamma(shape, scale).

    The log density is expressed in the sampled coordinates (nu2, gamma), so
    it includes the inverse-transform Jacobians.
    """

    f_mean: float = 0.0
    f_var: float = 0.15
    inv_nu2_shape: float = 2.0
    inv_nu2_scale: float = 100.0
    inv_gamma_shape: float = 2.0
    inv_gamma_scale: float = 1.0


@dataclass(frozen=True)
class SvProposalSpec:
    """Random-walk proposal: Gaussian on F, Gaussian on log nu2 and log gamma."""

    f_step_var: float = 1.0
    log_step_var: float = 0.5


def _log_gamma_pdf(x: float, shape: float, scale: float) -> float:
    return (shape - 1.0) * math.log(x) - x / scale - shape * math.log(scale) - math.lgamma(shape)


def sv_log_prior(spec: SvPriorSpec, theta: SvTheta) -> float:
    """Log prior density of theta in the (F, nu2, gamma) coordinates."""
    finite = all(math.isfinite(x) for x in (theta.F, theta.nu2, theta.gamma))
    if not finite or theta.nu2 <= 0 or theta.gamma <= 0:
        return float("-inf")
    lp = -0.5 * (math.log(2 * math.pi * spec.f_var) + (theta.F - spec.f_mean) ** 2 / spec.f_var)
    # inverse-parameter Gamma priors, with d(1/x)/dx = -1/x^2 Jacobians
    lp += _log_gamma_pdf(1.0 / theta.nu2, spec.inv_nu2_shape, spec.inv_nu2_scale) - 2.0 * math.log(theta.nu2)
    lp += _log_gamma_pdf(1.0 / theta.gamma, spec.inv_gamma_shape, spec.inv_gamma_scale) - 2.0 * math.log(theta.gamma)
    return lp


def sv_sample_prior(spec: SvPriorSpec, stream: np.random.Generator) -> SvTheta:
    """Draw theta from the prior."""
    f = gaussian(stream, spec.f_mean, spec.f_var)
    nu2 = 1.0 / stream.gamma(spec.inv_nu2_shape, spec.inv_nu2_scale)
    gamma_ = 1.0 / stream.gamma(spec.inv_gamma_shape, spec.inv_gamma_scale)
    return SvTheta(float(f), float(nu2), float(gamma_))


def sv_propose(spec: SvProposalSpec, theta: SvTheta, stream: np.random.Generator):
    """Random-walk candidate and its log proposal-density correction.

    The log-scale walks on nu2 and gamma are symmetric in log space, leaving
    a log(candidate) - log(current) correction per parameter in the sampled
    coordinates; the walk on F is symmetric as is.
    """
    f = gaussian(stream, theta.F, spec.f_step_var)
    log_nu2 = math.log(theta.nu2) + gaussian(stream, 0.0, spec.log_step_var)
    log_gamma = math.log(theta.gamma) + gaussian(stream, 0.0, spec.log_step_var)
    # np.exp saturates instead of raising on an extreme excursion; the prior
    # then scores the non-finite candidate as impossible
    candidate = SvTheta(float(f), float(np.exp(log_nu2)), float(np.exp(log_gamma)))
    correction = (log_nu2 - math.log(theta.nu2)) + (log_gamma - math.log(theta.gamma))
    return candidate, float(correction)


def sv_params_from_theta(base: StochasticVolatilityParams, theta: SvTheta) -> StochasticVolatilityParams:
    """The full model parameters with the sampled coordinates substituted."""
    return replace(base, F=theta.F, nu2=theta.nu2, gamma=theta.gamma)


# ---------------------------------------------------------------------------
# path selection and the chain itself
# ---------------------------------------------------------------------------


def select_path(generations, stream: np.random.Generator) -> np.ndarray:
    """Draw one latent trajectory from a filter's output.

    The terminal index is drawn proportional to the final pool's weights
    (over its first T - 1 slots for accept/reject pools) and the path is read
    off through the stored ancestor indices.
    """
    final = generations[-1]
    if isinstance(final, ParticleGeneration):
        candidates = np.flatnonzero(final.weights[: final.stopping_time - 1] == 1)
        index = int(candidates[stream.integers(0, candidates.size)])
    elif isinstance(final, BootstrapGeneration):
        probs = np.exp(final.log_weights - final.log_weights.max())
        cdf = np.cumsum(probs)
        index = int(np.searchsorted(cdf, stream.random() * cdf[-1], side="right"))
    else:
        raise TypeError(f"unsupported generation type {type(final)!r}")
    path = np.empty(len(generations), dtype=np.asarray(final.states).dtype)
    for t in range(len(generations) - 1, -1, -1):
        generation = generations[t]
        path[t] = generation.states[index]
        if t > 0:
            index = int(generation.ancestors[index])
    return path


@dataclass
class PmmhState:
    """Current point of the chain: parameter, its score, and a latent path."""

    theta: object
    log_prior: float
    log_zhat: float
    path: np.ndarray
    iteration: int = 0


@dataclass
class StepInfo:
    accepted: bool
    cap_exceeded: bool
    proposed: object
    log_ratio: float


def pmmh_step(state: PmmhState, run_filter, log_prior_fn, propose_fn,
              stream: np.random.Generator):
    """One accept/reject transition of the pseudo-marginal chain."""
    proposed, log_correction = propose_fn(state.theta, stream)
    log_prior = log_prior_fn(proposed)
    accepted = False
    cap_exceeded = False
    log_ratio = float("-inf")
    next_state = None
    if log_prior > float("-inf"):
        try:
            generations, estimate = run_filter(proposed, stream)
        except StoppingTimeCapError:
            cap_exceeded = True
        else:
            path = select_path(generations, stream)
            log_ratio = (
                log_prior - state.log_prior + log_correction
                + estimate.log_total - state.log_zhat
            )
            if math.log(stream.random()) < log_ratio:
                accepted = True
                next_state = PmmhState(proposed, log_prior, estimate.log_total, path)
    if next_state is None:
        next_state = PmmhState(state.theta, state.log_prior, state.log_zhat, state.path)
    next_state.iteration = state.iteration + 1
    return next_state, StepInfo(accepted, cap_exceeded, proposed, log_ratio)


@dataclass
class ChainRecord:
    """Everything a chain run produces, one row per stored iteration."""

    thetas: List[object]
    log_zhats: np.ndarray
    accepted: np.ndarray
    acceptance_rate: float
    cap_exceeded: int
    iterations: int
    final_state: PmmhState
    metadata: dict = field(default_factory=dict)

    def theta_field(self, name: str) -> np.ndarray:
        """One sampled coordinate as an array over the stored iterations."""
        return np.array([getattr(theta, name) for theta in self.thetas], dtype=float)


def run_chain(run_filter, log_prior_fn, propose_fn, sample_prior_fn,
              iterations: int, stream: np.random.Generator,
              init_attempts: int = 100, metadata: Optional[dict] = None) -> ChainRecord:
    """Run the pseudo-marginal chain for ``iterations`` transitions.

    The initial parameter is drawn from the prior; prior draws whose filter
    run exhausts the proposal cap are redrawn up to ``init_attempts`` times.
    Row 0 of the record is the initial state.
    """
    if iterations < 0:
        raise ValueError(f"iterations must be nonnegative, got {iterations}")
    state = None
    for _ in range(init_attempts):
        theta0 = sample_prior_fn(stream)
        log_prior0 = log_prior_fn(theta0)
        if log_prior0 == float("-inf"):
            continue
        try:
            generations, estimate = run_filter(theta0, stream)
        except StoppingTimeCapError:
            continue
        path0 = select_path(generations, stream)
        state = PmmhState(theta0, log_prior0, estimate.log_total, path0)
        break
    if state is None:
        raise RuntimeError(f"no viable initial parameter found in {init_attempts} prior draws")

    thetas = [state.theta]
    log_zhats = [state.log_zhat]
    accepted_flags = [1]
    accept_count = 0
    cap_count = 0
    for _ in range(iterations):
        state, info = pmmh_step(state, run_filter, log_prior_fn, propose_fn, stream)
        thetas.append(state.theta)
        log_zhats.append(state.log_zhat)
        accepted_flags.append(int(info.accepted))
        accept_count += int(info.accepted)
        cap_count += int(info.cap_exceeded)
    return ChainRecord(
        thetas=thetas,
        log_zhats=np.asarray(log_zhats, dtype=float),
        accepted=np.asarray(accepted_flags, dtype=np.int64),
        acceptance_rate=accept_count / iterations if iterations else 0.0,
        cap_exceeded=cap_count,
        iterations=iterations,
        final_state=state,
        metadata=dict(metadata or {}),
    )
