"""End-to-end statistical health checks, runnable from the command line.

Each check exercises a full code path against an independent reference — a
known sampling law, an exact finite-state recursion, a closed-form Gaussian
marginal — at a configurable replication scale.  The ``quick`` level keeps
the whole suite under a minute; the ``full`` level runs the same checks at
the replication counts used by the acceptance test suite.

Checks are statistical: each uses fixed seeds, so outcomes are reproducible,
and tolerances are set at three standard errors (or explicit slack) so a
healthy build passes deterministically.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .configs import GridConfig, PmmhConfig
from .experiments import run_sv_pmmh, variance_grid
from .kernels import DiscreteBallKernel
from .models import (
    DiscreteHmmParams,
    LinearGaussianParams,
    StochasticVolatilityParams,
    discrete_abc_log_marginal,
    discrete_model,
    kalman_log_marginal,
    lg_model,
    simulate,
    sv_model,
)
from .pmmh import acf, run_chain
from .rng import SeedSpec, categorical, derive_stream
from .smc import alive_filter, bootstrap_filter, sample_until_alive
from .twist import (
    acceptance_prob_twist,
    alive_twisted_filter,
    constant_twist,
    lg_twist,
    random_positive_twist,
    twisted_bootstrap_filter,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


class _ThresholdKernel:
    """Accepts iff the pseudo-observation is below ``rate``: Bernoulli weights."""

    def __init__(self, rate: float):
        self.rate = rate

    def weights(self, simulated, observed):
        return (np.asarray(simulated) < self.rate).astype(np.int64)


def check_stopping_time_mean(master_seed: int, reps: int, n_particles: int = 10,
                             rates=(0.1, 0.3, 0.7)) -> CheckResult:
    """The per-step factor (N-1)/(T-1) is unbiased for the acceptance rate."""
    details = []
    passed = True
    for which, rate in enumerate(rates):
        stream = derive_stream(SeedSpec(master_seed, which))
        kernel = _ThresholdKernel(rate)
        hint = int(np.ceil(2.6 * n_particles / rate))

        def propose(stream, count):
            return {"pseudo_obs": stream.random(count)}

        values = np.empty(reps)
        for rep in range(reps):
            _, stopping_time = sample_until_alive(
                propose, kernel, None, n_particles, 10_000_000, stream, batch_hint=hint
            )
            values[rep] = (n_particles - 1) / (stopping_time - 1)
        mean = float(values.mean())
        se = float(values.std(ddof=1) / np.sqrt(reps))
        z = abs(mean - rate) / se
        passed = passed and z <= 3.0
        details.append(f"rate {rate}: mean {mean:.5f} (z = {z:.2f})")
    return CheckResult("stopping-time factor unbiased", passed, "; ".join(details))


def toy_discrete_instance(master_seed: int, steps: int = 5, n_states: int = 3,
                          n_symbols: int = 3, acceptance: Optional[np.ndarray] = None):
    """A seeded random finite-state instance plus one simulated record."""
    stream = derive_stream(SeedSpec(master_seed, 0))
    initial = stream.dirichlet(np.ones(n_states))
    transition = stream.dirichlet(np.ones(n_states), size=n_states)
    emission = stream.dirichlet(np.ones(n_symbols), size=n_states)
    if acceptance is None:
        acceptance = np.eye(n_symbols, dtype=bool) | (stream.random((n_symbols, n_symbols)) < 0.4)
    params = DiscreteHmmParams(initial, transition, emission, acceptance)
    model = discrete_model(params)
    _, observations = simulate(model, steps, derive_stream(SeedSpec(master_seed, 1)))
    return params, model, observations.astype(np.int64)


def _mean_matches(estimates: np.ndarray, target: float):
    mean = float(estimates.mean())
    se = float(estimates.std(ddof=1) / np.sqrt(estimates.size))
    z = abs(mean - target) / se if se > 0 else np.inf
    return z <= 3.0, mean, z


def check_discrete_unbiasedness(master_seed: int, reps: int, n_particles: int = 20,
                                steps: int = 5) -> CheckResult:
    """Both alive filters hit the exact finite-state acceptance marginal."""
    params, model, observations = toy_discrete_instance(master_seed, steps=steps)
    kernel = DiscreteBallKernel(params.acceptance)
    target = float(np.exp(discrete_abc_log_marginal(params, observations)))
    twists = {
        "constant": constant_twist(steps, params),
        "random-positive": random_positive_twist(
            steps, params, derive_stream(SeedSpec(master_seed, 2))
        ),
        "acceptance-prob": acceptance_prob_twist(params, observations, lag=2),
    }
    details = []
    passed = True

    stream = derive_stream(SeedSpec(master_seed, 3))
    plain = np.empty(reps)
    for rep in range(reps):
        _, estimate = alive_filter(model, kernel, observations, n_particles, 100_000, stream)
        plain[rep] = np.exp(estimate.log_total)
    good, mean, z = _mean_matches(plain, target)
    passed = passed and good
    details.append(f"alive: mean {mean:.5f} vs {target:.5f} (z = {z:.2f})")

    for label, twist in twists.items():
        stream = derive_stream(SeedSpec(master_seed, 4 + hash(label) % 1000))
        values = np.empty(reps)
        for rep in range(reps):
            _, estimate = alive_twisted_filter(
                model, kernel, twist, observations, n_particles, 100_000, stream
            )
            values[rep] = np.exp(estimate.log_total)
        good, mean, z = _mean_matches(values, target)
        passed = passed and good
        details.append(f"twisted[{label}]: mean {mean:.5f} (z = {z:.2f})")
    return CheckResult("finite-state marginal unbiased", passed, "; ".join(details))


def check_lg_unbiasedness(master_seed: int, bootstrap_particles: int, bootstrap_reps: int,
                          twisted_particles: int, twisted_reps: int, lag: int = 5,
                          steps: int = 20) -> CheckResult:
    """Both density filters hit the exact Gaussian marginal likelihood."""
    params = LinearGaussianParams(phi=0.9, nu2=1.0, tau2=1.0)
    model = lg_model(params)
    _, observations = simulate(model, steps, derive_stream(SeedSpec(master_seed, 0)))
    log_target = kalman_log_marginal(params, observations)
    details = []
    passed = True

    stream = derive_stream(SeedSpec(master_seed, 1))
    ratios = np.empty(bootstrap_reps)
    for rep in range(bootstrap_reps):
        _, estimate = bootstrap_filter(model, observations, bootstrap_particles, stream)
        ratios[rep] = np.exp(estimate.log_total - log_target)
    good, mean, z = _mean_matches(ratios, 1.0)
    passed = passed and good
    details.append(f"bootstrap: mean ratio {mean:.4f} (z = {z:.2f})")

    twist = lg_twist(params, lag)
    stream = derive_stream(SeedSpec(master_seed, 2))
    ratios = np.empty(twisted_reps)
    for rep in range(twisted_reps):
        _, estimate = twisted_bootstrap_filter(model, twist, observations, twisted_particles, stream)
        ratios[rep] = np.exp(estimate.log_total - log_target)
    good, mean, z = _mean_matches(ratios, 1.0)
    passed = passed and good
    details.append(f"twisted bootstrap: mean ratio {mean:.4f} (z = {z:.2f})")
    return CheckResult("Gaussian marginal unbiased", passed, "; ".join(details))


def check_variance_reduction(master_seed: int, steps: int, n_particles: int,
                             replicates: int, repetitions: int, min_wins: int,
                             epsilon: float = 1.5, lag: int = 5,
                             cap: int = 1_000_000, workers: int = 1) -> CheckResult:
    """The twisted alive filter has lower estimator variance than the plain one."""
    config = GridConfig(
        phi=0.9, nu2_values=[1.0], tau2_values=[1.0], replicates=replicates,
        steps=steps, n_particles=n_particles, epsilon=epsilon, lag=lag,
        cap=cap, mode="relative",
    )
    wins = 0
    diffs = []
    for repetition in range(repetitions):
        rows = variance_grid(config, master_seed + repetition, workers=workers)
        row = rows[0]
        if row["status"] != "ok":
            diffs.append(row["status"])
            continue
        diffs.append(f"{row['log_var_diff']:.2f}")
        if row["log_var_diff"] > 0:
            wins += 1
    passed = wins >= min_wins
    return CheckResult(
        "twisting reduces estimator variance",
        passed,
        f"{wins}/{repetitions} repetitions improved (need {min_wins}); log-variance gains: "
        + ", ".join(diffs),
    )


def check_grid_posterior(master_seed: int, iterations: int, tolerance: float,
                         n_particles: int = 10, steps: int = 4) -> CheckResult:
    """The pseudo-marginal chain matches an exactly computable posterior.

    The parameter space is two finite-state models sharing one acceptance
    table; the proposal deterministically flips between them (symmetric), so
    the exact posterior follows from the finite-state recursion and the chain
    occupancy must reproduce it.
    """
    params_a, _, observations = toy_discrete_instance(master_seed, steps=steps)
    params_b, _, _ = toy_discrete_instance(master_seed + 1, steps=steps,
                                           acceptance=params_a.acceptance)
    grid = [params_a, params_b]
    prior = np.array([0.5, 0.5])
    kernel = DiscreteBallKernel(params_a.acceptance)
    log_marginals = np.array([discrete_abc_log_marginal(p, observations) for p in grid])
    weights = prior * np.exp(log_marginals - log_marginals.max())
    exact_posterior = weights / weights.sum()

    def run_filter(index, stream):
        return alive_filter(discrete_model(grid[index]), kernel, observations,
                            n_particles, 100_000, stream)

    record = run_chain(
        run_filter,
        lambda index: float(np.log(prior[index])),
        lambda index, stream: (1 - index, 0.0),
        lambda stream: int(categorical(stream, prior)),
        iterations,
        derive_stream(SeedSpec(master_seed, 10)),
    )
    burn_in = iterations // 10
    visited = np.array([int(theta) for theta in record.thetas[burn_in:]])
    occupancy = np.array([(visited == 0).mean(), (visited == 1).mean()])
    tv = 0.5 * float(np.abs(occupancy - exact_posterior).sum())
    return CheckResult(
        "grid posterior occupancy",
        tv <= tolerance,
        f"TV {tv:.4f} vs tolerance {tolerance} "
        f"(occupancy {occupancy.round(4).tolist()}, exact {exact_posterior.round(4).tolist()})",
    )


def _sv_chain_task(args):
    """One posterior chain; top-level so process pools can pickle it."""
    observations, config, algo, master_seed, stream_id = args
    record = run_sv_pmmh(observations, config, algo, master_seed, stream_id)
    burn_in = config.burn_in
    f_series = record.theta_field("F")[burn_in:]
    return record.acceptance_rate, record.cap_exceeded, f_series


def synthetic_sv_record(master_seed: int, steps: int, alpha: float = 1.95) -> np.ndarray:
    """A synthetic volatility record with parameters inside the prior's bulk."""
    true_params = StochasticVolatilityParams(
        F=0.5, nu2=0.01, alpha=alpha, beta=0.05, gamma=0.5, delta=0.0
    )
    _, observations = simulate(sv_model(true_params), steps, derive_stream(SeedSpec(master_seed, 0)))
    return observations

def check_sv_posterior_sampling(master_seed: int, iterations: int, n_particles: int,
                                steps: int, seeds: int, acf_slack: float,
                                rate_window=(0.01, 0.9), acf_max_lag: int = 50,
                                workers: Optional[int] = None,
                                compare_acf: bool = True) -> CheckResult:
    """Both posterior samplers stay healthy on a synthetic volatility record.

    Health means every chain completes with an acceptance rate inside
    ``rate_window``; when ``compare_acf`` is set, the guided variant's mean
    autocorrelation of F over lags 1..acf_max_lag (pooled across seeds,
    after burn-in) must not exceed the plain variant's by more than
    ``acf_slack``.
    """
    observations = synthetic_sv_record(master_seed, steps)
    config = PmmhConfig(
        iterations=iterations, n_particles=n_particles, epsilon=3.5, lag=5,
        cap=1_000_000, alpha=1.95, beta=0.05, delta=0.0,
        burn_in_fraction=0.1, acf_max_lag=acf_max_lag, mode="relative",
    )
    tasks = []
    for seed_index in range(seeds):
        for algo in ("alive", "alive-twisted"):
            stream_id = 100 + 2 * seed_index + (algo == "alive-twisted")
            tasks.append((observations, config, algo, master_seed, stream_id))

    if workers is None:
        workers = min(len(tasks), os.cpu_count() or 1)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_sv_chain_task, tasks))
    else:
        outcomes = [_sv_chain_task(task) for task in tasks]

    details = []
    passed = True
    acfs = {"alive": [], "alive-twisted": []}
    for (_, _, algo, _, _), (rate, cap_events, f_series) in zip(tasks, outcomes):
        ok = rate_window[0] < rate < rate_window[1]
        passed = passed and ok
        details.append(f"{algo}: rate {rate:.3f}" + (f", {cap_events} cap events" if cap_events else ""))
        if compare_acf:
            acfs[algo].append(acf(f_series, acf_max_lag)[1:])
    if compare_acf:
        mean_plain = float(np.mean(acfs["alive"]))
        mean_twisted = float(np.mean(acfs["alive-twisted"]))
        passed = passed and mean_twisted <= mean_plain + acf_slack
        details.append(
            f"mean F autocorrelation lags 1-{acf_max_lag}: "
            f"twisted {mean_twisted:.4f} vs plain {mean_plain:.4f} (slack {acf_slack})"
        )
    return CheckResult("volatility posterior sampling", passed, "; ".join(details))


_QUICK = "quick"
_FULL = "full"


def run_selftest(level: str = _QUICK, master_seed: int = 20260815,
                 workers: Optional[int] = None) -> List[CheckResult]:
    """Run every health check at the requested scale."""
    if level not in (_QUICK, _FULL):
        raise ValueError(f"level must be 'quick' or 'full', got {level!r}")
    full = level == _FULL
    results = []

    def timed(builder):
        start = time.perf_counter()
        result = builder()
        result.detail += f" [{time.perf_counter() - start:.1f}s]"
        results.append(result)

    timed(lambda: check_stopping_time_mean(master_seed, reps=100_000 if full else 3_000))
    timed(lambda: check_discrete_unbiasedness(master_seed, reps=10_000 if full else 400))
    if full:
        timed(lambda: check_lg_unbiasedness(master_seed, 2000, 200, 100, 500))
        timed(lambda: check_variance_reduction(master_seed, steps=50, n_particles=200,
                                               replicates=100, repetitions=10, min_wins=9))
        timed(lambda: check_grid_posterior(master_seed, iterations=100_000, tolerance=0.05))
        timed(lambda: check_sv_posterior_sampling(master_seed, iterations=5_000,
                                                  n_particles=50, steps=200, seeds=5,
                                                  acf_slack=0.05, workers=workers))
    else:
        timed(lambda: check_lg_unbiasedness(master_seed, 500, 50, 50, 100))
        timed(lambda: check_variance_reduction(master_seed, steps=20, n_particles=50,
                                               replicates=20, repetitions=3, min_wins=2,
                                               cap=100_000))
        timed(lambda: check_grid_posterior(master_seed, iterations=4_000, tolerance=0.15))
        timed(lambda: check_sv_posterior_sampling(master_seed, iterations=120, n_particles=20,
                                                  steps=40, seeds=1, acf_slack=1.0,
                                                  rate_window=(0.0, 1.0), acf_max_lag=10,
                                                  workers=workers, compare_acf=False))
    return results
