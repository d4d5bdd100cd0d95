"""Finite-state acceptance-smeared marginal against brute-force enumeration."""

import itertools

import numpy as np
import pytest

from alivetwist import DiscreteHmmParams, discrete_abc_log_marginal
from alivetwist.selftest import toy_discrete_instance


def enumerated_log_marginal(params: DiscreteHmmParams, observations) -> float:
    """Oracle: sum over every latent path with itertools, no recursion.

    The filters target the chain one transition past the initial draw, so the
    first path state is distributed as initial @ transition.  Each step
    multiplies in the probability that a fresh symbol simulated at that state
    falls in the acceptance set of the recorded observation.
    """
    observations = [int(y) for y in observations]
    acceptance = params.acceptance.astype(float)
    accept_mass = params.emission @ acceptance.T  # [state, observed]
    first = params.initial @ params.transition
    total = 0.0
    for path in itertools.product(range(params.n_states), repeat=len(observations)):
        prob = first[path[0]] * accept_mass[path[0], observations[0]]
        for prev, cur, y in zip(path, path[1:], observations[1:]):
            prob *= params.transition[prev, cur] * accept_mass[cur, y]
        total += prob
    return float(np.log(total)) if total > 0 else float("-inf")


def test_matches_enumeration_on_fixed_instance():
    params = DiscreteHmmParams(
        initial=[0.5, 0.3, 0.2],
        transition=[[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.1, 0.2, 0.7]],
        emission=[[0.7, 0.2, 0.1], [0.1, 0.8, 0.1], [0.3, 0.3, 0.4]],
        acceptance=np.array([[1, 1, 0], [0, 1, 0], [0, 1, 1]], dtype=bool),
    )
    observations = [0, 2, 1, 1, 0]
    ours = discrete_abc_log_marginal(params, observations)
    assert ours == pytest.approx(enumerated_log_marginal(params, observations), rel=1e-12)


@pytest.mark.parametrize("master_seed", [401, 402, 403])
def test_matches_enumeration_on_random_instances(master_seed):
    params, _, observations = toy_discrete_instance(master_seed)
    ours = discrete_abc_log_marginal(params, observations)
    oracle = enumerated_log_marginal(params, observations)
    assert np.isfinite(ours)
    assert ours == pytest.approx(oracle, rel=1e-12)


def test_exact_matching_reduces_to_plain_hmm_likelihood():
    """With identity acceptance the smeared marginal is the ordinary HMM
    forward likelihood, checkable by enumeration over emissions too."""
    params = DiscreteHmmParams(
        initial=[0.4, 0.6],
        transition=[[0.7, 0.3], [0.4, 0.6]],
        emission=[[0.9, 0.1], [0.2, 0.8]],
        acceptance=np.eye(2, dtype=bool),
    )
    observations = [0, 1, 1, 0]
    first = np.asarray(params.initial) @ params.transition
    total = 0.0
    for path in itertools.product(range(2), repeat=4):
        prob = first[path[0]] * params.emission[path[0], observations[0]]
        for prev, cur, y in zip(path, path[1:], observations[1:]):
            prob *= params.transition[prev, cur] * params.emission[cur, y]
        total += prob
    assert discrete_abc_log_marginal(params, observations) == pytest.approx(
        float(np.log(total)), rel=1e-12
    )


def test_unreachable_observation_gives_minus_infinity():
    params = DiscreteHmmParams(
        initial=[0.5, 0.5],
        transition=[[0.5, 0.5], [0.5, 0.5]],
        emission=[[1.0, 0.0], [1.0, 0.0]],  # symbol 1 is never emitted
        acceptance=np.eye(2, dtype=bool),
    )
    assert discrete_abc_log_marginal(params, [0, 1, 0]) == float("-inf")
    assert np.isfinite(discrete_abc_log_marginal(params, [0, 0, 0]))
