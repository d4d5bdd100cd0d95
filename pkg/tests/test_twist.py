"""Twist objects: internal consistency of h, qh, and the twisted samplers."""

import dataclasses
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from scipy.integrate import quad

from alivetwist import (
    AbcKernel,
    DegenerateTwistError,
    DiscreteBallKernel,
    DiscreteHmmParams,
    GaussianLookaheadTwist,
    LinearGaussianParams,
    StochasticVolatilityParams,
    acceptance_prob_twist,
    constant_twist,
    lg_model,
    lg_twist,
    random_positive_twist,
    sv_twist,
)
from alivetwist.twist import (
    LOG_FLOOR,
    DiscreteTableTwist,
    _log_interval_mass,
    _truncated_gaussian,
)

from helpers import stream_for


def _twist():
    return GaussianLookaheadTwist(phi=0.8, nu2=0.5, obs_var=0.7, lag=3)


def _discrete_params():
    return DiscreteHmmParams(
        initial=[0.5, 0.3, 0.2],
        transition=[[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.1, 0.2, 0.7]],
        emission=[[0.7, 0.2, 0.1], [0.1, 0.8, 0.1], [0.3, 0.3, 0.4]],
        acceptance=np.array([[1, 1, 0], [0, 1, 0], [0, 1, 1]], dtype=bool),
    )


def _window(seed=230, size=6):
    return stream_for(seed).normal(size=size)


class TestValidationAndTruncation:
    def test_parameter_validation(self):
        with pytest.raises(ValueError):
            GaussianLookaheadTwist(phi=0.8, nu2=0.0, obs_var=1.0, lag=1)
        with pytest.raises(ValueError):
            GaussianLookaheadTwist(phi=0.8, nu2=1.0, obs_var=0.0, lag=1)
        with pytest.raises(ValueError):
            GaussianLookaheadTwist(phi=0.8, nu2=1.0, obs_var=1.0, lag=-1)

    def test_lag_truncates_to_remaining_horizon(self):
        twist = _twist()
        window = _window()
        k = np.array([0.4, -1.0])
        # with only 2 observations left the effective lag is 1
        short = twist.log_h(window[:2], k)
        one_step = GaussianLookaheadTwist(phi=0.8, nu2=0.5, obs_var=0.7, lag=1)
        np.testing.assert_allclose(short, one_step.log_h(window[:2], k), rtol=1e-12)

    def test_final_step_is_untwisted(self):
        twist = _twist()
        k = np.array([0.4, -1.0, 2.0])
        np.testing.assert_array_equal(twist.log_h(_window()[:1], k), np.zeros(3))
        np.testing.assert_array_equal(twist.log_qh(_window()[:1], k), np.zeros(3))
        assert twist.log_init_qh(_window()[:1]) == 0.0

    def test_empty_window_rejected(self):
        with pytest.raises(ValueError):
            _twist().log_h(np.array([]), np.array([0.0]))

    def test_nan_state_raises_degenerate(self):
        with pytest.raises(DegenerateTwistError):
            _twist().log_h(_window(), np.array([0.0, np.nan]))

    def test_factories_wire_parameters(self):
        lg = lg_twist(LinearGaussianParams(phi=0.9, nu2=1.0, tau2=0.25), lag=4)
        assert (lg.phi, lg.nu2, lg.obs_var, lg.lag) == (0.9, 1.0, 0.25, 4)
        sv = sv_twist(
            StochasticVolatilityParams(F=0.5, nu2=0.01, alpha=1.95, beta=0.05, gamma=0.5),
            lag=5,
        )
        assert (sv.phi, sv.nu2, sv.lag) == (0.5, 0.01, 5)
        assert sv.obs_var == pytest.approx(2.0 * 0.5**2)
        assert sv.metadata["surrogate_obs_var"] == sv.obs_var


class TestGaussianConsistency:
    """qh really is the transition integral of h (quadrature, no shared code)."""

    def test_qh_is_transition_integral_of_h(self):
        twist = _twist()
        window = _window()
        sd = math.sqrt(twist.nu2)
        for anchor in (-1.5, 0.0, 2.0):
            def integrand(x):
                h = float(twist.log_h(window, np.array([x]))[0])
                return stats.norm.pdf(x, loc=twist.phi * anchor, scale=sd) * math.exp(h)

            integral, _ = quad(integrand, -12, 12, limit=200)
            ours = math.exp(float(twist.log_qh(window, np.array([anchor]))[0]))
            assert ours == pytest.approx(integral, rel=1e-8)

    def test_init_qh_is_initial_law_integral_of_h(self):
        twist = _twist()
        window = _window()
        marginal_sd = math.sqrt((1.0 + twist.phi**2) * twist.nu2)

        def integrand(x):
            h = float(twist.log_h(window, np.array([x]))[0])
            return stats.norm.pdf(x, scale=marginal_sd) * math.exp(h)

        integral, _ = quad(integrand, -12, 12, limit=200)
        assert math.exp(twist.log_init_qh(window)) == pytest.approx(integral, rel=1e-8)

    def test_qh_alive_is_acceptance_weighted_integral(self):
        """qh_alive integrates h times the probability that a simulated
        observation (under the twist's Gaussian observation law) is accepted."""
        twist = _twist()
        window = _window()
        kernel = AbcKernel(epsilon=0.8, mode="absolute")
        lo, hi = kernel.interval(float(window[0]))
        obs_sd = math.sqrt(twist.obs_var)
        sd = math.sqrt(twist.nu2)
        for anchor in (-1.0, 0.5):
            def integrand(x):
                h = math.exp(float(twist.log_h(window, np.array([x]))[0]))
                accept = stats.norm.cdf((hi - x) / obs_sd) - stats.norm.cdf((lo - x) / obs_sd)
                return stats.norm.pdf(x, loc=twist.phi * anchor, scale=sd) * h * accept

            integral, _ = quad(integrand, -12, 12, limit=200)
            ours = math.exp(float(twist.log_qh_alive(window, np.array([anchor]), kernel)[0]))
            assert ours == pytest.approx(integral, rel=1e-8)

    def test_init_qh_alive_integral(self):
        twist = _twist()
        window = _window()
        kernel = AbcKernel(epsilon=0.8, mode="absolute")
        lo, hi = kernel.interval(float(window[0]))
        obs_sd = math.sqrt(twist.obs_var)
        marginal_sd = math.sqrt((1.0 + twist.phi**2) * twist.nu2)

        def integrand(x):
            h = math.exp(float(twist.log_h(window, np.array([x]))[0]))
            accept = stats.norm.cdf((hi - x) / obs_sd) - stats.norm.cdf((lo - x) / obs_sd)
            return stats.norm.pdf(x, scale=marginal_sd) * h * accept

        integral, _ = quad(integrand, -12, 12, limit=200)
        ours = math.exp(twist.log_init_qh_alive(window, kernel))
        assert ours == pytest.approx(integral, rel=1e-8)

    @settings(max_examples=40, deadline=None)
    @given(
        phi=st.floats(-1.1, 1.1),
        nu2=st.floats(0.05, 3.0),
        obs_var=st.floats(0.05, 3.0),
        lag=st.integers(0, 6),
        epsilon=st.floats(0.05, 5.0),
        seed=st.integers(0, 2**32),
    )
    def test_acceptance_mass_only_shrinks_qh(self, phi, nu2, obs_var, lag, epsilon, seed):
        """E[W * h] <= E[h] since W is an indicator, whatever the parameters."""
        twist = GaussianLookaheadTwist(phi=phi, nu2=nu2, obs_var=obs_var, lag=lag)
        window = stream_for(seed % (2**32), 5).normal(size=lag + 1)
        kernel = AbcKernel(epsilon=epsilon, mode="absolute")
        k = stream_for(seed % (2**32), 6).normal(size=8)
        plain = twist.log_qh(window, k)
        alive = twist.log_qh_alive(window, k, kernel)
        assert np.all(alive <= plain + 1e-12)
        assert twist.log_init_qh_alive(window, kernel) <= twist.log_init_qh(window) + 1e-12

    def test_wider_interval_never_decreases_alive_mass(self):
        twist = _twist()
        window = _window()
        k = np.linspace(-2, 2, 9)
        tight = twist.log_qh_alive(window, k, AbcKernel(epsilon=0.3, mode="absolute"))
        loose = twist.log_qh_alive(window, k, AbcKernel(epsilon=1.5, mode="absolute"))
        assert np.all(loose >= tight - 1e-12)


class TestTwistedSamplers:
    def test_twisted_transition_matches_quadrature_moments(self):
        """Sampler moments against the f * h posterior computed by quadrature."""
        twist = _twist()
        window = _window()
        anchor = 0.7
        sd = math.sqrt(twist.nu2)

        def weighted(fn):
            def integrand(x):
                h = math.exp(float(twist.log_h(window, np.array([x]))[0]))
                return fn(x) * stats.norm.pdf(x, loc=twist.phi * anchor, scale=sd) * h
            return quad(integrand, -12, 12, limit=200)[0]

        total = weighted(lambda x: 1.0)
        mean = weighted(lambda x: x) / total
        var = weighted(lambda x: x * x) / total - mean**2
        draws = twist.sample_twisted_transition(
            np.full(30_000, anchor), window, stream_for(231)
        )
        assert abs(draws.mean() - mean) < 4 * math.sqrt(var / draws.size)
        pvalue = stats.kstest(draws, stats.norm(loc=mean, scale=math.sqrt(var)).cdf).pvalue
        assert pvalue > 1e-3

    def test_twisted_init_matches_quadrature_moments(self):
        twist = _twist()
        window = _window()
        marginal_sd = math.sqrt((1.0 + twist.phi**2) * twist.nu2)

        def weighted(fn):
            def integrand(x):
                h = math.exp(float(twist.log_h(window, np.array([x]))[0]))
                return fn(x) * stats.norm.pdf(x, scale=marginal_sd) * h
            return quad(integrand, -12, 12, limit=200)[0]

        total = weighted(lambda x: 1.0)
        mean = weighted(lambda x: x) / total
        var = weighted(lambda x: x * x) / total - mean**2
        draws = twist._sample_twisted_init_many(window, stream_for(232), 30_000)
        pvalue = stats.kstest(draws, stats.norm(loc=mean, scale=math.sqrt(var)).cdf).pvalue
        assert pvalue > 1e-3

    def test_propose_guided_states_matches_twisted_transition_law(self):
        twist = _twist()
        window = _window()
        anchored = twist.propose_guided_states(0.7, window, stream_for(233), 20_000)
        reference = twist.sample_twisted_transition(np.full(20_000, 0.7), window, stream_for(234))
        assert stats.ks_2samp(anchored, reference).pvalue > 1e-3
        from_init = twist.propose_guided_states(None, window, stream_for(235), 20_000)
        reference_init = twist._sample_twisted_init_many(window, stream_for(236), 20_000)
        assert stats.ks_2samp(from_init, reference_init).pvalue > 1e-3


class TestIntervalMass:
    def test_central_interval_matches_mpmath(self):
        got = float(_log_interval_mass(np.array([0.3]), 1.7, -0.5, 1.2)[0])
        sd = mpmath.sqrt(1.7)
        want = mpmath.log(mpmath.ncdf((1.2 - 0.3) / sd) - mpmath.ncdf((-0.5 - 0.3) / sd))
        assert got == pytest.approx(float(want), rel=1e-9)

    @pytest.mark.parametrize("lo, hi", [(10.0, 11.0), (-11.0, -10.0), (25.0, 26.0)])
    def test_far_tail_matches_mpmath(self, lo, hi):
        got = float(_log_interval_mass(np.array([0.0]), 1.0, lo, hi)[0])
        want = mpmath.log(mpmath.ncdf(mpmath.mpf(hi)) - mpmath.ncdf(mpmath.mpf(lo)))
        assert got == pytest.approx(float(want), rel=1e-9)

    def test_mixed_array_takes_consistent_values(self):
        means = np.array([0.0, 9.5])  # second element pushes into the tail regime
        got = _log_interval_mass(means, 1.0, -1.0, 1.0)
        for mean, value in zip(means, got):
            want = mpmath.log(
                mpmath.ncdf(mpmath.mpf(1.0 - mean)) - mpmath.ncdf(mpmath.mpf(-1.0 - mean))
            )
            assert float(value) == pytest.approx(float(want), rel=1e-9)

    def test_hopeless_interval_floors(self):
        got = float(_log_interval_mass(np.array([0.0]), 1.0, 40.0, 41.0)[0])
        assert got == LOG_FLOOR

    def test_empty_input(self):
        assert _log_interval_mass(np.array([]), 1.0, -1.0, 1.0).size == 0


class TestTruncatedGaussian:
    def test_central_interval_distribution(self):
        stream = stream_for(237)
        draws = np.array([_truncated_gaussian(stream, 0.3, 2.25, -1.0, 0.5) for _ in range(4000)])
        assert draws.min() >= -1.0 and draws.max() <= 0.5
        a, b = (-1.0 - 0.3) / 1.5, (0.5 - 0.3) / 1.5
        pvalue = stats.kstest(draws, stats.truncnorm(a, b, loc=0.3, scale=1.5).cdf).pvalue
        assert pvalue > 1e-3

    def test_far_tail_interval_distribution(self):
        stream = stream_for(238)
        draws = np.array([_truncated_gaussian(stream, 0.0, 1.0, 8.0, 8.3) for _ in range(3000)])
        assert draws.min() >= 8.0 and draws.max() <= 8.3
        pvalue = stats.kstest(draws, stats.truncnorm(8.0, 8.3).cdf).pvalue
        assert pvalue > 1e-3

    def test_left_tail_flip(self):
        stream = stream_for(239)
        draws = np.array([_truncated_gaussian(stream, 0.0, 1.0, -8.3, -8.0) for _ in range(3000)])
        assert draws.min() >= -8.3 and draws.max() <= -8.0
        pvalue = stats.kstest(draws, stats.truncnorm(-8.3, -8.0).cdf).pvalue
        assert pvalue > 1e-3


class TestGuidedPair:
    def _setup(self):
        params = LinearGaussianParams(phi=0.8, nu2=0.5, tau2=0.7)
        model = lg_model(params)
        twist = lg_twist(params, lag=3)
        window = _window(240)
        kernel = AbcKernel(epsilon=0.6, mode="absolute")
        return model, twist, window, kernel

    def test_exactness_report_follows_model_kind(self):
        model, twist, _, _ = self._setup()
        assert twist.guided_pair_is_exact(model)
        disguised = dataclasses.replace(model, metadata={"kind": "custom"})
        assert not twist.guided_pair_is_exact(disguised)

    def test_exact_path_costs_one_trial_and_lands_inside(self):
        model, twist, window, kernel = self._setup()
        lo, hi = kernel.interval(float(window[0]))
        stream = stream_for(241)
        for _ in range(50):
            state, obs, trials = twist.sample_guided_pair(
                0.4, window, kernel, model, stream, 0, 10**6
            )
            assert trials == 1
            assert lo <= obs <= hi

    def test_rejection_path_matches_exact_path_in_law(self):
        """Disguising the model's metadata flips the implementation from the
        conjugate closed form to rejection sampling; the sampled law of the
        accepted pair must not change."""
        model, twist, window, kernel = self._setup()
        disguised = dataclasses.replace(model, metadata={"kind": "custom"})
        stream_a, stream_b = stream_for(242), stream_for(243)
        exact = np.array([
            twist.sample_guided_pair(0.4, window, kernel, model, stream_a, 0, 10**6)[:2]
            for _ in range(3000)
        ])
        rejected = np.array([
            twist.sample_guided_pair(0.4, window, kernel, disguised, stream_b, 0, 10**6)[:2]
            for _ in range(3000)
        ])
        assert stats.ks_2samp(exact[:, 0], rejected[:, 0]).pvalue > 1e-3
        assert stats.ks_2samp(exact[:, 1], rejected[:, 1]).pvalue > 1e-3

    def test_exact_pair_matches_quadrature_moments(self):
        """Against the f * h * acceptance joint computed by quadrature."""
        model, twist, window, kernel = self._setup()
        lo, hi = kernel.interval(float(window[0]))
        sd = math.sqrt(twist.nu2)
        obs_sd = math.sqrt(twist.obs_var)
        anchor = 0.4

        def weighted(fn):
            def integrand(x):
                h = math.exp(float(twist.log_h(window, np.array([x]))[0]))
                accept = stats.norm.cdf((hi - x) / obs_sd) - stats.norm.cdf((lo - x) / obs_sd)
                return fn(x) * stats.norm.pdf(x, loc=twist.phi * anchor, scale=sd) * h * accept
            return quad(integrand, -12, 12, limit=200)[0]

        total = weighted(lambda x: 1.0)
        mean = weighted(lambda x: x) / total
        var = weighted(lambda x: x * x) / total - mean**2
        stream = stream_for(244)
        states = np.array([
            twist.sample_guided_pair(anchor, window, kernel, model, stream, 0, 10**6)[0]
            for _ in range(4000)
        ])
        assert abs(states.mean() - mean) < 4 * math.sqrt(var / states.size)
        assert abs(states.var() - var) < 0.05 * var

    def test_impossible_interval_exhausts_trials(self):
        model, twist, window, kernel = self._setup()
        disguised = dataclasses.replace(model, metadata={"kind": "custom"})
        hopeless = np.array(window, copy=True)
        hopeless[0] = 1e6  # acceptance interval nowhere near the proposal mass
        from alivetwist import StoppingTimeCapError

        with pytest.raises(StoppingTimeCapError):
            twist.sample_guided_pair(
                0.4, hopeless, AbcKernel(epsilon=0.1, mode="absolute"),
                disguised, stream_for(245), 0, 200,
            )


class TestDiscreteTableTwist:
    def _params(self):
        return _discrete_params()

    def test_table_shape_and_finiteness_validated(self):
        params = self._params()
        with pytest.raises(ValueError):
            DiscreteTableTwist(np.zeros((4, 2)), params)
        with pytest.raises(DegenerateTwistError):
            DiscreteTableTwist(np.array([[0.0, np.inf, 0.0]]), params)

    def test_qh_is_exact_transition_average(self):
        params = self._params()
        table = stream_for(246).normal(size=(4, 3))
        twist = DiscreteTableTwist(table, params)
        window = np.arange(4)  # only the length matters for step inference
        k = np.array([0, 1, 2])
        want = np.log(params.transition @ np.exp(table[0]))[k]
        np.testing.assert_allclose(twist.log_qh(window, k), want, rtol=1e-12)
        want_init = float(np.log((params.initial @ params.transition) @ np.exp(table[0])))
        assert twist.log_init_qh(window) == pytest.approx(want_init, rel=1e-12)

    def test_window_length_must_match_table(self):
        twist = constant_twist(3, self._params())
        with pytest.raises(ValueError):
            twist.log_h(np.arange(5), np.array([0]))
        with pytest.raises(ValueError):
            twist.log_init_qh(np.arange(2))  # not the first step

    def test_qh_alive_is_exact_masked_average(self):
        params = self._params()
        table = stream_for(247).normal(size=(3, 3))
        twist = DiscreteTableTwist(table, params)
        kernel = DiscreteBallKernel(params.acceptance)
        window = np.array([1, 0, 2])
        mask = params.acceptance[1].astype(float)
        masked_h = (params.emission @ mask) * np.exp(table[0])
        want = np.log(params.transition @ masked_h)
        np.testing.assert_allclose(
            twist.log_qh_alive(window, np.array([0, 1, 2]), kernel), want, rtol=1e-12
        )
        want_init = float(np.log((params.initial @ params.transition) @ masked_h))
        assert twist.log_init_qh_alive(window, kernel) == pytest.approx(want_init, rel=1e-12)

    def test_twisted_transition_frequencies(self):
        params = self._params()
        table = stream_for(248).normal(size=(2, 3))
        twist = DiscreteTableTwist(table, params)
        window = np.array([0, 1])
        origin = 1
        law = params.transition[origin] * np.exp(table[0])
        law = law / law.sum()
        draws = twist.sample_twisted_transition(
            np.full(30_000, origin, dtype=np.int64), window, stream_for(249)
        )
        for state, p in enumerate(law):
            observed = (draws == state).mean()
            assert abs(observed - p) < 4 * np.sqrt(p * (1 - p) / draws.size)

    def test_guided_pair_exact_frequencies(self):
        params = self._params()
        twist = DiscreteTableTwist(stream_for(250).normal(size=(2, 3)), params)
        kernel = DiscreteBallKernel(params.acceptance)
        window = np.array([2, 1])
        mask = params.acceptance[2].astype(float)
        masked_h = (params.emission @ mask) * twist._h[0]
        lattice = params.transition[0] * masked_h
        lattice = lattice / lattice.sum()
        stream = stream_for(251)
        draws = np.array([
            twist.sample_guided_pair(0, window, kernel, None, stream, 0, 10)
            for _ in range(20_000)
        ])
        assert np.all(draws[:, 2] == 1)  # exact draws cost one trial
        assert set(np.unique(draws[:, 1])).issubset(set(np.flatnonzero(mask)))
        for state, p in enumerate(lattice):
            observed = (draws[:, 0] == state).mean()
            assert abs(observed - p) < 4 * np.sqrt(p * (1 - p) / draws.shape[0])

    def test_guided_pair_is_always_exact(self):
        assert constant_twist(2, self._params()).guided_pair_is_exact(None)


class TestTwistFactories:
    def test_constant_twist_is_all_zeros(self):
        params = _discrete_params()
        twist = constant_twist(5, params)
        np.testing.assert_array_equal(twist.log_h_table, np.zeros((5, 3)))

    def test_random_positive_twist_shape_and_scale(self):
        params = _discrete_params()
        twist = random_positive_twist(4, params, stream_for(252), scale=0.5)
        assert twist.log_h_table.shape == (4, 3)
        assert np.all(np.isfinite(twist.log_h_table))

    def test_acceptance_prob_twist_matches_enumeration(self):
        """h_t(k) must equal the exact probability that fresh simulations
        from k pass the acceptance sets of the next lag observations."""
        params = _discrete_params()
        observations = np.array([0, 2, 1, 1])
        lag = 2
        twist = acceptance_prob_twist(params, observations, lag)
        mass = params.emission @ params.acceptance.T.astype(float)
        n = params.n_states
        for t in range(4):
            horizon = min(lag, 3 - t)
            for k in range(n):
                total = 0.0
                if horizon == 0:
                    total = 1.0
                elif horizon == 1:
                    for j in range(n):
                        total += params.transition[k, j] * mass[j, int(observations[t + 1])]
                else:
                    for j in range(n):
                        for l in range(n):
                            total += (
                                params.transition[k, j]
                                * mass[j, int(observations[t + 1])]
                                * params.transition[j, l]
                                * mass[l, int(observations[t + 2])]
                            )
                assert math.exp(twist.log_h_table[t, k]) == pytest.approx(total, rel=1e-10)
