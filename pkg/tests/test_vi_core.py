import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from regime_risk import vi_core as vc
from regime_risk.errors import NumericalError
from regime_risk.oracle_lab import SyntheticSpec, gen_var_dataset


def hand_state(mu, R, alpha, T=1):
    K = len(mu)
    return vc.VariationalState(np.full((T, K), 1.0 / K), np.reshape(mu, (K, 1)),
                               np.reshape(R, (K, 1, 1)), np.asarray(alpha, float))


def hand_hyper(pi, K, J=2):
    return vc.VIHyperparams(pi, np.zeros((K, 1)), np.ones((K, 1, 1)), [[1.0]], np.ones((K, J)))


def random_problem(i, K=None, J=None, n=None, T=None):
    rng = np.random.default_rng([7, i])
    K = K or int(rng.integers(1, 5))
    J = J or int(rng.integers(2, 9))
    n = n or int(rng.integers(1, 4))
    T = T if T is not None else int(rng.integers(50, 301))
    spec = SyntheticSpec(seed=i, pi=rng.dirichlet(3 * np.ones(K)), mu=rng.normal(0, 3, (K, n)),
                         M=np.eye(n), theta=rng.dirichlet(np.ones(J), size=K), T=max(T, 1))
    ds = gen_var_dataset(spec)
    obs = vc.ObservationSet(ds.features.x[:T], ds.d[:T])
    return obs, vc.default_hyperparams(obs.x, K, J, seed=i)


class TestValidation:
    def test_pi_simplex(self):
        with pytest.raises(ValueError):
            vc.VIHyperparams([0.6, 0.6], np.zeros((2, 1)), np.ones((2, 1, 1)), [[1.0]], np.ones((2, 2)))

    def test_non_spd_M(self):
        with pytest.raises(NumericalError):
            vc.VIHyperparams([1.0], [[0.0, 0.0]], np.eye(2)[None], [[1.0, 2.0], [2.0, 1.0]], [[1.0, 1.0]])

    def test_alpha_positive(self):
        with pytest.raises(ValueError):
            vc.VIHyperparams([1.0], [[0.0]], [[[1.0]]], [[1.0]], [[1.0, 0.0]])

    def test_category_range(self):
        obs = vc.ObservationSet([0.0, 1.0], [0, 2])
        with pytest.raises(ValueError):
            obs.check(hand_hyper([1.0], 1, J=2))


class TestResponsibilities:
    def test_single_cluster(self):
        obs, hyper = random_problem(1, K=1)
        st = vc.cavi_fit(obs, hyper)
        np.testing.assert_array_equal(vc.update_responsibilities(obs, hyper, st), 1.0)

    def test_identical_clusters(self):
        hyper = hand_hyper([0.5, 0.5], 2)
        st = hand_state([0.3, 0.3], [0.2, 0.2], [[2.0, 1.0], [2.0, 1.0]], T=3)
        obs = vc.ObservationSet([-1.0, 0.0, 4.0], [0, 1, 1])
        np.testing.assert_allclose(vc.update_responsibilities(obs, hyper, st), 0.5, atol=1e-15)

    def test_scalar_oracle(self):
        # mpmath substitution at 40 digits
        hyper = hand_hyper([0.5, 0.5], 2)
        st = hand_state([-1.0, 1.0], [0.1, 0.1], [[1.0, 1.0], [1.0, 1.0]])
        for d in (0, 1):
            phi = vc.update_responsibilities(vc.ObservationSet([0.5], [d]), hyper, st)
            np.testing.assert_allclose(phi[0], [0.26894142136999512075, 0.73105857863000487925], atol=1e-14)

    def test_scalar_oracle_with_digamma(self):
        hyper = hand_hyper([0.3, 0.7], 2)
        st = hand_state([-1.0, 1.0], [0.1, 0.1], [[3.0, 1.0], [1.0, 3.0]])
        phi = vc.update_responsibilities(vc.ObservationSet([0.2], [0]), hyper, st)
        np.testing.assert_allclose(phi[0], [0.56284147741377778542, 0.43715852258622221458], atol=1e-14)

    def test_extreme_inputs_stay_finite(self):
        hyper = hand_hyper([0.5, 0.5], 2)
        st = hand_state([-1.0, 1.0], [0.1, 0.1], [[1.0, 1.0], [1.0, 1.0]], T=2)
        phi = vc.update_responsibilities(vc.ObservationSet([1e6, -1e6], [0, 0]), hyper, st)
        np.testing.assert_allclose(phi, [[0.0, 1.0], [1.0, 0.0]])


class TestClusterMoments:
    def test_no_mass_recovers_prior(self):
        hyper = vc.VIHyperparams([0.5, 0.5], [[1.0], [2.0]], [[[3.0]], [[4.0]]], [[1.0]], np.ones((2, 2)))
        obs = vc.ObservationSet([0.5, 1.5], [0, 1])
        mu, R = vc.update_cluster_moments(obs, hyper, [[1.0, 0.0], [1.0, 0.0]])
        assert mu[1, 0] == 2.0 and R[1, 0, 0] == 4.0

    def test_direct_substitution(self):
        hyper = vc.VIHyperparams([1.0], [[0.0]], [[[1.0]]], [[1.0]], [[1.0, 1.0]])
        obs = vc.ObservationSet([0.5] * 4, [0] * 4)
        mu, R = vc.update_cluster_moments(obs, hyper, np.ones((4, 1)))
        assert R[0, 0, 0] == pytest.approx(0.2) and mu[0, 0] == pytest.approx(0.4)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000))
    def test_posterior_covariance_shrinks(self, seed):
        rng = np.random.default_rng(seed)
        n, K, T = int(rng.integers(1, 4)), 2, 30

        def spd():
            A = rng.normal(size=(n, n))
            return A @ A.T + 0.1 * np.eye(n)

        R0 = np.array([spd(), spd()])
        hyper = vc.VIHyperparams([0.5, 0.5], rng.normal(size=(K, n)), R0, spd(), np.ones((K, 3)))
        obs = vc.ObservationSet(rng.normal(size=(T, n)), rng.integers(0, 3, T))
        _, R = vc.update_cluster_moments(obs, hyper, rng.dirichlet(np.ones(K), size=T))
        for k in range(K):
            ev = np.linalg.eigvalsh(R[k])
            assert ev.min() > 0
            assert ev.max() <= np.linalg.eigvalsh(R0[k]).max() * (1 + 1e-10)
            np.testing.assert_array_equal(R[k], R[k].T)


class TestDirichlet:
    def test_direct_substitution(self):
        hyper = vc.VIHyperparams([1.0], [[0.0]], [[[1.0]]], [[1.0]], [[1.0, 1.0, 1.0]])
        obs = vc.ObservationSet([0.0, 1.0], [0, 2])
        np.testing.assert_array_equal(vc.update_dirichlet(obs, hyper, np.ones((2, 1))), [[2.0, 1.0, 2.0]])

    def test_no_mass_row_is_prior(self):
        obs, hyper = random_problem(3, K=3)
        phi = np.zeros((obs.T, 3))
        phi[:, :2] = 0.5
        np.testing.assert_array_equal(vc.update_dirichlet(obs, hyper, phi)[2], hyper.alpha0[2])

    def test_row_sums(self):
        obs, hyper = random_problem(4)
        phi = np.random.default_rng(0).dirichlet(np.ones(hyper.K), size=obs.T)
        a = vc.update_dirichlet(obs, hyper, phi)
        np.testing.assert_allclose(a.sum(1), hyper.alpha0.sum(1) + phi.sum(0), atol=1e-12)


class TestElbo:
    def test_prior_state_is_zero(self):
        hyper = vc.VIHyperparams([1.0], [[0.3, -1.0]], [np.diag([2.0, 0.5])], np.eye(2), [[1.5, 2.0, 0.7]])
        obs = vc.ObservationSet(np.zeros((0, 2)), np.zeros(0, dtype=int))
        st = vc.VariationalState(np.zeros((0, 1)), hyper.mu0, hyper.R0, hyper.alpha0)
        assert vc.elbo(obs, hyper, st) == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("dup", [1, 2])
    def test_each_block_update_increases(self, dup):
        for i in range(15):
            obs, hyper = random_problem(100 + i, T=80)
            if dup == 2:
                obs = vc.ObservationSet(np.vstack([obs.x, obs.x]), np.concatenate([obs.d, obs.d]))
            rng = np.random.default_rng(i)
            phi = rng.dirichlet(np.ones(hyper.K), size=obs.T)
            state = vc._state_from_phi(obs, hyper, phi)
            prev = vc.elbo(obs, hyper, state)
            for _ in range(5):
                state = vc.VariationalState(vc.update_responsibilities(obs, hyper, state),
                                            state.mu_hat, state.R_hat, state.alpha_hat)
                e1 = vc.elbo(obs, hyper, state)
                mu, R = vc.update_cluster_moments(obs, hyper, state.phi)
                state = vc.VariationalState(state.phi, mu, R, state.alpha_hat)
                e2 = vc.elbo(obs, hyper, state)
                state = vc.VariationalState(state.phi, mu, R, vc.update_dirichlet(obs, hyper, state.phi))
                e3 = vc.elbo(obs, hyper, state)
                assert e1 >= prev - 1e-9 and e2 >= e1 - 1e-9 and e3 >= e2 - 1e-9
                prev = e3

    def test_tiny_prior_is_finite(self):
        obs, hyper = random_problem(5, K=1)
        hyper = vc.VIHyperparams(hyper.pi, hyper.mu0, hyper.R0, hyper.M, np.full_like(hyper.alpha0, 1e-8))
        st = vc.cavi_fit(obs, hyper)
        assert np.isfinite(st.elbo_trace[-1])


class TestFit:
    def test_single_cluster_closed_form(self):
        obs, hyper = random_problem(6, K=1, J=4)
        st = vc.cavi_fit(obs, hyper)
        np.testing.assert_array_equal(st.phi, 1.0)
        np.testing.assert_allclose(st.alpha_hat[0], hyper.alpha0[0] + np.bincount(obs.d, minlength=4))
        assert st.converged and st.n_sweeps <= 2

    def test_deterministic(self):
        obs, hyper = random_problem(7)
        a = vc.cavi_fit(obs, hyper, vc.CAVIOptions(seed=11))
        b = vc.cavi_fit(obs, hyper, vc.CAVIOptions(seed=11))
        assert vc.state_to_json(a) == vc.state_to_json(b)

    def test_nonconvergence_flag(self):
        obs, hyper = random_problem(8, K=3)
        st = vc.cavi_fit(obs, hyper, vc.CAVIOptions(max_sweeps=1, restarts=0))
        assert not st.converged and st.n_sweeps == 1

    def test_two_cluster_recovery(self):
        spec = SyntheticSpec(seed=1, pi=[0.5, 0.5], mu=[[-5.0], [5.0]], M=[[1.0]],
                             theta=[[0.7, 0.3], [0.3, 0.7]], T=400)
        ds = gen_var_dataset(spec)
        obs = vc.ObservationSet(ds.features.x, ds.d)
        h = vc.default_hyperparams(obs.x, 2, 2, seed=1)
        hyper = vc.VIHyperparams(h.pi, h.mu0, h.R0, [[1.0]], h.alpha0)
        st = vc.cavi_fit(obs, hyper)
        np.testing.assert_allclose(np.sort(st.mu_hat[:, 0]), [-5.0, 5.0], atol=0.3)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_state_invariants(self, seed):
        obs, hyper = random_problem(seed, T=int(np.random.default_rng(seed).integers(1, 120)))
        st = vc.cavi_fit(obs, hyper, vc.CAVIOptions(seed=seed, restarts=1))
        assert np.all(st.phi >= 0)
        np.testing.assert_allclose(st.phi.sum(1), 1.0, atol=1e-9)
        assert np.all(st.alpha_hat >= hyper.alpha0)
        assert (st.alpha_hat - hyper.alpha0).sum() == pytest.approx(obs.T, abs=1e-9)
        assert np.all(np.diff(st.elbo_trace) >= -1e-9)
        for R in st.R_hat:
            assert np.linalg.eigvalsh(R).min() > 0

    def test_fixed_point(self):
        obs, hyper = random_problem(9, T=150)
        st = vc.cavi_fit(obs, hyper, vc.CAVIOptions(rel_tol=1e-12, param_tol=1e-10, max_sweeps=20000))
        assert vc.max_change(st, vc.cavi_sweep(obs, hyper, st)) < 1e-9

    def test_label_equivariance(self):
        obs, hyper = random_problem(10, K=3, T=200)
        perm = [2, 0, 1]
        phi0 = np.random.default_rng(3).dirichlet(np.ones(3), size=obs.T)
        opts = vc.CAVIOptions(max_sweeps=50)
        a = vc.cavi_fit(obs, hyper, opts, init_phi=phi0)
        b = vc.cavi_fit(obs, hyper.permuted(perm), opts, init_phi=phi0[:, perm])
        np.testing.assert_allclose(b.phi, a.phi[:, perm], atol=1e-9)
        np.testing.assert_allclose(b.mu_hat, a.mu_hat[perm], atol=1e-9)
        np.testing.assert_allclose(b.alpha_hat, a.alpha_hat[perm], atol=1e-9)

    def test_json_round_trip(self):
        obs, hyper = random_problem(12)
        st = vc.cavi_fit(obs, hyper)
        back = vc.state_from_json(vc.state_to_json(st))
        for f in ("phi", "mu_hat", "R_hat", "alpha_hat"):
            np.testing.assert_array_equal(getattr(back, f), getattr(st, f))
        assert back.elbo_trace == st.elbo_trace
        assert json.loads(vc.state_to_json(st))["version"] == 1


class TestPredictive:
    def test_single_cluster(self):
        obs, hyper = random_problem(13, K=1)
        st = vc.cavi_fit(obs, hyper)
        np.testing.assert_array_equal(vc.predictive_cluster_probs(obs.x[0], hyper, st), [1.0])

    def test_prior_weights_only(self):
        hyper = hand_hyper([0.9, 0.1], 2)
        st = hand_state([0.4, 0.4], [0.3, 0.3], [[1.0, 2.0], [5.0, 1.0]])
        np.testing.assert_allclose(vc.predictive_cluster_probs([2.0], hyper, st), [0.9, 0.1], atol=1e-15)

    def test_scalar_oracle(self):
        hyper = hand_hyper([0.5, 0.5], 2, J=3)
        st = hand_state([-1.0, 1.0], [0.1, 0.1], [[2.0, 1.0, 1.0], [1.0, 1.0, 4.0]])
        q = vc.predictive_cluster_probs([0.5], hyper, st)
        np.testing.assert_allclose(q, [0.26894142136999512075, 0.73105857863000487925], atol=1e-12)
        p = vc.predictive_category_probs([0.5], hyper, st)
        np.testing.assert_allclose(p, [0.25631380712333170692, 0.18907845178083292673,
                                       0.55460774109583536635], atol=1e-12)

    def test_dirichlet_mean(self):
        hyper = hand_hyper([1.0], 1, J=3)
        st = hand_state([0.0], [1.0], [[2.0, 1.0, 2.0]])
        np.testing.assert_allclose(vc.predictive_category_probs([0.0], hyper, st), [0.4, 0.2, 0.4])

    def test_shared_rows_ignore_x(self):
        hyper = hand_hyper([0.3, 0.7], 2, J=3)
        st = hand_state([-2.0, 2.0], [0.1, 0.2], [[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]])
        a = vc.predictive_category_probs([-3.0], hyper, st)
        b = vc.predictive_category_probs([3.0], hyper, st)
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_rejects_nonfinite(self):
        hyper = hand_hyper([1.0], 1)
        with pytest.raises(ValueError):
            vc.predictive_cluster_probs([np.nan], hyper, hand_state([0.0], [1.0], [[1.0, 1.0]]))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 100))
    def test_log_sum_exp_invariance(self, seed, scale):
        rng = np.random.default_rng(seed)
        K = int(rng.integers(2, 5))
        pi = rng.dirichlet(np.ones(K))
        scaled = pi * scale
        hyper = vc.VIHyperparams(pi, np.zeros((K, 1)), np.ones((K, 1, 1)), [[1.0]], np.ones((K, 2)))
        hyper2 = vc.VIHyperparams(scaled / scaled.sum(), np.zeros((K, 1)), np.ones((K, 1, 1)), [[1.0]],
                                  np.ones((K, 2)))
        st = hand_state(rng.normal(0, 3, K), rng.uniform(0.1, 1, K), rng.uniform(0.5, 3, (K, 2)))
        x = [float(rng.normal(0, 50))]
        q1 = vc.predictive_cluster_probs(x, hyper, st)
        q2 = vc.predictive_cluster_probs(x, hyper2, st)
        np.testing.assert_allclose(q1, q2, atol=1e-12)
        assert q1.sum() == pytest.approx(1.0, abs=1e-12)
        assert vc.predictive_category_probs(x, hyper, st).sum() == pytest.approx(1.0, abs=1e-12)
