import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbm.env import TransitionBatch
from cbm.nn import gradient_check
from cbm.trainer import (CbmConfig, CbmState, activation_pattern, bisim_distance_matrix,
                         cbm_loss, cbm_loss_and_grads, compute_codes, cpc_dynamics_loss,
                         cpc_loss_and_grads, losses_and_grads, predict_assignments,
                         prototype_reward_estimate, prototype_reward_update, train_step)

SMALL = dict(n_prototypes=6, batch_size=8, latent_dim=5, hidden_dim=12)


def small_state(seed=0, obs_dim=7, n_actions=3, **overrides):
    cfg = CbmConfig(**{**SMALL, "seed": seed, **overrides})
    rng = np.random.default_rng([seed, 99])
    obs = rng.normal(size=(40, obs_dim))
    return CbmState(cfg, obs_dim, n_actions, rng.uniform(size=40), obs)


def random_batch(seed, n=8, obs_dim=7, n_actions=3):
    rng = np.random.default_rng(seed)
    return TransitionBatch(rng.normal(size=(n, obs_dim)), rng.integers(n_actions, size=n),
                           rng.uniform(size=n), rng.normal(size=(n, obs_dim)))


class TestPredictAssignments:
    def test_two_prototype_example(self):
        p = predict_assignments(np.array([[1.0, 0.0]]), np.eye(2), 0.1)
        np.testing.assert_allclose(p[:, 0], [0.9999546021, 4.539786870e-5], rtol=1e-8)

    def test_columns_sum_to_one(self):
        rng = np.random.default_rng(0)
        p = predict_assignments(rng.normal(size=(9, 4)), rng.normal(size=(5, 4)), 0.1)
        np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=1e-12)

    def test_scale_invariant(self):
        rng = np.random.default_rng(1)
        z, c = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
        np.testing.assert_allclose(predict_assignments(3.0 * z, 0.2 * c, 0.1),
                                   predict_assignments(z, c, 0.1), atol=1e-12)

    def test_zero_latent_rejected(self):
        with pytest.raises(ValueError):
            predict_assignments(np.zeros((1, 2)), np.eye(2), 0.1)


class TestRewardEstimate:
    def test_worked_example(self):
        codes = np.array([[1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0]])
        est = prototype_reward_estimate(codes, np.array([1.0, 0.5, 0.0, 0.2]))
        np.testing.assert_allclose(est, [0.75, 0.1])

    def test_one_hot_codes_give_cluster_means(self):
        rng = np.random.default_rng(0)
        labels = np.repeat(np.arange(4), 5)
        codes = np.eye(4)[labels].T
        rewards = rng.uniform(size=20)
        means = [rewards[labels == k].mean() for k in range(4)]
        np.testing.assert_allclose(prototype_reward_estimate(codes, rewards, row_tol=1e-12),
                                   means)

    def test_empty_row_is_nan_and_leaves_reward(self):
        codes = np.array([[1.0, 1.0], [0.0, 0.0]])
        est = prototype_reward_estimate(codes, np.array([0.2, 0.4]))
        assert np.isnan(est[1])
        np.testing.assert_allclose(prototype_reward_update([0.5, 0.7], est, 0.5), [0.4, 0.7])

    def test_row_marginal_check(self):
        with pytest.raises(ValueError):
            prototype_reward_estimate(np.array([[1.0, 1.0], [0.0, 0.0]]), np.zeros(2), row_tol=1e-6)

    def test_ema_example(self):
        assert prototype_reward_update([0.5], [1.0], 0.01)[0] == pytest.approx(0.505)

    def test_ema_converges_geometrically(self):
        r = np.array([0.0])
        for t in range(1, 201):
            r = prototype_reward_update(r, [0.8], 0.05)
            assert r[0] == pytest.approx(0.8 * (1 - 0.95 ** t), abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000), beta=st.floats(0.0, 1.0))
    def test_estimates_and_ema_stay_in_unit_interval(self, seed, beta):
        rng = np.random.default_rng(seed)
        codes = rng.dirichlet(np.ones(4), size=10).T
        est = prototype_reward_estimate(codes, rng.uniform(size=10))
        r = prototype_reward_update(rng.uniform(size=4), est, beta)
        assert np.all((est >= 0) & (est <= 1)) and np.all((r >= 0) & (r <= 1))


class TestDistanceMatrix:
    def test_matches_naive_loop(self):
        rng = np.random.default_rng(0)
        zn, cn = rng.normal(size=(5, 3)), rng.normal(size=(4, 3))
        r, rc = rng.uniform(size=5), rng.uniform(size=4)
        d = bisim_distance_matrix(zn, r, rc, cn, reward_weight=0.5, transition_weight=2.0)
        for k in range(4):
            for i in range(5):
                expected = 0.5 * abs(r[i] - rc[k]) + 2.0 * np.linalg.norm(zn[i] - cn[k])
                assert d[k, i] == pytest.approx(expected, abs=1e-12)

    def test_normalized_transition_term_is_chordal(self):
        zn = np.array([[2.0, 0.0]])
        cn = np.array([[0.0, 5.0], [3.0, 0.0]])
        d = bisim_distance_matrix(zn, [0.0], [0.0, 0.0], cn, normalized=True)
        np.testing.assert_allclose(d[:, 0], [np.sqrt(2.0), 0.0], atol=1e-12)

    def test_non_finite_latents_rejected(self):
        with pytest.raises(ValueError):
            bisim_distance_matrix(np.array([[np.nan]]), [0.0], [0.0], np.zeros((1, 1)))


class TestLosses:
    def test_uniform_prediction_gives_log_k(self):
        k, b = 5, 3
        p = np.full((k, b), 1 / k)
        assert cbm_loss(p, np.eye(k)[:, :b]) == pytest.approx(np.log(k))

    def test_cbm_loss_matches_naive_loop(self):
        rng = np.random.default_rng(2)
        z, c = rng.normal(size=(4, 3)), rng.normal(size=(6, 3))
        q = rng.dirichlet(np.ones(6), size=4).T
        loss = cbm_loss_and_grads(z, c, q, 0.1)[0]
        naive = 0.0
        for i in range(4):
            logits = [z[i] @ c[k] / np.linalg.norm(z[i]) / np.linalg.norm(c[k]) / 0.1
                      for k in range(6)]
            logz = np.log(np.sum(np.exp(logits)))
            naive -= sum(q[k, i] * (logits[k] - logz) for k in range(6))
        assert loss == pytest.approx(naive / 4, rel=1e-12)
        assert loss == pytest.approx(cbm_loss(predict_assignments(z, c, 0.1), q), rel=1e-12)

    def test_cpc_single_sample_is_zero(self):
        assert cpc_dynamics_loss(np.array([[1.0, 2.0]]), np.array([[0.3, 0.1]]), 0.1) == 0.0

    def test_cpc_orthogonal_example(self):
        loss = cpc_dynamics_loss(np.eye(2), np.eye(2), 0.1)
        assert loss == pytest.approx(np.log1p(np.exp(-10.0)), rel=1e-10)

    def test_cpc_invariant_to_joint_permutation(self):
        rng = np.random.default_rng(3)
        a, t = rng.normal(size=(2, 6, 4))
        perm = rng.permutation(6)
        assert cpc_dynamics_loss(a[perm], t[perm], 0.2) == pytest.approx(
            cpc_dynamics_loss(a, t, 0.2), rel=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_loss_gradients_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        z, c = rng.normal(size=(5, 4)), rng.normal(size=(3, 4))
        q = rng.dirichlet(np.ones(3), size=5).T
        _, gz, gc = cbm_loss_and_grads(z, c, q, 0.3)
        assert gradient_check([z, c], lambda: cbm_loss_and_grads(z, c, q, 0.3)[0],
                              [gz, gc]).passed
        a, t = rng.normal(size=(2, 5, 4))
        _, ga, gt = cpc_loss_and_grads(a, t, 0.3)
        assert gradient_check([a, t], lambda: cpc_dynamics_loss(a, t, 0.3), [ga, gt]).passed


class TestCbmState:
    def test_latent_init_needs_observations(self):
        with pytest.raises(ValueError):
            CbmState(CbmConfig(**SMALL), 7, 3, np.ones(10))

    def test_latent_init_places_prototypes_on_encodings(self):
        state = small_state()
        norms = np.linalg.norm(state.prototypes.vectors, axis=1)
        assert np.all(norms > 0) and state.prototypes.vectors.shape == (6, 5)

    def test_sphere_init_is_unit_norm(self):
        state = CbmState(CbmConfig(**SMALL, prototype_init="sphere"), 7, 3, np.ones(10))
        np.testing.assert_allclose(np.linalg.norm(state.prototypes.vectors, axis=1), 1.0,
                                   atol=1e-6)

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            CbmConfig(temperature=0.0).validate()
        with pytest.raises(ValueError):
            CbmConfig(objective="other").validate()


class TestTrainStep:
    def test_full_gradient_matches_finite_differences(self):
        state = small_state(dtype="float64")
        batch = random_batch(1)
        codes = compute_codes(state, batch)[0]
        _, _, _, grads = losses_and_grads(state, batch, codes)
        report = gradient_check(state.params, lambda: losses_and_grads(state, batch, codes)[2],
                                grads, max_entries=15, rng=np.random.default_rng(0),
                                names=state.param_names,
                                pattern_fn=lambda: activation_pattern(state, batch))
        assert report.passed, report.per_tensor

    def test_term_gradients_add_up(self):
        state = small_state(dtype="float64")
        batch = random_batch(2)
        codes = compute_codes(state, batch)[0]
        l_cbm, l_dyn, total, g_total = losses_and_grads(state, batch, codes)
        _, _, only_cbm, g_cbm = losses_and_grads(state, batch, codes, term="cbm")
        _, _, only_dyn, g_dyn = losses_and_grads(state, batch, codes, term="dyn")
        assert (only_cbm, only_dyn, total) == (l_cbm, l_dyn, pytest.approx(l_cbm + l_dyn))
        for a, b, c in zip(g_total, g_cbm, g_dyn):
            np.testing.assert_allclose(a, b + c, atol=1e-12)
        # L_CBM does not touch the dynamics model; L_P does not touch prototypes
        assert all(np.all(g == 0) for g in g_cbm[-len(state.dynamics.params):])
        assert np.all(g_dyn[len(state.encoder.params)] == 0)

    def test_dynamics_only_total_is_cpc(self):
        state = small_state(objective="dynamics_only", dtype="float64")
        batch = random_batch(2)
        codes = compute_codes(state, batch)[0]
        _, l_dyn, total, grads = losses_and_grads(state, batch, codes)
        _, _, _, g_dyn = losses_and_grads(state, batch, codes, term="dyn")
        assert total == l_dyn
        for a, b in zip(grads, g_dyn):
            np.testing.assert_array_equal(a, b)

    def test_zero_beta_freezes_prototype_rewards(self):
        state = small_state(reward_ema=0.0)
        before = state.prototypes.rewards.copy()
        for s in range(3):
            train_step(state, random_batch(s))
        np.testing.assert_array_equal(state.prototypes.rewards, before)

    def test_zero_learning_rate_keeps_weights_but_updates_rewards(self):
        state = small_state(learning_rate=0.0, reward_ema=0.5)
        weights = [p.copy() for p in state.params]
        rewards = state.prototypes.rewards.copy()
        train_step(state, random_batch(0))
        for a, b in zip(weights, state.params):
            np.testing.assert_array_equal(a, b)
        assert not np.array_equal(rewards, state.prototypes.rewards)

    def test_sgd_on_frozen_batch_and_codes_reduces_loss(self):
        state = small_state(optimizer="sgd", learning_rate=1e-3, dtype="float64")
        batch = random_batch(5)
        codes = compute_codes(state, batch)[0]
        losses = []
        for _ in range(50):
            _, _, total, grads = losses_and_grads(state, batch, codes)
            losses.append(total)
            state.optimizer.step(grads)
            state.mark_updated()
        assert np.all(np.diff(losses) <= 1e-12)

    def test_dynamics_only_leaves_prototypes_fixed(self):
        state = small_state(objective="dynamics_only", optimizer="sgd", learning_rate=1e-2)
        vectors = state.prototypes.vectors.copy()
        train_step(state, random_batch(0))
        np.testing.assert_array_equal(state.prototypes.vectors, vectors)

    def test_step_record(self):
        state = small_state()
        rec = train_step(state, random_batch(0))
        assert rec.step == 1 and state.step == 1
        assert rec.usage.sum() == 8 and 0 <= rec.code_entropy <= np.log(6) + 1e-12
        assert np.isfinite(rec.loss_cbm) and np.isfinite(rec.loss_dyn)

    def test_training_is_deterministic(self):
        def run():
            state = small_state(seed=4)
            records = [train_step(state, random_batch(s)) for s in range(5)]
            return [dataclasses.astuple(r)[:4] for r in records], state.params

        (ra, pa), (rb, pb) = run(), run()
        assert ra == rb
        for a, b in zip(pa, pb):
            np.testing.assert_array_equal(a, b)
