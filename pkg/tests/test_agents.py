import numpy as np
import pytest

from bprlab import agents, bpr, envs, numerics
from bprlab.errors import ContractViolationError, RejectedInputError


def pm_dataset(n=600, seed=0, behavior="expert"):
    env = envs.PointMassEnv()
    return envs.generate_dataset(env, envs.pointmass_behavior(behavior, env), n, seed)


def fd_check_params(loss_fn, net, rel_tol=1e-5, n_coords=12, seed=0, h=1e-6):
    """loss_fn(model) -> (loss, grads in parameters() order)."""
    rng = np.random.default_rng(seed)
    _, grads = loss_fn(net)
    analytic = np.concatenate([g.ravel() for g in grads])
    flat = net.flat_parameters()
    idx = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
    for i in idx:
        def at(v):
            f = flat.copy()
            f[i] = v
            m = net.copy()
            m.set_flat_parameters(f)
            return loss_fn(m)[0]
        fd = (at(flat[i] + h) - at(flat[i] - h)) / (2 * h)
        denom = max(abs(fd), abs(analytic[i]), 1e-6)
        assert abs(fd - analytic[i]) / denom < rel_tol, f"coord {i}: {fd} vs {analytic[i]}"


class TestLossGradients:
    def setup_method(self):
        self.rng = np.random.default_rng(0)
        self.x = self.rng.normal(size=(8, 3))
        self.a = np.clip(self.rng.normal(size=(8, 2)), -0.9, 0.9)

    def _policy(self, net=None):
        return agents.PolicyModel(net) if net is not None else \
            agents.PolicyModel.build(3, 2, (6,), self.rng)

    def test_bc_gradients(self):
        pol = self._policy()
        fd_check_params(
            lambda m: agents.bc_loss_and_grads(agents.PolicyModel(m), self.x, self.a),
            pol.net)

    def test_td3bc_actor_gradients(self):
        pol = self._policy()
        q = agents.QModel.build(3, 2, (6,), self.rng)
        fd_check_params(
            lambda m: agents.td3bc_actor_loss_and_grads(
                agents.PolicyModel(m), q, self.x, self.a, lam=1.7),
            pol.net)

    def test_cql_actor_gradients(self):
        pol = self._policy()
        q = agents.QModel.build(3, 2, (6,), self.rng)
        fd_check_params(
            lambda m: agents.cql_actor_loss_and_grads(agents.PolicyModel(m), q, self.x),
            pol.net, rel_tol=1e-4)

    def test_critic_td_gradients(self):
        q = agents.QModel.build(3, 2, (6,), self.rng)
        target = self.rng.normal(size=8)
        fd_check_params(
            lambda m: agents.critic_td_loss_and_grads(agents.QModel(m), self.x, self.a, target),
            q.net, rel_tol=1e-4)

    def test_cql_critic_gradients(self):
        q = agents.QModel.build(3, 2, (6,), self.rng)
        target = self.rng.normal(size=8)
        cand = self.rng.uniform(-1, 1, size=(8, 4, 2))
        fd_check_params(
            lambda m: agents.cql_critic_loss_and_grads(
                agents.QModel(m), self.x, self.a, target, cand, alpha=0.8),
            q.net, rel_tol=1e-4)

    def test_cql_critic_alpha_zero_equals_td(self):
        q = agents.QModel.build(3, 2, (6,), self.rng)
        target = self.rng.normal(size=8)
        cand = self.rng.uniform(-1, 1, size=(8, 4, 2))
        l1, g1 = agents.critic_td_loss_and_grads(q, self.x, self.a, target)
        l2, g2 = agents.cql_critic_loss_and_grads(q, self.x, self.a, target, cand, alpha=0.0)
        assert abs(l1 - l2) < 1e-12
        for a, b in zip(g1, g2):
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_td3bc_lambda_zero_equals_bc(self):
        pol = self._policy()
        q = agents.QModel.build(3, 2, (6,), self.rng)
        l_bc, g_bc = agents.bc_loss_and_grads(pol, self.x, self.a)
        l_td, g_td = agents.td3bc_actor_loss_and_grads(pol, q, self.x, self.a, lam=0.0)
        assert abs(l_bc - l_td) < 1e-10
        for a, b in zip(g_bc, g_td):
            np.testing.assert_allclose(a, b, atol=1e-10)

    def test_cql_penalty_pushes_down_candidates(self):
        # minimizing the penalty raises Q at the data action, lowers elsewhere
        q = agents.QModel.build(3, 2, (6,), self.rng)
        cand = self.rng.uniform(-1, 1, size=(8, 6, 2))
        target = q.value(self.x, self.a)  # zero TD term
        _, grads = agents.cql_critic_loss_and_grads(q, self.x, self.a, target, cand, alpha=1.0)
        adam = numerics.AdamState.for_params(q.net.parameters(), learning_rate=1e-2)
        before_data = q.value(self.x, self.a).mean()
        before_cand = q.value(np.repeat(self.x, 6, axis=0), cand.reshape(-1, 2)).mean()
        for _ in range(200):
            _, grads = agents.cql_critic_loss_and_grads(q, self.x, self.a, target, cand, alpha=1.0)
            q.net.set_parameters(numerics.adam_step(adam, q.net.parameters(), grads))
        after_data = q.value(self.x, self.a).mean()
        after_cand = q.value(np.repeat(self.x, 6, axis=0), cand.reshape(-1, 2)).mean()
        assert (after_data - after_cand) > (before_data - before_cand) + 0.1


class TestFeatures:
    def test_reconstructs_q_value(self):
        rng = np.random.default_rng(0)
        q = agents.QModel.build(4, 2, (8, 8), rng)
        x = rng.normal(size=(16, 4))
        a = rng.normal(size=(16, 2))
        psi = agents.extract_features(q, x, a)
        last = q.net.layers[-1]
        recon = psi @ last.weight.T + last.bias
        np.testing.assert_allclose(recon[:, 0], q.value(x, a), atol=1e-12)

    def test_feature_dim(self):
        rng = np.random.default_rng(1)
        q = agents.QModel.build(4, 2, (8, 5), rng)
        assert q.feature_dim == 5

    def test_empty_batch_rejected(self):
        rng = np.random.default_rng(2)
        q = agents.QModel.build(2, 1, (4,), rng)
        with pytest.raises(RejectedInputError):
            agents.extract_features(q, np.zeros((0, 2)), np.zeros((0, 1)))


class TestEvaluation:
    def test_same_seed_same_returns(self):
        env = envs.PointMassEnv()
        fn = lambda s: np.array([0.1, -0.1])
        m1, s1, r1 = agents.evaluate_return(fn, env, 5, seed=3)
        m2, s2, r2 = agents.evaluate_return(fn, env, 5, seed=3)
        assert m1 == m2 and s1 == s2
        np.testing.assert_array_equal(r1, r2)

    def test_different_seed_differs(self):
        env = envs.PointMassEnv()
        fn = lambda s: np.array([0.1, -0.1])
        m1 = agents.evaluate_return(fn, env, 5, seed=3)[0]
        m2 = agents.evaluate_return(fn, env, 5, seed=4)[0]
        assert m1 != m2


class TestBehaviorCloning:
    def test_fits_expert(self):
        ds = pm_dataset(800)
        cfg = agents.AgentConfig(algorithm="bc", gradient_steps=600, batch_size=128,
                                 hidden=(32,), learning_rate=1e-3, eval_every=100)
        res = agents.train_bc(ds, cfg)
        s, a, _, _, _ = ds.arrays()
        pred = res.policy.act(s[:200])
        mse = float(np.mean(np.sum((pred - a[:200]) ** 2, axis=1)))
        assert mse < 0.05
        assert len(res.trace) == 6

    def test_with_frozen_encoder(self):
        ds = pm_dataset(300)
        enc, _, _, _ = bpr.pretrain(ds, bpr.PretrainConfig(
            steps=100, batch_size=64, repr_dim=8, encoder_hidden=(16,), predictor_hidden=(16,)))
        cfg = agents.AgentConfig(algorithm="bc", use_encoder=True, gradient_steps=50,
                                 batch_size=64, hidden=(16,))
        res = agents.train_bc(ds, cfg, enc)
        assert res.policy.net.input_dim == 8


class TestTd3bc:
    def test_frozen_encoder_unchanged(self):
        ds = pm_dataset(400)
        enc, _, _, _ = bpr.pretrain(ds, bpr.PretrainConfig(
            steps=50, batch_size=64, repr_dim=8, encoder_hidden=(16,), predictor_hidden=(16,)))
        before = enc.param_hash()
        cfg = agents.AgentConfig(algorithm="td3bc", use_encoder=True, gradient_steps=60,
                                 batch_size=64, hidden=(16,))
        agents.train_td3bc(ds, cfg, enc)
        assert enc.param_hash() == before

    def test_co_training_changes_encoder(self):
        ds = pm_dataset(400)
        cfg = agents.AgentConfig(algorithm="td3bc", use_encoder=True, co_train_encoder=True,
                                 gradient_steps=40, batch_size=64, hidden=(16,), repr_dim=8)
        res = agents.train_td3bc(ds, cfg, None, None)
        assert res.encoder is not None and not res.encoder.frozen
        fresh = bpr.build_encoder(4, 8, (16,), np.random.default_rng(cfg.seed))
        assert res.encoder.param_hash() != fresh.param_hash()

    def test_co_training_frozen_encoder_rejected(self):
        ds = pm_dataset(100)
        enc, _, _, _ = bpr.pretrain(ds, bpr.PretrainConfig(
            steps=1, batch_size=16, repr_dim=4, encoder_hidden=(8,), predictor_hidden=(8,)))
        cfg = agents.AgentConfig(algorithm="td3bc", use_encoder=True, co_train_encoder=True,
                                 gradient_steps=5, batch_size=16, hidden=(8,), repr_dim=4)
        with pytest.raises(ContractViolationError):
            agents.train_td3bc(ds, cfg, enc)

    def test_deterministic(self):
        ds = pm_dataset(300)
        cfg = agents.AgentConfig(algorithm="td3bc", gradient_steps=30, batch_size=32, hidden=(8,))
        r1 = agents.train_td3bc(ds, cfg)
        r2 = agents.train_td3bc(ds, cfg)
        np.testing.assert_array_equal(r1.policy.net.flat_parameters(),
                                      r2.policy.net.flat_parameters())

    def test_probe_snapshots(self):
        ds = pm_dataset(300)
        cfg = agents.AgentConfig(algorithm="td3bc", gradient_steps=40, batch_size=32, hidden=(8,))
        from bprlab.analysis import make_probe_batch
        pb = make_probe_batch(ds, 32)
        res = agents.train_td3bc(ds, cfg, probe_batch=pb, probe_every=20)
        assert [s for s, _ in res.psi_trace] == [0, 20, 40]
        assert res.psi_trace[0][1].shape == (32, 8)


class TestTabularCql:
    def make_chain(self):
        # 3-state deterministic chain: a1 advances (reward on reaching goal),
        # a0 stays; gamma 0.9
        t = np.zeros((3, 2, 3))
        t[0, 0, 0] = 1.0
        t[0, 1, 1] = 1.0
        t[1, 0, 1] = 1.0
        t[1, 1, 2] = 1.0
        t[2, :, 2] = 1.0
        r = np.zeros((3, 2))
        r[1, 1] = 1.0
        rho = np.array([1.0, 0.0, 0.0])
        terminal = np.array([False, False, True])
        return envs.TabularMDP(3, 2, t, r, rho, 0.9, 1.0, terminal)

    def test_alpha_zero_matches_exact_dp(self):
        mdp = self.make_chain()
        ds = envs.generate_tabular_dataset(mdp, envs.TabularPolicy.uniform(3, 2), 2000, seed=0)
        cfg = agents.AgentConfig(algorithm="cql", gamma=0.9, cql_alpha=0.0,
                                 gradient_steps=4000, learning_rate=2e-2, cql_target_every=50)
        res = agents.train_cql(ds, cfg, tabular_shape=(3, 2))
        _, q_star, _ = envs.value_iteration(mdp)
        np.testing.assert_allclose(res.q[:2], q_star[:2], atol=0.05)

    def test_alpha_positive_is_pessimistic_on_rare_actions(self):
        mdp = self.make_chain()
        beh = envs.TabularPolicy(np.array([[0.95, 0.05], [0.95, 0.05], [0.5, 0.5]]))
        ds = envs.generate_tabular_dataset(mdp, beh, 2000, seed=0)
        cfg0 = agents.AgentConfig(algorithm="cql", gamma=0.9, cql_alpha=0.0,
                                  gradient_steps=3000, learning_rate=2e-2)
        cfg1 = agents.AgentConfig(algorithm="cql", gamma=0.9, cql_alpha=2.0,
                                  gradient_steps=3000, learning_rate=2e-2)
        q0 = agents.train_cql(ds, cfg0, tabular_shape=(3, 2)).q
        q1 = agents.train_cql(ds, cfg1, tabular_shape=(3, 2)).q
        # the rarely-taken advancing action is pushed down hardest
        assert q1[0, 1] < q0[0, 1] - 0.05

    def test_j_perp_formula(self):
        res = agents.TabularCQLResult(np.array([[1.0, 3.0], [0.0, 2.0]]),
                                      envs.TabularPolicy.uniform(2, 2), [])
        probs = np.array([[0.5, 0.5], [1.0, 0.0]])
        rho = np.array([0.25, 0.75])
        assert res.j_perp(probs, rho) == 0.25 * 2.0 + 0.75 * 0.0

    def test_greedy_policy_recovers_optimum(self):
        mdp = self.make_chain()
        ds = envs.generate_tabular_dataset(mdp, envs.TabularPolicy.uniform(3, 2), 2000, seed=1)
        cfg = agents.AgentConfig(algorithm="cql", gamma=0.9, cql_alpha=0.5,
                                 gradient_steps=4000, learning_rate=2e-2)
        res = agents.train_cql(ds, cfg, tabular_shape=(3, 2))
        assert res.policy.probs[0, 1] == 1.0 and res.policy.probs[1, 1] == 1.0

    def test_j_perp_lower_bounds_true_value(self):
        # conservative values of the returned greedy policy never exceed its
        # exact value by more than the fitting-error allowance
        mdp = envs.make_gridworld()
        _, _, greedy = envs.value_iteration(mdp)
        behavior = envs.epsilon_greedy_policy(greedy, 0.3)
        for seed in range(5):
            ds = envs.generate_tabular_dataset(mdp, behavior, 2000, seed=seed)
            cfg = agents.AgentConfig(algorithm="cql", gamma=mdp.discount, cql_alpha=1.0,
                                     gradient_steps=4000, learning_rate=1e-2, seed=seed)
            res = agents.train_cql(ds, cfg, tabular_shape=(25, 4))
            j_perp = res.j_perp(res.policy.probs, mdp.initial_dist)
            _, j_exact = envs.evaluate_policy_exact(mdp, res.policy)
            assert j_perp <= j_exact + 0.1

    def test_nonpositive_temperature_rejected(self):
        mdp = self.make_chain()
        ds = envs.generate_tabular_dataset(mdp, envs.TabularPolicy.uniform(3, 2), 100, seed=0)
        cfg = agents.AgentConfig(algorithm="cql", gamma=0.9, cql_temp=0.0)
        with pytest.raises(RejectedInputError):
            agents.train_cql(ds, cfg, tabular_shape=(3, 2))


class TestSpibb:
    def setup_method(self):
        self.mdp = envs.make_gridworld()
        _, _, greedy = envs.value_iteration(self.mdp)
        self.behavior = envs.epsilon_greedy_policy(greedy, 0.4)
        self.ds = envs.generate_tabular_dataset(self.mdp, self.behavior, 4000, seed=0)

    def test_infinite_threshold_copies_behavior_estimate(self):
        cfg = agents.AgentConfig(algorithm="spibb", gamma=0.95, n_wedge=np.inf)
        res = agents.train_spibb_tabular(self.ds, 25, 4, cfg)
        np.testing.assert_array_equal(res.policy.probs, res.behavior_estimate.probs)

    def test_zero_threshold_solves_empirical_mdp(self):
        cfg = agents.AgentConfig(algorithm="spibb", gamma=0.95, n_wedge=0.0)
        res = agents.train_spibb_tabular(self.ds, 25, 4, cfg)
        _, _, greedy_hat = envs.value_iteration(res.empirical_mdp)
        _, j_greedy = envs.evaluate_policy_exact(res.empirical_mdp, greedy_hat)
        assert abs(res.j_hat_out - j_greedy) < 1e-8

    def test_estimated_improvement_nonnegative(self):
        cfg = agents.AgentConfig(algorithm="spibb", gamma=0.95, n_wedge=10.0)
        res = agents.train_spibb_tabular(self.ds, 25, 4, cfg)
        assert res.j_hat_out >= res.j_hat_behavior - 1e-9

    def test_constrained_pairs_copy_behavior(self):
        cfg = agents.AgentConfig(algorithm="spibb", gamma=0.95, n_wedge=10.0)
        res = agents.train_spibb_tabular(self.ds, 25, 4, cfg)
        low = res.counts < 10.0
        np.testing.assert_allclose(res.policy.probs[low],
                                   res.behavior_estimate.probs[low], atol=1e-12)


class TestTraceCsv:
    def test_writes_known_columns(self, tmp_path):
        rows = [{"step": 0, "critic_loss": 1.5, "extra": "ignored"},
                {"step": 10, "eval_return_mean": -2.0}]
        path = str(tmp_path / "t.csv")
        agents.write_trace_csv(rows, path)
        lines = open(path).read().splitlines()
        assert lines[0] == ",".join(agents.TRACE_COLUMNS)
        assert lines[1].startswith("0,1.5")
        assert len(lines) == 3


class TestConfigValidation:
    def test_unknown_algorithm_rejected(self):
        with pytest.raises(RejectedInputError):
            agents.AgentConfig(algorithm="dqn")

    def test_co_train_requires_encoder(self):
        with pytest.raises(RejectedInputError):
            agents.AgentConfig(co_train_encoder=True, use_encoder=False)
