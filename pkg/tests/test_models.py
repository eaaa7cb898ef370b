import math

import numpy as np
import pytest

from trajstitch.data import Dataset, Trajectory
from trajstitch.envs import dp_value_oracle, env_step, generate_mixed_dataset, make_env, rollout
from trajstitch.models import (
    EnvModels, ForwardConfig, ForwardEnsemble, InverseConfig, Normalizer, RewardConfig, ValueConfig,
    clip_weights, gate_from_log_densities, generate_action, kl_to_prior, likelihood_gate, load_models,
    member_log_density, predict_reward, save_models, train_forward_ensemble, train_inverse_cvae,
    train_reward_model, train_value, value,
)
from trajstitch.nn import AdamHyper, MLPSpec, MLPState, Net, loss_and_grad, make_net, step_nets

SMALL_FWD = ForwardConfig(hidden=(32, 32), n_members=7, n_keep=5, epochs=40, batch_size=64, lr=3e-3)


def _pairs_dataset(S, S2, chunk=20):
    """Transitions packed into fixed-length trajectories with zero actions."""
    trajs = []
    for k, start in enumerate(range(0, len(S), chunk)):
        s, s2 = S[start:start + chunk], S2[start:start + chunk]
        n = len(s)
        trajs.append(Trajectory(k, s, np.zeros((n, 1)), np.zeros(n), s2, np.zeros(n, dtype=bool)))
    return Dataset(trajs, (S.shape[1], 1))


def _fixed_member(bias_mean, log_std):
    """Input-independent Gaussian member: offset ``bias_mean``, log-std ``log_std``."""
    d = len(bias_mean)
    spec = MLPSpec((d, d), "identity", "gaussian")
    params = np.concatenate([np.zeros(d * 2 * d), bias_mean, log_std])
    return Net(spec, MLPState.from_params(params))


def _ensemble(members):
    d = members[0].spec.in_width
    return ForwardEnsemble(members, [0.0] * len(members), Normalizer.identity(d), Normalizer.identity(d),
                           len(members), list(range(len(members))))


@pytest.fixture(scope="module")
def pointmass_data():
    env = make_env("pointmass")
    return env, generate_mixed_dataset(env, 10, 100, 1.0, seed=0), generate_mixed_dataset(env, 10, 30, 1.0, seed=1)


@pytest.fixture(scope="module")
def inverse_model(pointmass_data):
    _, train, _ = pointmass_data
    return train_inverse_cvae(train, InverseConfig(hidden=(64, 64), epochs=150, lr=1e-3, batch_size=100), 1.0)


class TestForwardEnsemble:
    def test_linear_system_beats_constant_baseline(self):
        rng = np.random.default_rng(0)
        A = np.array([[0.9, 0.2], [-0.1, 0.8]])
        S = rng.uniform(-1, 1, (400, 2))
        ens = train_forward_ensemble(_pairs_dataset(S, S @ A.T), SMALL_FWD)
        assert len(ens.members) == 5 and ens.trained_count == 7
        T = rng.uniform(-1, 1, (100, 2))
        T2 = T @ A.T
        mean, var = (S @ A.T).mean(axis=0), (S @ A.T).var(axis=0)
        base = np.mean(-0.5 * np.sum((T2 - mean) ** 2 / var + np.log(2 * np.pi * var), axis=1))
        member_ll = np.mean(member_log_density(ens, T, T2), axis=1)
        assert np.all(member_ll > base)

    def test_retains_best_members_in_order(self):
        rng = np.random.default_rng(1)
        S = rng.uniform(-1, 1, (200, 2))
        ens = train_forward_ensemble(_pairs_dataset(S, 0.5 * S), SMALL_FWD)
        assert ens.val_nll == sorted(ens.val_nll)
        assert len(set(ens.seeds)) == 5
        again = train_forward_ensemble(_pairs_dataset(S, 0.5 * S), SMALL_FWD)
        assert again.seeds == ens.seeds and again.val_nll == ens.val_nll

    def test_identical_transitions(self):
        s, s2 = np.array([0.2, -0.3]), np.array([0.5, 0.1])
        ens = train_forward_ensemble(_pairs_dataset(np.tile(s, (60, 1)), np.tile(s2, (60, 1))), SMALL_FWD)
        mu, _ = ens.predict(s)
        assert np.max(np.abs(mu[:, 0] - s2)) < 1e-2

    def test_two_modes_give_larger_variance(self):
        rng = np.random.default_rng(2)
        S = rng.uniform(-1, 1, (400, 2))
        noise = 0.05 * rng.standard_normal((400, 2))
        signs = np.where(rng.random(400) < 0.5, -1.0, 1.0)[:, None]
        one = train_forward_ensemble(_pairs_dataset(S, S + 0.5 + noise), SMALL_FWD)
        two = train_forward_ensemble(_pairs_dataset(S, S + 0.5 * signs + noise), SMALL_FWD)
        probe = rng.uniform(-0.8, 0.8, (50, 2))
        assert np.mean(two.predict(probe)[1]) > np.mean(one.predict(probe)[1])

    def test_too_small_dataset(self):
        S = np.zeros((10, 2))
        with pytest.raises(ValueError):
            train_forward_ensemble(_pairs_dataset(S, S), SMALL_FWD)


class TestDensityAndGate:
    def test_unit_gaussian_at_mean(self):
        ens = _ensemble([_fixed_member(np.array([0.1, -0.2]), np.zeros(2))])
        s = np.array([1.0, 2.0])
        lp = member_log_density(ens, s, s + np.array([0.1, -0.2]))
        assert abs(lp[0] - (-math.log(2 * math.pi))) < 1e-12

    def test_density_falls_with_distance(self):
        ens = _ensemble([_fixed_member(np.zeros(2), np.array([0.3, -0.5]))])
        s = np.zeros(2)
        u = np.array([0.6, 0.8])
        lps = [member_log_density(ens, s, s + t * u)[0] for t in np.linspace(0, 3, 20)]
        assert np.all(np.diff(lps) < 0)

    def test_matches_scalar_formula(self):
        rng = np.random.default_rng(3)
        members = [make_net(MLPSpec((3, 8, 3), "tanh", "gaussian"), rng) for _ in range(4)]
        ens = ForwardEnsemble(members, [0.0] * 4, Normalizer(rng.standard_normal(3), rng.uniform(0.5, 2, 3)),
                              Normalizer(rng.standard_normal(3), rng.uniform(0.5, 2, 3)), 4, [0, 1, 2, 3])
        for _ in range(100):
            s, s2 = rng.standard_normal(3), rng.standard_normal(3)
            mu, std = ens.predict(s)
            got = member_log_density(ens, s, s2)
            for i in range(4):
                expected = sum(-0.5 * ((s2[j] - mu[i, 0, j]) / std[i, 0, j]) ** 2 - math.log(std[i, 0, j])
                               - 0.5 * math.log(2 * math.pi) for j in range(3))
                assert abs(got[i] - expected) < 1e-10

    def test_gate_false_for_identical_candidate(self):
        rng = np.random.default_rng(4)
        ens = _ensemble([_fixed_member(rng.standard_normal(2), rng.uniform(-1, 1, 2)) for _ in range(5)])
        for _ in range(50):
            s, x = rng.standard_normal(2), rng.standard_normal(2)
            assert not likelihood_gate(ens, s, x, x)

    def test_gate_single_member_doubled_density(self):
        assert gate_from_log_densities(np.log([[1.0]]), np.log([0.5]))[0]
        ens = _ensemble([_fixed_member(np.zeros(2), np.zeros(2))])
        s = np.zeros(2)
        orig = np.array([1.5, 0.0])
        # density ratio exp(-(r_c^2 - r_o^2)/2) = 2
        cand = np.array([math.sqrt(1.5 ** 2 - 2 * math.log(2)) + 1e-9, 0.0])
        assert likelihood_gate(ens, s, orig, cand)

    def test_gate_hand_case(self):
        cand = np.log(np.array([[0.3], [0.5]]))
        orig = np.log(np.array([0.1, 0.9]))
        assert not gate_from_log_densities(cand, orig)[0]

    def test_gate_scale_invariant(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            cand, orig = rng.normal(0, 3, (5, 4)), rng.normal(0, 3, 5)
            shift = rng.normal(0, 50)
            assert np.array_equal(gate_from_log_densities(cand, orig),
                                  gate_from_log_densities(cand + shift, orig + shift))

    def test_gate_survives_underflow(self):
        cand = np.full((3, 1), -2000.0)
        orig = np.array([-2001.0, -2002.0, -2003.0])
        assert gate_from_log_densities(cand, orig)[0]


class TestInverse:
    def test_kl_to_prior(self):
        assert kl_to_prior(np.zeros(3), np.ones(3))[0] == 0.0
        assert abs(kl_to_prior(np.array([1.0]), np.array([1.0]))[0] - 0.5) < 1e-15

    def test_elbo_decreases(self, inverse_model):
        h = inverse_model.history
        assert np.mean(h[-5:]) < np.mean(h[:5])

    def test_held_out_actions_recovered(self, pointmass_data, inverse_model):
        _, _, test = pointmass_data
        arr = test.arrays()
        pred = generate_action(inverse_model, arr["states"], arr["next_states"])
        assert np.max(np.abs(pred - arr["actions"])) < 0.1

    def test_env_step_lands_near_target(self, pointmass_data, inverse_model):
        env, _, test = pointmass_data
        for t in test.trajectories[:5]:
            for s, s2 in zip(t.states, t.next_states):
                got, _, _ = env_step(env, s, generate_action(inverse_model, s, s2))
                assert np.linalg.norm(got - s2) < 0.1

    def test_prior_mean_is_deterministic(self, inverse_model):
        s, s2 = np.array([1.0, 0.5, -0.2, 0.1]), np.array([0.98, 0.51, -0.25, 0.08])
        a, b = generate_action(inverse_model, s, s2), generate_action(inverse_model, s, s2)
        assert a.tobytes() == b.tobytes()

    def test_sample_mode_is_seeded(self, inverse_model):
        s, s2 = np.zeros(4), np.array([0.0, 0.0, 0.05, 0.0])
        a = generate_action(inverse_model, s, s2, "sample", np.random.default_rng(7))
        b = generate_action(inverse_model, s, s2, "sample", np.random.default_rng(7))
        assert np.array_equal(a, b)
        with pytest.raises(ValueError):
            generate_action(inverse_model, s, s2, "sample")
        with pytest.raises(ValueError):
            generate_action(inverse_model, s, s2, "mode")

    def test_actions_within_bounds(self, inverse_model):
        rng = np.random.default_rng(8)
        S, S2 = rng.normal(0, 5, (1000, 4)), rng.normal(0, 5, (1000, 4))
        for mode in ("prior_mean", "sample"):
            a = generate_action(inverse_model, S, S2, mode, rng)
            assert np.max(np.abs(a)) <= 1.0


class TestReward:
    def test_constant_reward_fit(self, pointmass_data):
        _, train, _ = pointmass_data
        const = Dataset([Trajectory(t.id, t.states, t.actions, np.ones(len(t)), t.next_states, t.terminals)
                         for t in train.trajectories], train.dims)
        m = train_reward_model(const, RewardConfig(kind="mlp", hidden=(32, 32), epochs=10, lr=1e-3))
        arr = const.arrays()
        r = predict_reward(m, arr["states"], arr["actions"], arr["next_states"])
        assert np.max(np.abs(r - 1.0)) < 1e-3

    def test_mlp_held_out_mse(self, pointmass_data):
        _, train, test = pointmass_data
        m = train_reward_model(train, RewardConfig(kind="mlp", hidden=(64, 64), epochs=30, lr=1e-3))
        arr = test.arrays()
        r = predict_reward(m, arr["states"], arr["actions"], arr["next_states"])
        assert np.mean((r - arr["rewards"]) ** 2) < 1e-2

    def test_gaussian_worse_than_mlp_out_of_distribution(self, pointmass_data):
        _, train, _ = pointmass_data
        shifted = generate_mixed_dataset(make_env("pointmass", start_radius=4.0), 10, 30, 1.0, seed=2).arrays()
        mse = {}
        for kind in ("mlp", "gaussian"):
            m = train_reward_model(train, RewardConfig(kind=kind, hidden=(64, 64), epochs=30, lr=1e-3))
            r = predict_reward(m, shifted["states"], shifted["actions"], shifted["next_states"])
            mse[kind] = np.mean((r - shifted["rewards"]) ** 2)
        assert mse["gaussian"] > mse["mlp"]

    @pytest.mark.parametrize("kind", ["wgan", "mlp", "gaussian", "vae"])
    def test_every_kind_predicts_deterministically(self, pointmass_data, kind):
        _, train, test = pointmass_data
        m = train_reward_model(train, RewardConfig(kind=kind, hidden=(16,), epochs=2, lr=1e-3))
        arr = test.arrays()
        a = predict_reward(m, arr["states"], arr["actions"], arr["next_states"])
        b = predict_reward(m, arr["states"], arr["actions"], arr["next_states"])
        assert a.shape == (test.n_transitions,) and np.array_equal(a, b)
        one = predict_reward(m, arr["states"][0], arr["actions"][0], arr["next_states"][0])
        assert isinstance(one, float)

    def test_unknown_kind(self, pointmass_data):
        with pytest.raises(ValueError):
            train_reward_model(pointmass_data[1], RewardConfig(kind="tree"))

    def test_wgan_critic_stays_clipped(self, pointmass_data):
        _, train, _ = pointmass_data
        m = train_reward_model(train, RewardConfig(kind="wgan", hidden=(16, 16), epochs=2, lr=1e-2, clip=0.01))
        assert np.max(np.abs(m.nets["discriminator"].params)) <= 0.01

    def test_clip_after_each_update(self):
        rng = np.random.default_rng(9)
        disc = make_net(MLPSpec((3, 8, 1)), rng)
        clip_weights(disc, 0.05)
        hyper = AdamHyper(lr=0.1)
        for _ in range(20):
            batch = {"real": rng.standard_normal((16, 3)), "fake": rng.standard_normal((16, 3)) + 1}
            _, grad = loss_and_grad(disc, batch, "wgan_disc")
            step_nets([disc], grad, hyper)
            clip_weights(disc, 0.05)
            assert np.max(np.abs(disc.params)) <= 0.05


def _chain_dataset(p_right, n_traj=200, seed=0):
    env = make_env("chain")
    rng = np.random.default_rng(seed)

    def behaviour(s):
        return np.array([1.0 if rng.random() < p_right[int(np.argmax(s))] else -1.0])

    return env, Dataset([rollout(env, behaviour, env.starts[0], traj_id=k) for k in range(n_traj)], env.dims)


class TestValue:
    def test_zero_reward(self, pointmass_data):
        _, train, _ = pointmass_data
        zero = Dataset([Trajectory(t.id, t.states, t.actions, np.zeros(len(t)), t.next_states, t.terminals)
                        for t in train.trajectories], train.dims)
        vf = train_value(zero, ValueConfig(hidden=(32, 32), epochs=10))
        assert np.max(np.abs(value(vf, zero.arrays()["states"]))) < 0.05

    def test_chain_matches_dp(self):
        p = np.array([0.3, 0.6, 0.7, 0.8, 0.5])
        env, ds = _chain_dataset(p)
        vf = train_value(ds, ValueConfig(hidden=(32, 32), gamma=0.9, epochs=60, lr=1e-3, batch_size=64,
                                         target_every=50))
        exact = dp_value_oracle(env, np.stack([1 - p, p], axis=1))
        assert np.max(np.abs(value(vf, np.eye(5)[:4]) - exact[:4])) < 0.05

    def test_min_of_twins(self, pointmass_data):
        _, train, _ = pointmass_data
        vf = train_value(train, ValueConfig(hidden=(16,), epochs=3))
        S = np.random.default_rng(0).normal(0, 3, (500, 4))
        twins = vf.twin_values(S)
        v = value(vf, S)
        assert np.all(v <= twins[0]) and np.all(v <= twins[1])
        assert np.array_equal(v, np.minimum(twins[0], twins[1]))
        assert isinstance(vf(S[0]), float)

    def test_residual_decreases_over_windows(self, pointmass_data):
        _, train, _ = pointmass_data
        vf = train_value(train, ValueConfig(hidden=(64, 64), gamma=0.99, epochs=30, lr=3e-4))
        windows = np.array(vf.residuals).reshape(-1, 5).mean(axis=1)
        assert np.all(np.diff(windows) <= 0)

    def test_terminal_targets_are_reward_only(self):
        # single terminal step with r = 1: V(s) -> 1 regardless of V(s')
        s = np.tile([[0.0, 1.0]], (64, 1))
        trajs = [Trajectory(k, s[k:k + 1], np.zeros((1, 1)), np.ones(1), s[k:k + 1] + 1, np.array([True]))
                 for k in range(64)]
        vf = train_value(Dataset(trajs, (2, 1)), ValueConfig(hidden=(16,), gamma=0.99, epochs=200, lr=1e-2,
                                                             batch_size=64))
        assert abs(value(vf, np.array([0.0, 1.0])) - 1.0) < 0.05


class TestPersistence:
    def test_models_roundtrip(self, pointmass_data, inverse_model, tmp_path):
        _, train, test = pointmass_data
        fwd = train_forward_ensemble(train, ForwardConfig(hidden=(16,), n_members=3, n_keep=2, epochs=2))
        rew = train_reward_model(train, RewardConfig(kind="wgan", hidden=(16,), epochs=1))
        models = EnvModels(fwd, inverse_model, rew)
        save_models(models, str(tmp_path), {"seed": 3})
        back = load_models(str(tmp_path))
        arr = test.arrays()
        S, A, S2 = arr["states"], arr["actions"], arr["next_states"]
        assert np.array_equal(member_log_density(back.forward, S, S2), member_log_density(fwd, S, S2))
        assert np.array_equal(generate_action(back.inverse, S, S2), generate_action(inverse_model, S, S2))
        assert np.array_equal(predict_reward(back.reward, S, A, S2), predict_reward(rew, S, A, S2))
