import math

import numpy as np
import pytest

from trajstitch.data import Dataset, Trajectory, build_state_index, trajectory_return
from trajstitch.envs import generate_mixed_dataset, make_env, rollout_open_loop
from trajstitch.models import (
    EnvModels, ForwardConfig, InverseConfig, InverseModel, Normalizer, RewardConfig, RewardModel, ValueConfig,
    member_log_density, train_value,
)
from trajstitch.nn import MLPSpec, MLPState, Net
from trajstitch.stitching import (
    ModelConfigs, StitchConfig, StitchContext, StitchLog, candidate_next_states, derive_seed,
    replace_decision, run_ts, select_stitch_target, states_subset_of, stitch_trajectory, train_env_models,
    ts_iteration,
)


# ---------------------------------------------------------------------------
# hand-built models


def _zero_net(sizes, head="linear"):
    spec = MLPSpec(sizes, "identity", head)
    return Net(spec, MLPState.from_params(np.zeros(spec.n_params)))


class _StubForward:
    """Single-member ensemble with mean ``mean_fn(s)`` and a fixed std."""

    def __init__(self, mean_fn, std=0.1):
        self.mean_fn, self.sd = mean_fn, std
        self.members = [None]

    def predict(self, s):
        s = np.atleast_2d(s)
        mu = np.stack([self.mean_fn(x) for x in s])
        return mu[None], np.full_like(mu, self.sd)[None]


class _TableValue:
    def __init__(self, fn):
        self.fn = fn
        self.history = []

    def __call__(self, s):
        s = np.asarray(s, dtype=np.float64)
        if s.ndim == 1:
            return float(self.fn(s[None])[0])
        return self.fn(s)


def _stub_models(dS, dA, mean_fn, reward=0.5, std=0.1):
    dz = 2 * dA
    inverse = InverseModel(_zero_net((2 * dS + dA, dz), "gaussian"), _zero_net((2 * dS + dz, dA), "tanh_scaled"),
                           dz, Normalizer.identity(dS), 1.0, Normalizer.identity(dS))
    dx = 2 * dS + dA
    rew = RewardModel("mlp", {"net": _zero_net((dx, 1))}, 2, Normalizer.identity(dx),
                      Normalizer(np.array([reward]), np.ones(1)))
    return EnvModels(_StubForward(mean_fn, std), inverse, rew)


def _traj(tid, states, rewards, terminal=True, dA=1):
    states = np.asarray(states, dtype=np.float64).reshape(len(states), -1)
    n = len(states) - 1
    term = np.zeros(n, dtype=bool)
    term[-1] = terminal
    return Trajectory(tid, states[:-1], np.full((n, dA), 0.3), np.asarray(rewards, dtype=np.float64),
                      states[1:], term)


def _toy():
    """Three 1-d trajectories. Only A's first transition has a valid stitch:
    into B's first state, which leads to B's large terminal reward."""
    a = _traj(0, [0.0, 1.0, 2.0], [0.0, 0.0])
    b = _traj(1, [1.05, 9.0], [10.0])
    c = _traj(2, [0.02, 1.5], [0.0])
    return Dataset([a, b, c], (1, 1))


def _toy_mean(s):
    # only states at the origin get an informative prediction
    return s + 1.04 if abs(s[0]) < 0.01 else s + 100.0


def _occurrences(ds):
    """(traj_id, step, state, is_terminal_entry) for every stored state occurrence."""
    out = []
    for t in ds.trajectories:
        for k in range(len(t)):
            out.append((t.id, k, t.states[k], False))
        out.append((t.id, len(t), t.next_states[-1], bool(t.terminals[-1])))
    return out


def _enumerate_valid_stitches(ds, mean_fn, value_fn, eps, std):
    """Brute force: every (transition, target occurrence) pair meeting the
    candidate, gate and value rules, from scalar formulas."""
    occ = _occurrences(ds)
    by_key = {(o[0], o[1]): o for o in occ}

    def val(o):
        return 0.0 if o[1] == len(ds.by_id()[o[0]]) else float(value_fn(o[2][None])[0])

    def density(x, mu):
        return math.exp(-0.5 * float(np.sum(((x - mu) / std) ** 2))) / (std * math.sqrt(2 * math.pi)) ** len(x)

    valid = []
    for t in ds.trajectories:
        for k in range(len(t)):
            s, s2 = t.states[k], t.next_states[k]
            cands = set()
            for o in occ:
                if np.linalg.norm(o[2] - s) <= eps and o[1] < len(ds.by_id()[o[0]]):
                    cands.add((o[0], o[1] + 1))
                if np.linalg.norm(o[2] - s2) <= eps:
                    cands.add((o[0], o[1]))
            cands.discard((t.id, k + 1))
            mu = mean_fn(s)
            orig_val = val(by_key[(t.id, k + 1)])
            for key in sorted(cands):
                o = by_key[key]
                if density(o[2], mu) > density(s2, mu) and val(o) > orig_val:
                    valid.append(((t.id, k), key))
    return valid


# ---------------------------------------------------------------------------
# candidate search


def _brute_candidates(ds, traj_id, step, eps):
    occ = _occurrences(ds)
    t = ds.by_id()[traj_id]
    s, s2 = t.states[step], t.next_states[step]
    out = set()
    for tid, k, x, _ in occ:
        if np.linalg.norm(x - s) <= eps and k < len(ds.by_id()[tid]):
            out.add((tid, k + 1))
        if np.linalg.norm(x - s2) <= eps:
            out.add((tid, k))
    out.discard((traj_id, step + 1))
    return out


def _crossing():
    env = make_env("pointmass")
    x_line = rollout_open_loop(env, [-1.0, 0.03, 1.0, 0.0], np.zeros((20, 2)))
    y_line = rollout_open_loop(env, [0.04, -1.0, 0.0, 1.0], np.zeros((20, 2)))
    return Dataset([Trajectory(0, x_line.states, x_line.actions, x_line.rewards, x_line.next_states,
                               x_line.terminals),
                    Trajectory(1, y_line.states, y_line.actions, y_line.rewards, y_line.next_states,
                               y_line.terminals)], (4, 2))


class TestCandidates:
    def test_single_trajectory_zero_radius_is_empty(self, rng):
        t = _traj(0, rng.standard_normal((6, 3)), np.zeros(5), dA=2)
        ds = Dataset([t], (3, 2))
        index = build_state_index(ds)
        for k in range(len(t)):
            assert candidate_next_states(index, ds, 0, k, 0.0) == []

    def test_infinite_radius_is_everything_but_original(self, rng):
        ds = Dataset([_traj(i, rng.standard_normal((n, 2)), np.zeros(n - 1)) for i, n in enumerate((4, 6, 3))],
                     (2, 1))
        index = build_state_index(ds)
        everything = {(o[0], o[1]) for o in _occurrences(ds)}
        for t in ds.trajectories:
            for k in range(len(t)):
                got = {(e.traj_id, e.step) for e in candidate_next_states(index, ds, t.id, k, np.inf)}
                assert got == everything - {(t.id, k + 1)}

    def test_crossing_trajectories_match_brute_force(self):
        ds = _crossing()
        index = build_state_index(ds)
        for eps in np.random.default_rng(11).uniform(0, 1.5, 50):
            for t in ds.trajectories:
                for k in range(0, len(t), 3):
                    got = candidate_next_states(index, ds, t.id, k, eps)
                    keys = [(e.traj_id, e.step) for e in got]
                    assert keys == sorted(keys)
                    assert set(keys) == _brute_candidates(ds, t.id, k, eps)

    def test_entries_carry_states(self):
        ds = _crossing()
        index = build_state_index(ds)
        trajs = ds.by_id()
        for e in candidate_next_states(index, ds, 0, 9, 0.5):
            t = trajs[e.traj_id]
            expected = t.states[e.step] if e.step < len(t) else t.next_states[-1]
            assert np.array_equal(e.state, expected)


# ---------------------------------------------------------------------------
# selection and replacement


class TestSelect:
    def test_empty(self):
        assert select_stitch_target(np.zeros((2, 0)), np.zeros(2), np.zeros(0), 0.0) is None

    def test_all_fail_gate(self):
        cand = np.log(np.full((2, 3), 0.1))
        assert select_stitch_target(cand, np.log([0.5, 0.5]), np.array([5.0, 6.0, 7.0]), 0.0) is None

    def test_tabular_case(self):
        cand = np.log(np.array([[0.6, 0.8, 0.1], [0.7, 0.9, 0.9]]))
        orig = np.log(np.array([0.5, 0.5]))
        assert select_stitch_target(cand, orig, np.array([1.0, 2.0, 3.0]), 1.5) == 1

    def test_requires_strict_value_improvement(self):
        cand = np.log(np.array([[0.9, 0.9]]))
        orig = np.log(np.array([0.1]))
        assert select_stitch_target(cand, orig, np.array([1.0, 2.0]), 2.0) is None
        assert select_stitch_target(cand, orig, np.array([1.0, 2.0]), 1.999) == 1

    def test_ties_go_to_earliest(self):
        cand = np.log(np.full((1, 3), 0.9))
        assert select_stitch_target(cand, np.log([0.1]), np.array([1.0, 4.0, 4.0]), 0.0) == 1


def _flat(tid, total):
    return _traj(tid, [0.0, 1.0], [total])


class TestReplaceDecision:
    def test_identical(self):
        t = _flat(0, 10.0)
        assert not replace_decision(t, t, 0.1)
        assert not replace_decision(t, t, 0.1, "sign_aware")

    def test_boundary_keeps_old(self):
        assert not replace_decision(_flat(0, 10.0), _flat(0, 11.0), 0.1)

    def test_clear_improvement(self):
        assert replace_decision(_flat(0, 10.0), _flat(0, 11.5), 0.1)

    def test_rules_agree_for_nonnegative_returns(self, rng):
        for _ in range(200):
            old, new = rng.uniform(0, 10, 2)
            p = rng.uniform(0, 0.5)
            assert replace_decision(_flat(0, old), _flat(0, new), p) == \
                replace_decision(_flat(0, old), _flat(0, new), p, "sign_aware")

    def test_negative_returns(self):
        old, slightly_worse = _flat(0, -10.0), _flat(0, -10.5)
        assert replace_decision(old, slightly_worse, 0.1)  # the literal margin inverts
        assert not replace_decision(old, slightly_worse, 0.1, "sign_aware")
        assert replace_decision(old, _flat(0, -8.9), 0.1, "sign_aware")
        assert not replace_decision(old, _flat(0, -9.0), 0.1, "sign_aware")

    def test_unknown_rule(self):
        with pytest.raises(ValueError):
            replace_decision(_flat(0, 1.0), _flat(0, 2.0), 0.1, "loose")


# ---------------------------------------------------------------------------
# walks on the engineered dataset


def _toy_iteration(mean_fn=_toy_mean, value_fn=lambda s: s[:, 0], **cfg):
    ds = _toy()
    models = _stub_models(1, 1, mean_fn)
    vf = _TableValue(value_fn)
    out, log = ts_iteration(ds, models, ValueConfig(), StitchConfig(epsilon=0.1, **cfg), value_fn=vf)
    return ds, out, log, models, vf


class TestStitchWalk:
    def test_enumeration_finds_exactly_one_stitch(self):
        valid = _enumerate_valid_stitches(_toy(), _toy_mean, lambda s: s[:, 0], 0.1, 0.1)
        assert valid == [((0, 0), (1, 0))]

    def test_spliced_sequence_matches_enumeration(self):
        ds, out, log, models, _ = _toy_iteration()
        new_a = out.by_id()[0]
        b = ds.by_id()[1]
        assert np.array_equal(new_a.states[:, 0], [0.0, 1.05])
        assert np.array_equal(new_a.next_states[:, 0], [1.05, 9.0])
        assert np.array_equal(new_a.actions, [[0.0], b.actions[0]])
        assert np.array_equal(new_a.rewards, [0.5, 10.0])
        assert np.array_equal(new_a.terminals, [False, True])
        assert log.replaced == 1 and log.stitch_events == 1
        ev = log.events[0]
        assert (ev.traj_id, ev.step, ev.target_traj, ev.target_step, ev.accepted) == (0, 0, 1, 0, True)
        assert out.by_id()[1].equals(b) and out.by_id()[2].equals(ds.by_id()[2])

    def test_no_valid_candidate_is_a_no_op(self):
        # a flat value function: no candidate can strictly beat the original
        flat = lambda s: np.zeros(len(s))  # noqa: E731
        assert _enumerate_valid_stitches(_toy(), lambda s: s + 1.0, flat, 0.1, 0.1) == []
        ds, out, log, _, _ = _toy_iteration(mean_fn=lambda s: s + 1.0, value_fn=flat)
        assert log.replaced == 0 and log.stitch_events == 0
        assert out is ds
        ctx = StitchContext(ds, _stub_models(1, 1, lambda s: s + 1.0), _TableValue(flat),
                            StitchConfig(epsilon=0.1))
        for t in ds.trajectories:
            new, events, truncated = stitch_trajectory(t, ctx, np.random.default_rng(0), 10)
            assert new.equals(t) and events == [] and not truncated

    def test_zero_changes_allowed(self):
        ds, out, log, _, _ = _toy_iteration(max_changes=0)
        assert log.stitch_events == 0 and out.equals(ds)

    def test_length_cap_truncates(self):
        ds = _toy()
        ctx = StitchContext(ds, _stub_models(1, 1, _toy_mean), _TableValue(lambda s: s[:, 0]),
                            StitchConfig(epsilon=0.1))
        new, events, truncated = stitch_trajectory(ds.by_id()[0], ctx, np.random.default_rng(0), 1)
        assert len(new) == 1 and truncated and len(events) == 1

    def test_stitching_into_terminal_entry_ends_walk(self):
        # make B's terminal state the most valuable reachable target from A
        ds = Dataset([_traj(0, [0.0, 1.0, 2.0, 3.0], [0.0, 0.0, 0.0]), _traj(1, [5.0, 1.06], [0.0])], (1, 1))
        models = _stub_models(1, 1, _toy_mean, reward=4.0)
        vf = _TableValue(lambda s: s[:, 0])
        ctx = StitchContext(ds, models, vf, StitchConfig(epsilon=0.1))
        # A's successor 1.0 has value 1.0, the terminal entry 1.06 has value 0: no stitch
        new, events, _ = stitch_trajectory(ds.by_id()[0], ctx, np.random.default_rng(0), 10)
        assert events == []
        ctx.values[ctx.is_terminal_entry] = 50.0  # pretend terminal targets are valuable
        new, events, truncated = stitch_trajectory(ds.by_id()[0], ctx, np.random.default_rng(0), 10)
        assert len(new) == 1 and new.terminals[0] and new.next_states[0, 0] == 1.06 and not truncated

    def test_replaced_trajectories_keep_ids(self):
        ds, out, _, _, _ = _toy_iteration()
        assert [t.id for t in out.trajectories] == [t.id for t in ds.trajectories]


# ---------------------------------------------------------------------------
# the loop on learned models


SMALL_MODELS = ModelConfigs(
    forward=ForwardConfig(hidden=(32, 32), epochs=20, lr=1e-3),
    inverse=InverseConfig(hidden=(64, 64), epochs=100, lr=1e-3, batch_size=100),
    reward=RewardConfig(kind="mlp", hidden=(32, 32), epochs=20, lr=1e-3),
    value=ValueConfig(hidden=(32, 32), epochs=20, lr=3e-4),
)


@pytest.fixture(scope="module")
def learned():
    env = make_env("pointmass")
    ds = generate_mixed_dataset(env, 10, 60, 1.0, seed=0)
    models = train_env_models(ds, SMALL_MODELS, seed=0)
    cfg = StitchConfig(K=3, seed=0)
    out, log, history = run_ts(ds, cfg, SMALL_MODELS, models=models, keep_iterations=True)
    return env, ds, models, cfg, out, log, history


class TestLoop:
    def test_something_was_replaced(self, learned):
        *_, log, _ = learned
        assert sum(it.replaced for it in log.iterations) > 0

    def test_no_imagined_states(self, learned):
        _, ds, _, _, out, _, history = learned
        assert states_subset_of(out, ds)
        for h in history:
            assert states_subset_of(h, ds)

    def test_subset_check_detects_new_states(self, learned):
        _, ds, *_ = learned
        t = ds.trajectories[0]
        moved = Trajectory(t.id, t.states + 1e-9, t.actions, t.rewards, t.next_states, t.terminals)
        assert not states_subset_of(Dataset([moved], ds.dims), ds)

    def test_stored_mean_return_non_decreasing(self, learned):
        *_, log, history = learned
        means = [h.mean_return() for h in history]
        assert all(b >= a for a, b in zip(means, means[1:]))
        for it in log.iterations:
            assert it.mean_return_after >= it.mean_return_before

    def test_replaced_trajectories_clear_margin(self, learned):
        *_, cfg, _, _, history = learned
        for before, after in zip(history, history[1:]):
            old, new = before.by_id(), after.by_id()
            for tid, t in new.items():
                if not t.equals(old[tid]):
                    r_old, r_new = trajectory_return(old[tid]), trajectory_return(t)
                    assert r_new > r_old + cfg.p_tilde * abs(r_old)

    def test_k1_equals_one_iteration(self, learned):
        _, ds, models, _, _, _, _ = learned
        cfg = StitchConfig(K=1, seed=4)
        out, log = run_ts(ds, cfg, SMALL_MODELS, models=models)
        direct, it_log = ts_iteration(ds, models, SMALL_MODELS.value, cfg, iteration=0)
        assert out.equals(direct)
        assert StitchLog([it_log]).dumps() == log.dumps()

    def test_deterministic(self, learned):
        _, ds, models, cfg, out, log, _ = learned
        again, log2 = run_ts(ds, cfg, SMALL_MODELS, models=models)
        assert again.equals(out) and log2.dumps() == log.dumps()

    def test_model_training_deterministic(self, learned):
        _, ds, models, *_ = learned
        cfgs = ModelConfigs(ForwardConfig(hidden=(8,), epochs=2, n_members=3, n_keep=2),
                            InverseConfig(hidden=(8,), epochs=2), RewardConfig(kind="wgan", hidden=(8,), epochs=1))
        a, b = train_env_models(ds, cfgs, seed=3), train_env_models(ds, cfgs, seed=3)
        for x, y in zip(a.forward.members, b.forward.members):
            assert np.array_equal(x.params, y.params)
        assert np.array_equal(a.inverse.decoder.params, b.inverse.decoder.params)
        assert np.array_equal(a.reward.nets["generator"].params, b.reward.nets["generator"].params)

    def test_events_replay(self, learned):
        _, _, models, _, _, log, history = learned
        fwd = models.forward
        for it, before in zip(log.iterations, history):
            trajs = before.by_id()
            for ev in it.events:
                t = trajs[ev.target_traj]
                target = t.states[ev.target_step] if ev.target_step < len(t) else t.next_states[-1]
                lp = member_log_density(fwd, np.array(ev.source_state), target)
                assert abs(lp.min() - ev.cand_min_logp) < 1e-9
                assert ev.cand_min_logp > ev.orig_log_mean_p
                assert ev.value_target > ev.value_original

    def test_log_roundtrip(self, learned, tmp_path):
        *_, log, _ = learned
        path = str(tmp_path / "log.jsonl")
        log.save(path)
        back = StitchLog.load(path)
        assert back.dumps() == log.dumps()
        assert len(back.iterations) == 3

    def test_log_counts(self, learned):
        _, ds, *_, log, _ = learned
        for it in log.iterations:
            assert 0 <= it.replaced <= len(ds)
            assert it.stitch_events == len(it.events)
            assert it.replaced == len({ev.traj_id for ev in it.events if ev.accepted})

    def test_converged_data_stays_converged(self, learned):
        _, ds, models, _, _, _, _ = learned
        vf = train_value(ds, SMALL_MODELS.value)
        cfg = StitchConfig(seed=0)
        current = ds
        for k in range(12):
            current, it_log = ts_iteration(current, models, SMALL_MODELS.value, cfg, iteration=k, value_fn=vf)
            if it_log.replaced == 0:
                break
        assert it_log.replaced == 0
        again, second = ts_iteration(current, models, SMALL_MODELS.value, cfg, iteration=k + 1, value_fn=vf)
        assert second.replaced == 0 and again.equals(current)

    def test_resimulated_returns(self, learned):
        env, ds, _, _, out, _, _ = learned
        old = ds.by_id()
        ok = total = 0
        for t in out.trajectories:
            if t.equals(old[t.id]):
                continue
            total += 1
            sim = rollout_open_loop(env, t.states[0], t.actions)
            ok += trajectory_return(sim) >= trajectory_return(old[t.id]) - 0.5
        assert total > 0 and ok >= 0.9 * total

    def test_all_expert_data_is_left_alone(self):
        env = make_env("pointmass")
        ds = generate_mixed_dataset(env, 100, 24, 1.0, seed=0)
        models = train_env_models(ds, SMALL_MODELS, seed=0)
        out, log = run_ts(ds, StitchConfig(K=1), SMALL_MODELS, models=models)
        assert log.iterations[0].replaced == 0
        assert out.equals(ds)

    def test_iteration_seeds_differ(self):
        assert derive_seed(0, 0, 0) != derive_seed(0, 0, 1)
        assert derive_seed(3, 4) == derive_seed(3, 4)


class TestConfig:
    @pytest.mark.parametrize("kwargs", [{"epsilon": -1}, {"p_tilde": -0.1}, {"K": 0}, {"margin_rule": "x"},
                                        {"max_changes": -1}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            StitchConfig(**kwargs)

    def test_defaults(self):
        cfg = StitchConfig()
        assert (cfg.p_tilde, cfg.K, cfg.candidate_cap) == (0.1, 5, 512)
