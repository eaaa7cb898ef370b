"""Small environments with exact dynamics and closed-form experts.

``pointmass`` and ``wallworld`` are 2-d double integrators, state
``(x, y, vx, vy)`` and acceleration actions in ``[-bound, bound]^2``;
``wallworld`` adds a wall segment that blocks motion. ``chain`` is a 5-state
tabular MDP with one-hot states and a scalar action whose sign picks
left/right.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import Dataset, Trajectory, Transition, trajectory_return

GENERATOR_VERSION = "1"
GOAL_RADIUS = 0.1


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    action_bound: float = 1.0
    horizon: int = 60
    dt: float = 0.1
    goal: Tuple[float, float] = (0.0, 0.0)
    starts: Tuple[Tuple[float, ...], ...] = ()
    wall: Optional[Tuple[Tuple[float, float], Tuple[float, float]]] = None
    chain_length: int = 5
    gamma: float = 0.9
    kp: float = 4.0
    kd: float = 3.0
    expert_std: float = 0.01

    @property
    def dims(self) -> Tuple[int, int]:
        return (self.state_dim, self.action_dim)


def _circle_starts(n: int, radius: float, goal=(0.0, 0.0), phase: float = 0.25) -> Tuple[Tuple[float, ...], ...]:
    out = []
    for k in range(n):
        ang = 2 * math.pi * (k + phase) / n
        out.append((goal[0] + radius * math.cos(ang), goal[1] + radius * math.sin(ang), 0.0, 0.0))
    return tuple(out)


def make_env(name: str, **params) -> EnvSpec:
    if name == "pointmass":
        n_starts = int(params.pop("n_starts", 4))
        radius = float(params.pop("start_radius", 1.5))
        goal = tuple(params.pop("goal", (0.0, 0.0)))
        return EnvSpec("pointmass", 4, 2, goal=goal, starts=_circle_starts(n_starts, radius, goal), **params)
    if name == "wallworld":
        goal = tuple(params.pop("goal", (0.0, 1.0)))
        starts = params.pop("starts", ((0.0, -1.0, 0.0, 0.0), (-0.4, -1.0, 0.0, 0.0), (0.4, -1.0, 0.0, 0.0)))
        wall = params.pop("wall", ((-0.6, 0.0), (0.6, 0.0)))
        return EnvSpec("wallworld", 4, 2, goal=goal, starts=tuple(map(tuple, starts)),
                       wall=(tuple(wall[0]), tuple(wall[1])), **params)
    if name == "chain":
        n = int(params.pop("chain_length", 5))
        start = tuple(float(i == 0) for i in range(n))
        params.setdefault("horizon", 20)
        return EnvSpec("chain", n, 1, chain_length=n, starts=(start,), **params)
    raise ValueError(f"unknown environment {name!r}")


def parse_env(text: str) -> EnvSpec:
    """``"pointmass"`` or ``"pointmass:n_starts=4,horizon=60"``."""
    name, _, rest = text.partition(":")
    params: Dict[str, object] = {}
    for item in filter(None, (p.strip() for p in rest.split(","))):
        key, _, value = item.partition("=")
        v: object = value
        for cast in (int, float):
            try:
                v = cast(value)
                break
            except ValueError:
                continue
        params[key.strip()] = v
    return make_env(name.strip(), **params)


# ---------------------------------------------------------------------------
# dynamics


def _segment_hit(p: np.ndarray, q: np.ndarray, a: np.ndarray, b: np.ndarray) -> Optional[float]:
    """Fraction along p->q at which it crosses segment a-b, or None."""
    r = q - p
    s = b - a
    denom = r[0] * s[1] - r[1] * s[0]
    if denom == 0.0:
        return None
    ap = a - p
    t = (ap[0] * s[1] - ap[1] * s[0]) / denom
    u = (ap[0] * r[1] - ap[1] * r[0]) / denom
    if 0.0 <= t <= 1.0 and 0.0 <= u <= 1.0:
        return t
    return None


def chain_index(env: EnvSpec, s: np.ndarray) -> int:
    return int(np.argmax(s))


def chain_tables(env: EnvSpec) -> Tuple[np.ndarray, np.ndarray]:
    """``P[s, a, s']`` and ``R[s, a]`` with a=0 left, a=1 right; the last
    state is absorbing and reached with reward 1."""
    n = env.chain_length
    P = np.zeros((n, 2, n))
    R = np.zeros((n, 2))
    for s in range(n):
        if s == n - 1:
            P[s, :, s] = 1.0
            continue
        P[s, 0, max(s - 1, 0)] = 1.0
        P[s, 1, s + 1] = 1.0
        R[s, 1] = 1.0 if s + 1 == n - 1 else 0.0
    return P, R


def clip_action(env: EnvSpec, a) -> np.ndarray:
    return np.clip(np.asarray(a, dtype=np.float64).reshape(env.action_dim), -env.action_bound, env.action_bound)


def env_step(env: EnvSpec, s, a, t: Optional[int] = None) -> Tuple[np.ndarray, float, bool]:
    """Apply action ``a`` (clipped to bounds) in state ``s``.

    ``done`` reports goal arrival (or the absorbing chain state); when the
    step index ``t`` is given, reaching the horizon also sets it.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (env.state_dim,):
        raise ValueError(f"state shape {s.shape} does not match dS={env.state_dim}")
    if np.size(a) != env.action_dim:
        raise ValueError(f"action size {np.size(a)} does not match dA={env.action_dim}")
    a = clip_action(env, a)
    at_horizon = t is not None and t + 1 >= env.horizon
    if env.name == "chain":
        P, R = chain_tables(env)
        i = chain_index(env, s)
        ai = 1 if a[0] >= 0 else 0
        j = int(np.argmax(P[i, ai]))
        s2 = np.zeros(env.state_dim)
        s2[j] = 1.0
        return s2, float(R[i, ai]), (j == env.chain_length - 1) or at_horizon
    pos, vel = s[:2], s[2:]
    goal = np.asarray(env.goal)
    r = -float(np.linalg.norm(pos - goal)) * env.dt
    new_pos = pos + vel * env.dt
    new_vel = vel + a * env.dt
    if env.wall is not None:
        wa, wb = np.asarray(env.wall[0]), np.asarray(env.wall[1])
        hit = _segment_hit(pos, new_pos, wa, wb)
        if hit is not None:
            new_pos = pos + (new_pos - pos) * max(hit - 1e-3, 0.0)
            new_vel = np.zeros(2)
    s2 = np.concatenate([new_pos, new_vel])
    done = bool(np.linalg.norm(new_pos - goal) < GOAL_RADIUS) or at_horizon
    return s2, r, done


def reached_goal(env: EnvSpec, s2: np.ndarray) -> bool:
    if env.name == "chain":
        return chain_index(env, s2) == env.chain_length - 1
    return bool(np.linalg.norm(s2[:2] - np.asarray(env.goal)) < GOAL_RADIUS)


# ---------------------------------------------------------------------------
# experts


def _pd(env: EnvSpec, pos, vel, target) -> np.ndarray:
    return clip_action(env, env.kp * (np.asarray(target) - pos) - env.kd * vel)


def expert_action(env: EnvSpec, s) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if env.name == "chain":
        return np.array([env.action_bound])
    pos, vel = s[:2], s[2:]
    target = np.asarray(env.goal)
    if env.wall is not None and _segment_hit(pos, target, *map(np.asarray, env.wall)) is not None:
        target = _wall_waypoint(env, pos)
    return _pd(env, pos, vel, target)


def _wall_waypoint(env: EnvSpec, pos) -> np.ndarray:
    wa, wb = np.asarray(env.wall[0]), np.asarray(env.wall[1])
    along = (wb - wa) / np.linalg.norm(wb - wa)
    normal = np.array([-along[1], along[0]])
    goal_side = np.sign(np.dot(np.asarray(env.goal) - wa, normal)) or 1.0
    ends = [wa - 0.05 * along, wb + 0.05 * along]
    end = min(ends, key=lambda e: np.linalg.norm(e - pos) + np.linalg.norm(np.asarray(env.goal) - e))
    return end + 0.3 * goal_side * normal


class GaussianExpert:
    """The deterministic expert wrapped in N(expert(s), std^2 I)."""

    def __init__(self, env: EnvSpec, std: Optional[float] = None):
        self.env = env
        self.std = env.expert_std if std is None else std

    def mean(self, s) -> np.ndarray:
        return expert_action(self.env, s)

    def log_prob(self, s, a) -> float:
        mu = self.mean(s)
        z = (np.asarray(a) - mu) / self.std
        return float(-0.5 * z @ z - len(mu) * (math.log(self.std) + 0.5 * math.log(2 * math.pi)))

    def sample(self, s, rng: np.random.Generator) -> np.ndarray:
        mu = self.mean(s)
        return mu + self.std * rng.standard_normal(mu.shape)

    def __call__(self, s) -> np.ndarray:
        return self.mean(s)


# ---------------------------------------------------------------------------
# rollouts and datasets


def initial_state(env: EnvSpec, rng: np.random.Generator) -> np.ndarray:
    return np.array(env.starts[int(rng.integers(len(env.starts)))], dtype=np.float64)


def rollout(env: EnvSpec, act: Callable[[np.ndarray], np.ndarray], s0, traj_id: int = 0) -> Trajectory:
    """One episode from ``s0``. Only goal arrival is flagged terminal; hitting
    the horizon truncates without the flag."""
    s = np.asarray(s0, dtype=np.float64)
    S, A, R, S2, T = [], [], [], [], []
    for t in range(env.horizon):
        a = clip_action(env, act(s))
        s2, r, _ = env_step(env, s, a)
        term = reached_goal(env, s2)
        S.append(s)
        A.append(a)
        R.append(r)
        S2.append(s2)
        T.append(term)
        if term:
            break
        s = s2
    return Trajectory(traj_id, np.array(S), np.array(A), np.array(R), np.array(S2), np.array(T))


def generate_mixed_dataset(env: EnvSpec, x_percent: float, n_traj: int, noise_std: float, seed: int) -> Dataset:
    """``round(n_traj * x_percent / 100)`` noise-free expert trajectories, the
    rest from the expert with N(0, noise_std^2) action noise (then clipped).
    Expert slots are placed at random positions; ids are 0..n_traj-1."""
    if not 0 <= x_percent <= 100:
        raise ValueError("x_percent must lie in [0, 100]")
    rng = np.random.default_rng([seed, 0x7D5])
    n_expert = int(math.floor(n_traj * x_percent / 100.0 + 0.5))
    is_expert = np.zeros(n_traj, dtype=bool)
    is_expert[rng.permutation(n_traj)[:n_expert]] = True
    trajs = []
    for i in range(n_traj):
        s0 = initial_state(env, rng)
        if is_expert[i]:
            act = lambda s: expert_action(env, s)
        else:
            noise_rng = np.random.default_rng([seed, 0x4E5, i])
            act = lambda s, g=noise_rng: expert_action(env, s) + noise_std * g.standard_normal(env.action_dim)
        trajs.append(rollout(env, act, s0, traj_id=i))
    meta = {
        "env": env.name, "x_percent": x_percent, "n_traj": n_traj, "noise_std": noise_std,
        "seed": seed, "generator_version": GENERATOR_VERSION, "n_expert": n_expert,
        "expert_ids": [int(i) for i in np.flatnonzero(is_expert)],
    }
    return Dataset(trajs, env.dims, meta)


def evaluate_policy(env: EnvSpec, policy: Callable[[np.ndarray], np.ndarray], n_eval: int = 10,
                    seed: int = 0) -> Tuple[float, float]:
    """Mean and std of undiscounted return over ``n_eval`` seeded episodes."""
    rng = np.random.default_rng([seed, 0xE7A1])
    returns = [trajectory_return(rollout(env, policy, initial_state(env, rng))) for _ in range(n_eval)]
    return float(np.mean(returns)), float(np.std(returns))


def expert_states(env: EnvSpec, n_rollouts: int, seed: int, stochastic: bool = False) -> np.ndarray:
    """States visited by the expert (its Gaussian wrapper if ``stochastic``)."""
    rng = np.random.default_rng([seed, 0x57A7])
    expert = GaussianExpert(env)
    act = (lambda s: expert.sample(s, rng)) if stochastic else expert.mean
    states = [rollout(env, act, initial_state(env, rng)).states for _ in range(n_rollouts)]
    return np.concatenate(states)


def kl_samples(expert, policy, env: EnvSpec, n_rollouts: int = 10, seed: int = 0) -> np.ndarray:
    """Per-sample ``log expert(a|s) - log policy(a|s)`` with ``s`` from expert
    rollouts and ``a`` drawn from the expert."""
    states = expert_states(env, n_rollouts, seed, stochastic=True)
    rng = np.random.default_rng([seed, 0x6B1])
    out = np.empty(len(states))
    for k, s in enumerate(states):
        a = expert.sample(s, rng)
        out[k] = expert.log_prob(s, a) - policy.log_prob(s, a)
    return out


def kl_to_expert(expert, policy, env: EnvSpec, n_rollouts: int = 10, seed: int = 0) -> float:
    """Monte-Carlo estimate of KL(expert || policy) over expert-visited states."""
    return float(np.mean(kl_samples(expert, policy, env, n_rollouts, seed)))


def action_mse(expert: Callable, policy: Callable, env: EnvSpec, n_rollouts: int = 10, seed: int = 0) -> float:
    """Mean over expert-visited states of ||expert(s) - policy(s)||^2."""
    states = expert_states(env, n_rollouts, seed)
    diffs = [np.sum((np.asarray(expert(s)) - np.asarray(policy(s))) ** 2) for s in states]
    return float(np.mean(diffs))


def random_policy(env: EnvSpec, seed: int = 0) -> Callable[[np.ndarray], np.ndarray]:
    rng = np.random.default_rng([seed, 0x2A4D])
    return lambda s: rng.uniform(-env.action_bound, env.action_bound, env.action_dim)


# ---------------------------------------------------------------------------
# oracles


def dp_value_oracle(env: EnvSpec, behavior: np.ndarray, gamma: Optional[float] = None) -> np.ndarray:
    """Exact policy evaluation on the chain, ``V = (I - gamma P_pi)^-1 r_pi``.

    ``behavior[s, a]`` gives left/right probabilities. The absorbing state
    has value 0 and transitions into it do not bootstrap.
    """
    if env.name != "chain":
        raise ValueError("dp_value_oracle needs a tabular environment")
    gamma = env.gamma if gamma is None else gamma
    P, R = chain_tables(env)
    pi = np.asarray(behavior, dtype=np.float64)
    P_pi = np.einsum("sa,sat->st", pi, P)
    r_pi = np.sum(pi * R, axis=1)
    absorbing = env.chain_length - 1
    P_pi[:, absorbing] = 0.0
    r_pi[absorbing] = 0.0
    A = np.eye(env.chain_length) - gamma * P_pi
    if np.linalg.cond(A) > 1e12:
        raise np.linalg.LinAlgError("policy evaluation system is singular")
    return np.linalg.solve(A, r_pi)


def chain_optimal_q(env: EnvSpec, gamma: Optional[float] = None, iters: int = 1000) -> np.ndarray:
    gamma = env.gamma if gamma is None else gamma
    P, R = chain_tables(env)
    absorbing = env.chain_length - 1
    V = np.zeros(env.chain_length)
    for _ in range(iters):
        Vb = V.copy()
        Vb[absorbing] = 0.0
        Q = R + gamma * np.einsum("sat,t->sa", P, Vb)
        Q[absorbing] = 0.0
        V = Q.max(axis=1)
    return Q


def optimal_return(env: EnvSpec, s0, restarts: int = 3, seed: int = 0) -> float:
    """Best undiscounted return found by open-loop trajectory optimisation
    (L-BFGS-B over bounded action sequences, warm-started from the expert).

    The optimised surrogate ignores goal termination; candidates are scored
    with the exact environment, and the expert's own return is a floor.
    """
    from scipy.optimize import minimize

    if env.name == "chain":
        Q = chain_optimal_q(env, gamma=1.0, iters=env.horizon)
        return float(Q[chain_index(env, np.asarray(s0))].max())
    s0 = np.asarray(s0, dtype=np.float64)
    T, dA, dt = env.horizon, env.action_dim, env.dt
    goal = np.asarray(env.goal)
    steps = np.arange(T)
    # pos_t = pos0 + t dt vel0 + dt^2 sum_{k<t} (t-1-k) a_k
    L = dt * dt * np.maximum(steps[:, None] - 1 - steps[None, :], 0)
    base = s0[:2] + np.outer(steps * dt, s0[2:])

    def cost_and_grad(flat):
        acts = flat.reshape(T, dA)
        off = base + L @ acts - goal
        dist = np.sqrt(np.sum(off ** 2, axis=1))
        unit = off / np.maximum(dist, 1e-12)[:, None]
        return dt * dist.sum(), (dt * (L.T @ unit)).ravel()

    def smooth_cost(flat):
        s, cost = s0, 0.0
        for a in flat.reshape(T, dA):
            s, r, _ = env_step(env, s, a)
            cost -= r
        return cost

    expert_traj = rollout(env, lambda s: expert_action(env, s), s0)
    init = np.zeros((T, dA))
    init[:len(expert_traj)] = expert_traj.actions
    best = trajectory_return(expert_traj)
    rng = np.random.default_rng(seed)
    bounds = [(-env.action_bound, env.action_bound)] * (T * dA)
    for k in range(restarts):
        x0 = init.ravel() if k == 0 else np.clip(init.ravel() + 0.3 * rng.standard_normal(init.size), -1, 1)
        if env.wall is None:
            res = minimize(cost_and_grad, x0, jac=True, method="L-BFGS-B", bounds=bounds)
        else:
            res = minimize(smooth_cost, x0, method="L-BFGS-B", bounds=bounds, options={"maxiter": 60})
        best = max(best, trajectory_return(rollout_open_loop(env, s0, res.x.reshape(T, dA))))
    return best


def rollout_open_loop(env: EnvSpec, s0, actions: np.ndarray) -> Trajectory:
    """Apply a fixed action sequence from ``s0``; stops at goal arrival or
    when the actions run out (no horizon cap)."""
    s = np.asarray(s0, dtype=np.float64)
    steps = []
    for a in np.atleast_2d(actions):
        a = clip_action(env, a)
        s2, r, _ = env_step(env, s, a)
        term = reached_goal(env, s2)
        steps.append(Transition(s, a, r, s2, term))
        if term:
            break
        s = s2
    return Trajectory.from_steps(0, steps)


def normalized_score(ret: float, random_ret: float, optimal_ret: float) -> float:
    """100 * (ret - random) / (optimal - random)."""
    return 100.0 * (ret - random_ret) / (optimal_ret - random_ret)
