"""Trajectory stitching: swap a transition's next state for a more valuable,
dynamics-plausible state seen elsewhere in the data, connect the two with a
generated action, and keep the rebuilt trajectory only if its return beats
the original by a margin."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import Dataset, StateEntry, StateIndex, Trajectory, Transition, build_state_index, trajectory_return
from .models import (
    EnvModels, ForwardConfig, InverseConfig, RewardConfig, ValueConfig, ValueFunction,
    gate_from_log_densities, generate_action, predict_reward, train_forward_ensemble,
    train_inverse_cvae, train_reward_model, train_value,
)
from .nn import diag_gaussian_log_density

log = logging.getLogger(__name__)


MARGIN_RULES = ("sign_aware", "as_written")


@dataclass
class StitchConfig:
    epsilon: float = 0.1
    p_tilde: float = 0.1
    K: int = 5
    max_len: Optional[int] = None  # default: 2 x longest input trajectory
    max_changes: Optional[int] = None
    z_mode: str = "prior_mean"
    seed: int = 0
    candidate_cap: int = 512
    index_cell: Optional[float] = None  # default: epsilon (or 0.1 when epsilon is 0)
    margin_rule: str = "sign_aware"  # or "as_written"

    def __post_init__(self):
        if self.epsilon < 0 or self.p_tilde < 0:
            raise ValueError("epsilon and p_tilde must be nonnegative")
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.margin_rule not in MARGIN_RULES:
            raise ValueError(f"margin_rule must be one of {MARGIN_RULES}")
        if self.max_changes is not None and self.max_changes < 0:
            raise ValueError("max_changes must be nonnegative")


@dataclass
class StitchEvent:
    traj_id: int
    step: int
    source_state: List[float]
    target_traj: int
    target_step: int
    action_norm: float
    predicted_reward: float
    cand_min_logp: float
    orig_log_mean_p: float
    value_target: float
    value_original: float
    accepted: bool = False


@dataclass
class IterationLog:
    iteration: int
    replaced: int = 0
    stitch_events: int = 0
    mean_return_before: float = 0.0
    mean_return_after: float = 0.0
    truncated: int = 0
    negative_margin: int = 0
    value_loss: List[float] = field(default_factory=list)
    events: List[StitchEvent] = field(default_factory=list)


@dataclass
class StitchLog:
    iterations: List[IterationLog] = field(default_factory=list)

    def to_records(self) -> List[dict]:
        out = []
        for it in self.iterations:
            head = {k: v for k, v in asdict(it).items() if k != "events"}
            head["type"] = "iteration"
            out.append(head)
            for ev in it.events:
                rec = asdict(ev)
                rec["type"] = "event"
                rec["iteration"] = it.iteration
                out.append(rec)
        return out

    def dumps(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.to_records())

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            f.write(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "StitchLog":
        its: Dict[int, IterationLog] = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            kind = rec.pop("type", None)
            if kind == "iteration":
                its[rec["iteration"]] = IterationLog(**rec)
            elif kind == "event":
                k = rec.pop("iteration")
                its[k].events.append(StitchEvent(**rec))
        return cls([its[k] for k in sorted(its)])

    @classmethod
    def load(cls, path: str) -> "StitchLog":
        with open(path) as f:
            return cls.loads(f.read())


# ---------------------------------------------------------------------------
# per-iteration context


class StitchContext:
    """Frozen dataset, index and model evaluations shared by every walk of
    one iteration."""

    def __init__(self, dataset: Dataset, models: EnvModels, vf: ValueFunction, cfg: StitchConfig):
        self.dataset = dataset
        self.models = models
        self.value_fn = vf
        self.cfg = cfg
        cell = cfg.index_cell or (cfg.epsilon if 0 < cfg.epsilon < np.inf else 0.1)
        self.index = build_state_index(dataset, cell=cell)
        self.trajs = dataset.by_id()
        idx = self.index
        n = len(idx)
        self.is_terminal_entry = np.array(
            [idx.steps[r] == len(self.trajs[int(idx.traj_ids[r])]) for r in range(n)], dtype=bool)
        self.succ = np.full(n, -1, dtype=np.int64)
        for r in range(n):
            if not self.is_terminal_entry[r]:
                nxt = idx.position(int(idx.traj_ids[r]), int(idx.steps[r]) + 1)
                if nxt is not None:
                    self.succ[r] = nxt
        # absorbing states carry no future value
        self.values = np.where(self.is_terminal_entry, 0.0, vf(idx.states) if n else np.zeros(0))
        if n:
            self.mu, self.std = models.forward.predict(idx.states)
        else:
            self.mu = self.std = np.zeros((len(models.forward.members), 0, dataset.state_dim))

    def row(self, traj_id: int, step: int) -> int:
        r = self.index.position(traj_id, step)
        if r is None:
            raise KeyError((traj_id, step))
        return r

    def original_next(self, traj_id: int, step: int) -> Tuple[np.ndarray, Optional[int], float]:
        """Next state of transition (traj_id, step), its index row (if any)
        and its value."""
        traj = self.trajs[traj_id]
        r = self.succ[self.row(traj_id, step)]
        s_next = traj.next_states[step]
        if r >= 0:
            return s_next, int(r), float(self.values[r])
        if traj.terminals[step]:
            return s_next, None, 0.0
        return s_next, None, float(self.value_fn(s_next))


def candidate_rows(ctx: StitchContext, traj_id: int, step: int, eps: float) -> np.ndarray:
    """Index rows of candidate next states for transition (traj_id, step):
    successors of states within ``eps`` of its state, plus states within
    ``eps`` of its next state, minus the original next-state occurrence."""
    idx = ctx.index
    traj = ctx.trajs[traj_id]
    near_s = idx.query(traj.states[step], eps)
    succ = ctx.succ[near_s]
    near_next = idx.query(traj.next_states[step], eps)
    rows = np.union1d(succ[succ >= 0], near_next)
    orig = idx.position(traj_id, step + 1)
    if orig is not None:
        rows = rows[rows != orig]
    return rows


def candidate_next_states(index: StateIndex, dataset: Dataset, traj_id: int, step: int,
                          epsilon: float) -> List[StateEntry]:
    """Candidate stitch targets as ``(traj_id, step, state)`` entries, in
    ascending ``(traj_id, step)`` order."""
    trajs = dataset.by_id()
    traj = trajs[traj_id]
    out = set()
    for e in index.radius_query(traj.states[step], epsilon):
        if e.step < len(trajs[e.traj_id]):
            nxt = index.position(e.traj_id, e.step + 1)
            if nxt is not None:
                out.add(nxt)
    for k in index.query(traj.next_states[step], epsilon):
        out.add(int(k))
    orig = index.position(traj_id, step + 1)
    out.discard(orig)
    return [index.entry(k) for k in sorted(out)]


@dataclass
class Selection:
    row: int
    cand_min_logp: float
    orig_log_mean_p: float
    value_target: float
    value_original: float


def select_stitch_target(cand_logp: np.ndarray, orig_logp: np.ndarray, cand_values: np.ndarray,
                         orig_value: float) -> Optional[int]:
    """Position (into the candidate arrays) of the highest-value candidate that
    passes the likelihood gate, provided it beats ``orig_value``; ties go to
    the earliest candidate. None when nothing qualifies."""
    if cand_values.size == 0:
        return None
    ok = gate_from_log_densities(cand_logp, orig_logp)
    if not ok.any():
        return None
    vals = np.where(ok, cand_values, -np.inf)
    best = int(np.argmax(vals))
    return best if vals[best] > orig_value else None


def _select(ctx: StitchContext, traj_id: int, step: int, exclude: set) -> Optional[Selection]:
    cfg = ctx.cfg
    rows = candidate_rows(ctx, traj_id, step, cfg.epsilon)
    if exclude and rows.size:
        rows = rows[[int(r) not in exclude for r in rows]]
    if rows.size == 0:
        return None
    vals = ctx.values[rows]
    if rows.size > cfg.candidate_cap:
        keep = np.sort(np.argsort(-vals, kind="stable")[:cfg.candidate_cap])
        rows, vals = rows[keep], vals[keep]
    src = ctx.row(traj_id, step)
    mu, std = ctx.mu[:, src], ctx.std[:, src]
    s_next, _, v_orig = ctx.original_next(traj_id, step)
    cand_logp = diag_gaussian_log_density(mu[:, None, :], std[:, None, :], ctx.index.states[rows][None])
    orig_logp = diag_gaussian_log_density(mu, std, s_next[None, :])
    k = select_stitch_target(cand_logp, orig_logp, vals, v_orig)
    if k is None:
        return None
    m = orig_logp.shape[0]
    log_mean = float(np.logaddexp.reduce(orig_logp) - np.log(m))
    return Selection(int(rows[k]), float(cand_logp[:, k].min()), log_mean, float(vals[k]), v_orig)


def stitch_trajectory(traj: Trajectory, ctx: StitchContext, rng: np.random.Generator,
                      max_len: int) -> Tuple[Trajectory, List[StitchEvent], bool]:
    """Walk from ``traj``'s first state, stitching where possible.

    Returns the new trajectory (same id), its stitch events, and whether the
    walk hit ``max_len``.
    """
    cfg = ctx.cfg
    models = ctx.models
    steps: List[Transition] = []
    events: List[StitchEvent] = []
    tid, k = traj.id, 0
    visited = {ctx.row(tid, 0)}
    changes = 0
    truncated = True
    while len(steps) < max_len:
        cur = ctx.trajs[tid]
        s = cur.states[k]
        sel = None
        if cfg.max_changes is None or changes < cfg.max_changes:
            sel = _select(ctx, tid, k, visited)
        if sel is not None:
            s_hat = ctx.index.states[sel.row]
            a_hat = np.asarray(generate_action(models.inverse, s, s_hat, cfg.z_mode, rng), dtype=np.float64)
            r_hat = float(predict_reward(models.reward, s, a_hat, s_hat, cfg.z_mode, rng))
            t_id, t_step = int(ctx.index.traj_ids[sel.row]), int(ctx.index.steps[sel.row])
            term = bool(ctx.is_terminal_entry[sel.row])
            steps.append(Transition(s, a_hat, r_hat, s_hat, term))
            events.append(StitchEvent(
                traj.id, len(steps) - 1, [float(v) for v in s], t_id, t_step,
                float(np.linalg.norm(a_hat)), r_hat, sel.cand_min_logp, sel.orig_log_mean_p,
                sel.value_target, sel.value_original))
            changes += 1
            if term:
                truncated = False
                break
            tid, k = t_id, t_step
            visited.add(sel.row)
        else:
            steps.append(cur.step(k))
            if cur.terminals[k] or k + 1 == len(cur):
                truncated = False
                break
            k += 1
            visited.add(ctx.row(tid, k))
    return Trajectory.from_steps(traj.id, steps), events, truncated


def replace_decision(old: Trajectory, new: Trajectory, p_tilde: float, rule: str = "as_written") -> bool:
    """Whether ``new`` replaces ``old``.

    ``as_written``: ``(1 + p_tilde) * return(old) < return(new)``, strict.
    For a negative old return this admits slightly worse trajectories.
    ``sign_aware``: ``return(new) > return(old) + p_tilde * |return(old)|``,
    identical for nonnegative returns and always a strict improvement.
    """
    old_r, new_r = trajectory_return(old), trajectory_return(new)
    if rule == "as_written":
        return (1.0 + p_tilde) * old_r < new_r
    if rule == "sign_aware":
        return new_r > old_r + p_tilde * abs(old_r)
    raise ValueError(f"unknown margin rule {rule!r}")


def derive_seed(*keys: int) -> int:
    """Deterministic 32-bit seed from a tuple of integers."""
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


def ts_iteration(dataset: Dataset, models: EnvModels, value_cfg: ValueConfig, cfg: StitchConfig,
                 iteration: int = 0, max_len: Optional[int] = None,
                 value_fn: Optional[ValueFunction] = None) -> Tuple[Dataset, IterationLog]:
    """One pass: fit a fresh value function on ``dataset`` (unless given),
    rebuild every trajectory, keep the rebuilt ones that clear the margin."""
    if value_fn is None:
        value_fn = train_value(dataset, replace(value_cfg, seed=derive_seed(value_cfg.seed, cfg.seed, iteration)))
    ctx = StitchContext(dataset, models, value_fn, cfg)
    if max_len is None:
        max_len = cfg.max_len or 2 * max((len(t) for t in dataset), default=1)
    it_log = IterationLog(iteration, mean_return_before=dataset.mean_return(), value_loss=list(value_fn.history))
    out = []
    for traj in dataset.trajectories:
        rng = np.random.default_rng([cfg.seed, iteration, traj.id])
        new, events, truncated = stitch_trajectory(traj, ctx, rng, max_len)
        it_log.stitch_events += len(events)
        it_log.truncated += int(truncated)
        accepted = bool(events) and replace_decision(traj, new, cfg.p_tilde, cfg.margin_rule)
        if accepted and cfg.margin_rule == "as_written" and trajectory_return(traj) < 0:
            it_log.negative_margin += 1
        for ev in events:
            ev.accepted = accepted
        it_log.events.extend(events)
        if accepted:
            it_log.replaced += 1
            out.append(new)
        else:
            out.append(traj)
    if it_log.replaced == 0:
        new_ds = dataset
    else:
        new_ds = Dataset(out, dataset.dims, dict(dataset.meta))
    it_log.mean_return_after = new_ds.mean_return()
    if it_log.negative_margin:
        log.warning("iteration %d: %d replacements had negative old returns (margin inverted)",
                    iteration, it_log.negative_margin)
    log.info("iteration %d: %d stitch events, %d replaced, mean return %.4f -> %.4f", iteration,
             it_log.stitch_events, it_log.replaced, it_log.mean_return_before, it_log.mean_return_after)
    return new_ds, it_log


@dataclass
class ModelConfigs:
    forward: ForwardConfig = field(default_factory=ForwardConfig)
    inverse: InverseConfig = field(default_factory=InverseConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    value: ValueConfig = field(default_factory=ValueConfig)


def train_env_models(dataset: Dataset, model_cfgs: ModelConfigs, seed: int = 0,
                     action_bound: float = 1.0) -> EnvModels:
    return EnvModels(
        train_forward_ensemble(dataset, replace(model_cfgs.forward, seed=derive_seed(model_cfgs.forward.seed, seed))),
        train_inverse_cvae(dataset, replace(model_cfgs.inverse, seed=derive_seed(model_cfgs.inverse.seed, seed)),
                           action_bound),
        train_reward_model(dataset, replace(model_cfgs.reward, seed=derive_seed(model_cfgs.reward.seed, seed))),
    )


def run_ts(dataset: Dataset, cfg: StitchConfig, model_cfgs: ModelConfigs, models: Optional[EnvModels] = None,
           action_bound: float = 1.0, keep_iterations: bool = False):
    """Train the environment models once (unless given), then apply
    ``cfg.K`` stitching iterations. Returns ``(dataset, log)``, plus the
    per-iteration datasets when ``keep_iterations`` is set."""
    if models is None:
        models = train_env_models(dataset, model_cfgs, cfg.seed, action_bound)
    max_len = cfg.max_len or 2 * max((len(t) for t in dataset), default=1)
    stitch_log = StitchLog()
    history = [dataset]
    current = dataset
    for k in range(cfg.K):
        current, it_log = ts_iteration(current, models, model_cfgs.value, cfg, iteration=k, max_len=max_len)
        stitch_log.iterations.append(it_log)
        history.append(current)
    current = Dataset(current.trajectories, current.dims, dict(dataset.meta, ts_iterations=cfg.K, ts_seed=cfg.seed))
    if keep_iterations:
        return current, stitch_log, history
    return current, stitch_log


def states_subset_of(output: Dataset, source: Dataset) -> bool:
    """Every state and next_state of ``output`` occurs (bit-equal) as a state
    or next_state in ``source``."""
    seen = set()
    for t in source:
        for arr in (t.states, t.next_states):
            seen.update(np.ascontiguousarray(arr).view(np.void(arr.dtype.itemsize * arr.shape[1])).ravel().tolist())
    for t in output:
        for arr in (t.states, t.next_states):
            keys = np.ascontiguousarray(arr).view(np.void(arr.dtype.itemsize * arr.shape[1])).ravel().tolist()
            if any(k not in seen for k in keys):
                return False
    return True
