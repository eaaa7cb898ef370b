"""Offline datasets of trajectories: containers, file codecs, validation,
state indexing and trajectory-level quantities."""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

MAGIC = b"TSDS"
VERSION = 1
TEXT_HEADER = "TSDS v1 dS={dS} dA={dA}"


class ParseError(ValueError):
    """Malformed dataset file. ``line`` is 1-based for the text form."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    terminal: bool = False


@dataclass(eq=False)
class Trajectory:
    """One episode stored column-wise.

    ``states[t]``, ``actions[t]``, ``rewards[t]``, ``next_states[t]`` and
    ``terminals[t]`` form transition ``t``.
    """

    id: int
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64).reshape(-1)
        self.next_states = np.asarray(self.next_states, dtype=np.float64)
        self.terminals = np.asarray(self.terminals, dtype=bool).reshape(-1)
        self.id = int(self.id)
        n = len(self.rewards)
        if self.states.ndim == 1:
            self.states = self.states.reshape(n, -1)
        if self.actions.ndim == 1:
            self.actions = self.actions.reshape(n, -1)
        if self.next_states.ndim == 1:
            self.next_states = self.next_states.reshape(n, -1)

    @classmethod
    def from_steps(cls, id: int, steps: Sequence[Transition]) -> "Trajectory":
        return cls(
            id=id,
            states=np.array([t.state for t in steps], dtype=np.float64),
            actions=np.array([t.action for t in steps], dtype=np.float64),
            rewards=np.array([t.reward for t in steps], dtype=np.float64),
            next_states=np.array([t.next_state for t in steps], dtype=np.float64),
            terminals=np.array([t.terminal for t in steps], dtype=bool),
        )

    def __len__(self) -> int:
        return len(self.rewards)

    def step(self, t: int) -> Transition:
        return Transition(
            self.states[t], self.actions[t], float(self.rewards[t]),
            self.next_states[t], bool(self.terminals[t]),
        )

    @property
    def steps(self) -> List[Transition]:
        return [self.step(t) for t in range(len(self))]

    def with_id(self, new_id: int) -> "Trajectory":
        return Trajectory(new_id, self.states, self.actions, self.rewards,
                          self.next_states, self.terminals)

    def equals(self, other: "Trajectory") -> bool:
        """Bit-equality on every field."""
        return (
            self.id == other.id
            and _bits_equal(self.states, other.states)
            and _bits_equal(self.actions, other.actions)
            and _bits_equal(self.rewards, other.rewards)
            and _bits_equal(self.next_states, other.next_states)
            and np.array_equal(self.terminals, other.terminals)
        )


def _bits_equal(a: np.ndarray, b: np.ndarray) -> bool:
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    return a.shape == b.shape and a.tobytes() == b.tobytes()


@dataclass(eq=False)
class Dataset:
    trajectories: List[Trajectory]
    dims: Tuple[int, int]
    meta: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        self.dims = (int(self.dims[0]), int(self.dims[1]))

    @property
    def state_dim(self) -> int:
        return self.dims[0]

    @property
    def action_dim(self) -> int:
        return self.dims[1]

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    @property
    def n_transitions(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def by_id(self) -> Dict[int, Trajectory]:
        return {t.id: t for t in self.trajectories}

    def arrays(self) -> Dict[str, np.ndarray]:
        """Flattened transition arrays (in trajectory order)."""
        dS, dA = self.dims
        if not self.trajectories:
            return {
                "states": np.zeros((0, dS)), "actions": np.zeros((0, dA)),
                "rewards": np.zeros(0), "next_states": np.zeros((0, dS)),
                "terminals": np.zeros(0, dtype=bool),
            }
        return {
            "states": np.concatenate([t.states for t in self.trajectories]),
            "actions": np.concatenate([t.actions for t in self.trajectories]),
            "rewards": np.concatenate([t.rewards for t in self.trajectories]),
            "next_states": np.concatenate([t.next_states for t in self.trajectories]),
            "terminals": np.concatenate([t.terminals for t in self.trajectories]),
        }

    def equals(self, other: "Dataset") -> bool:
        return (
            self.dims == other.dims
            and len(self) == len(other)
            and all(a.equals(b) for a, b in zip(self.trajectories, other.trajectories))
        )

    def mean_return(self) -> float:
        if not self.trajectories:
            return 0.0
        return float(np.mean([trajectory_return(t) for t in self.trajectories]))


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    kind: str
    traj_id: Optional[int]
    step: Optional[int]
    message: str

    def __str__(self) -> str:
        where = f"traj {self.traj_id}" if self.traj_id is not None else "dataset"
        if self.step is not None:
            where += f", step {self.step}"
        return f"[{self.kind}] {where}: {self.message}"


def validate(dataset: Dataset) -> List[Violation]:
    """Every violated invariant, with location. Empty list iff valid."""
    report: List[Violation] = []
    dS, dA = dataset.dims
    seen_ids = set()
    for traj in dataset.trajectories:
        tid = traj.id
        if tid in seen_ids:
            report.append(Violation("duplicate_id", tid, None, "trajectory id is not unique"))
        seen_ids.add(tid)
        H = len(traj)
        if H < 1:
            report.append(Violation("empty", tid, None, "trajectory has no steps"))
            continue
        shapes = {
            "states": (traj.states, dS), "actions": (traj.actions, dA),
            "next_states": (traj.next_states, dS),
        }
        bad_shape = False
        for name, (arr, d) in shapes.items():
            if arr.shape != (H, d):
                report.append(Violation("dims", tid, None, f"{name} has shape {arr.shape}, expected {(H, d)}"))
                bad_shape = True
        if len(traj.terminals) != H:
            report.append(Violation("dims", tid, None, "terminals length differs from rewards"))
            bad_shape = True
        if bad_shape:
            continue
        for t in range(H):
            fields = {
                "state": traj.states[t], "action": traj.actions[t],
                "reward": traj.rewards[t:t + 1], "next_state": traj.next_states[t],
            }
            for name, v in fields.items():
                if not np.all(np.isfinite(v)):
                    report.append(Violation("finite", tid, t, f"non-finite {name}"))
            if t < H - 1:
                if traj.terminals[t]:
                    report.append(Violation("terminal", tid, t, "terminal flag before the final step"))
                if not _bits_equal(traj.next_states[t], traj.states[t + 1]):
                    report.append(Violation("contiguity", tid, t, "next_state differs from the following state"))
    return report


def check_valid(dataset: Dataset) -> None:
    report = validate(dataset)
    if report:
        raise SchemaError("invalid dataset:\n" + "\n".join(str(v) for v in report[:20]))


# ---------------------------------------------------------------------------
# codecs


def _record_dtype(dS: int, dA: int) -> np.dtype:
    return np.dtype([
        ("s", "<f8", (dS,)), ("a", "<f8", (dA,)), ("r", "<f8"),
        ("sn", "<f8", (dS,)), ("t", "u1"),
    ])


def dumps_binary(dataset: Dataset) -> bytes:
    dS, dA = dataset.dims
    rec = _record_dtype(dS, dA)
    parts = [MAGIC, struct.pack("<IIIQ", VERSION, dS, dA, len(dataset))]
    for traj in dataset.trajectories:
        H = len(traj)
        parts.append(struct.pack("<QQ", traj.id, H))
        buf = np.zeros(H, dtype=rec)
        buf["s"] = traj.states
        buf["a"] = traj.actions
        buf["r"] = traj.rewards
        buf["sn"] = traj.next_states
        buf["t"] = traj.terminals
        parts.append(buf.tobytes())
    return b"".join(parts)


def loads_binary(blob: bytes) -> Dataset:
    if blob[:4] != MAGIC:
        raise ParseError("bad magic, expected TSDS")
    head = 4 + struct.calcsize("<IIIQ")
    if len(blob) < head:
        raise ParseError("truncated header")
    version, dS, dA, count = struct.unpack_from("<IIIQ", blob, 4)
    if version != VERSION:
        raise ParseError(f"unsupported version {version}")
    rec = _record_dtype(dS, dA)
    off = head
    trajs = []
    for k in range(count):
        if off + 16 > len(blob):
            raise ParseError(f"truncated at trajectory {k}")
        tid, H = struct.unpack_from("<QQ", blob, off)
        off += 16
        nbytes = H * rec.itemsize
        if off + nbytes > len(blob):
            raise ParseError(f"truncated transitions in trajectory {k}")
        buf = np.frombuffer(blob, dtype=rec, count=H, offset=off)
        off += nbytes
        trajs.append(Trajectory(
            tid, buf["s"].copy(), buf["a"].copy(), buf["r"].copy(),
            buf["sn"].copy(), buf["t"].astype(bool),
        ))
    if off != len(blob):
        raise ParseError(f"{len(blob) - off} trailing bytes")
    return Dataset(trajs, (dS, dA))


def _fmt(x: float) -> str:
    return repr(float(x))


def dumps_text(dataset: Dataset) -> str:
    dS, dA = dataset.dims
    lines = [TEXT_HEADER.format(dS=dS, dA=dA)]
    for traj in dataset.trajectories:
        for t in range(len(traj)):
            fields = [str(traj.id), str(t)]
            fields += [_fmt(v) for v in traj.states[t]]
            fields += [_fmt(v) for v in traj.actions[t]]
            fields.append(_fmt(traj.rewards[t]))
            fields += [_fmt(v) for v in traj.next_states[t]]
            fields.append("1" if traj.terminals[t] else "0")
            lines.append(" ".join(fields))
    return "\n".join(lines) + "\n"


def loads_text(text: str) -> Dataset:
    lines = text.splitlines()
    if not lines:
        raise ParseError("missing header", 1)
    head = lines[0].split()
    try:
        if head[0] != "TSDS" or head[1] != "v1":
            raise ValueError
        dS = int(head[2].removeprefix("dS="))
        dA = int(head[3].removeprefix("dA="))
        if not head[2].startswith("dS=") or not head[3].startswith("dA=") or len(head) != 4:
            raise ValueError
    except (ValueError, IndexError):
        raise ParseError(f"bad header {lines[0]!r}", 1) from None
    width = 2 + 2 * dS + dA + 2
    rows: Dict[int, List[Tuple[int, list]]] = {}
    order: List[int] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != width:
            raise SchemaError(f"line {lineno}: expected {width} fields for dS={dS} dA={dA}, got {len(parts)}")
        try:
            tid, step = int(parts[0]), int(parts[1])
            vals = [float(p) for p in parts[2:-1]]
            term = {"0": False, "1": True}[parts[-1]]
        except (ValueError, KeyError):
            raise ParseError(f"malformed record {line!r}", lineno) from None
        if tid not in rows:
            if step != 0:
                raise ParseError(f"trajectory {tid} starts at step {step}", lineno)
            rows[tid] = []
            order.append(tid)
        elif order[-1] != tid:
            raise ParseError(f"trajectory {tid} is not contiguous in the file", lineno)
        elif step != len(rows[tid]):
            raise ParseError(f"trajectory {tid}: expected step {len(rows[tid])}, got {step}", lineno)
        rows[tid].append((term, vals))
    trajs = []
    for tid in order:
        recs = rows[tid]
        vals = np.array([v for _, v in recs], dtype=np.float64).reshape(len(recs), -1)
        trajs.append(Trajectory(
            tid,
            vals[:, :dS], vals[:, dS:dS + dA], vals[:, dS + dA],
            vals[:, dS + dA + 1:], np.array([t for t, _ in recs]),
        ))
    return Dataset(trajs, (dS, dA))


def meta_path(path: str) -> str:
    return path + ".meta.json"


def save_dataset(dataset: Dataset, path: str, form: Optional[str] = None) -> None:
    """Write ``dataset`` to ``path``; ``form`` is ``"binary"`` or ``"text"``
    (default: text when the suffix is ``.txt``). Non-empty ``meta`` goes to a
    JSON sidecar."""
    check_valid(dataset)
    form = form or ("text" if path.endswith(".txt") else "binary")
    if form == "binary":
        with open(path, "wb") as f:
            f.write(dumps_binary(dataset))
    elif form == "text":
        with open(path, "w") as f:
            f.write(dumps_text(dataset))
    else:
        raise ValueError(f"unknown form {form!r}")
    if dataset.meta:
        with open(meta_path(path), "w") as f:
            json.dump(dataset.meta, f, indent=1, sort_keys=True)
            f.write("\n")


def load_dataset(path: str, form: Optional[str] = None) -> Dataset:
    form = form or ("text" if path.endswith(".txt") else "binary")
    if form == "binary":
        with open(path, "rb") as f:
            ds = loads_binary(f.read())
    else:
        with open(path) as f:
            ds = loads_text(f.read())
    if os.path.exists(meta_path(path)):
        with open(meta_path(path)) as f:
            ds.meta = json.load(f)
    return ds


# ---------------------------------------------------------------------------
# trajectory quantities


def trajectory_return(traj: Trajectory) -> float:
    """Undiscounted sum of rewards, accumulated in step order."""
    total = 0.0
    for r in traj.rewards:
        total += float(r)
    return total


LogDensity = Callable[..., float]


def trajectory_log_prob(traj: Trajectory, mode: str, densities: Mapping[str, LogDensity]) -> float:
    """Log-probability of ``traj`` under one of two factorisations.

    ``densities`` maps factor names to log-density callables:

    * ``"initial"``: ``f(s0)``, always required.
    * mode ``"policy"``: ``"policy"`` ``f(a, s)`` and ``"transition"`` ``f(s_next, s, a)``.
    * mode ``"inverse"``: ``"forward"`` ``f(s_next, s)`` and ``"inverse"`` ``f(a, s, s_next)``.

    Raises ``FloatingPointError`` naming the step if any factor is non-finite.
    """
    if mode not in ("policy", "inverse"):
        raise ValueError(f"unknown factorisation {mode!r}")

    def checked(value, where):
        value = float(value)
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite log density {value} at {where}")
        return value

    total = checked(densities["initial"](traj.states[0]), "initial state")
    for t in range(len(traj)):
        s, a, sn = traj.states[t], traj.actions[t], traj.next_states[t]
        if mode == "policy":
            total += checked(densities["policy"](a, s), f"step {t} (policy)")
            total += checked(densities["transition"](sn, s, a), f"step {t} (transition)")
        else:
            total += checked(densities["forward"](sn, s), f"step {t} (forward)")
            total += checked(densities["inverse"](a, s, sn), f"step {t} (inverse)")
    return total


def tabular_densities(p0: np.ndarray, policy: np.ndarray, transition: np.ndarray) -> Dict[str, LogDensity]:
    """Exact log-density callables for a tabular MDP, covering both factorisations.

    States and actions are encoded as length-1 vectors holding the integer index.
    ``policy[s, a]`` and ``transition[s, a, s']`` are probability tables.
    """
    p0 = np.asarray(p0, dtype=np.float64)
    policy = np.asarray(policy, dtype=np.float64)
    transition = np.asarray(transition, dtype=np.float64)
    joint = policy[:, :, None] * transition  # p(a, s' | s)
    forward = joint.sum(axis=1)  # p(s' | s)
    with np.errstate(invalid="ignore", divide="ignore"):
        inverse = joint / forward[:, None, :]  # p(a | s, s')

    def idx(v):
        return int(np.asarray(v).reshape(-1)[0])

    with np.errstate(divide="ignore"):
        return {
            "initial": lambda s: np.log(p0[idx(s)]),
            "policy": lambda a, s: np.log(policy[idx(s), idx(a)]),
            "transition": lambda sn, s, a: np.log(transition[idx(s), idx(a), idx(sn)]),
            "forward": lambda sn, s: np.log(forward[idx(s), idx(sn)]),
            "inverse": lambda a, s, sn: np.log(inverse[idx(s), idx(a), idx(sn)]),
        }


# ---------------------------------------------------------------------------
# state index

LINEAR_SCAN_DIM = 16


@dataclass(frozen=True)
class StateEntry:
    traj_id: int
    step: int
    state: np.ndarray


class StateIndex:
    """Every stored state occurrence, with Euclidean radius queries.

    One entry per ``state`` field of each transition, keyed ``(traj_id, step)``,
    plus one per terminal ``next_state`` keyed ``(traj_id, len(traj))``. Entries
    are kept sorted by that key. States are bucketed on a grid of side
    ``cell``; above ``LINEAR_SCAN_DIM`` dimensions queries fall back to a scan.
    """

    def __init__(self, traj_ids: np.ndarray, steps: np.ndarray, states: np.ndarray, cell: float = 0.1):
        order = np.lexsort((steps, traj_ids))
        self.traj_ids = np.asarray(traj_ids, dtype=np.int64)[order]
        self.steps = np.asarray(steps, dtype=np.int64)[order]
        self.states = np.asarray(states, dtype=np.float64)[order]
        self.cell = float(cell)
        self.dim = self.states.shape[1]
        self._pos = {(int(i), int(s)): k for k, (i, s) in enumerate(zip(self.traj_ids, self.steps))}
        self._buckets: Optional[Dict[Tuple[int, ...], np.ndarray]] = None
        if self.dim <= LINEAR_SCAN_DIM and len(self.states):
            keys = np.floor(self.states / self.cell).astype(np.int64)
            groups: Dict[Tuple[int, ...], List[int]] = {}
            for k, key in enumerate(map(tuple, keys)):
                groups.setdefault(key, []).append(k)
            self._buckets = {key: np.array(v, dtype=np.int64) for key, v in groups.items()}
            self._bucket_keys = np.array(list(self._buckets.keys()), dtype=np.int64).reshape(-1, self.dim)
            self._bucket_list = list(self._buckets.values())

    def __len__(self) -> int:
        return len(self.states)

    def entry(self, k: int) -> StateEntry:
        return StateEntry(int(self.traj_ids[k]), int(self.steps[k]), self.states[k])

    def position(self, traj_id: int, step: int) -> Optional[int]:
        """Row of entry ``(traj_id, step)``, or None if not indexed."""
        return self._pos.get((traj_id, step))

    def query(self, center: np.ndarray, eps: float) -> np.ndarray:
        """Rows within Euclidean distance ``eps`` of ``center``, ascending
        ``(traj_id, step)`` order."""
        center = np.asarray(center, dtype=np.float64)
        if math.isinf(eps):
            return np.arange(len(self.states))
        if eps < 0:
            raise ValueError("eps must be non-negative")
        if self._buckets is None:
            rows = np.arange(len(self.states))
        else:
            lo = np.floor((center - eps) / self.cell).astype(np.int64) - 1
            hi = np.floor((center + eps) / self.cell).astype(np.int64) + 1
            n_cells = float(np.prod((hi - lo + 1).astype(np.float64)))
            if n_cells <= len(self._buckets):
                found = [self._buckets[key] for key in product(*(range(a, b + 1) for a, b in zip(lo, hi)))
                         if key in self._buckets]
            else:
                inside = np.all((self._bucket_keys >= lo) & (self._bucket_keys <= hi), axis=1)
                found = [self._bucket_list[i] for i in np.flatnonzero(inside)]
            if not found:
                return np.zeros(0, dtype=np.int64)
            rows = np.sort(np.concatenate(found))
        d = np.sqrt(np.sum((self.states[rows] - center) ** 2, axis=1))
        return rows[d <= eps]

    def radius_query(self, center: np.ndarray, eps: float) -> List[StateEntry]:
        return [self.entry(k) for k in self.query(center, eps)]


def build_state_index(dataset: Dataset, cell: float = 0.1) -> StateIndex:
    ids, steps, states = [], [], []
    for traj in dataset.trajectories:
        H = len(traj)
        ids.append(np.full(H, traj.id))
        steps.append(np.arange(H))
        states.append(traj.states)
        if H and traj.terminals[-1]:
            ids.append(np.array([traj.id]))
            steps.append(np.array([H]))
            states.append(traj.next_states[-1:])
    if not ids:
        return StateIndex(np.zeros(0), np.zeros(0), np.zeros((0, dataset.state_dim)), cell)
    return StateIndex(np.concatenate(ids), np.concatenate(steps), np.concatenate(states), cell)


def linear_scan(index: StateIndex, center: np.ndarray, eps: float) -> List[Tuple[int, int]]:
    """O(N) reference for :meth:`StateIndex.query`."""
    out = []
    for k in range(len(index)):
        if math.isinf(eps) or float(np.linalg.norm(index.states[k] - center)) <= eps:
            out.append((int(index.traj_ids[k]), int(index.steps[k])))
    return out


def concat_trajectories(trajs: Iterable[Trajectory], dims: Tuple[int, int], meta=None) -> Dataset:
    return Dataset(list(trajs), dims, dict(meta or {}))
