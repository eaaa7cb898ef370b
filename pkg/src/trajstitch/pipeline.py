"""Run-directory pipeline: every command reads earlier artifacts from the run
directory and writes its own.

Layout (``X`` is the expert percentage, ``i`` a TS seed index, ``j`` a BC
seed index, ``k`` a stitching iteration)::

    config.yaml
    data/xX/original.tsds            data/xX/ts{i}.tsds   data/xX/ts{i}_iter{k}.tsds
    models/xX/ts{i}/manifest.json    logs/xX_ts{i}.jsonl
    policies/xX/bc_b{j}.tsnn         policies/xX/tsbc_t{i}_b{j}.tsnn   ...
    metrics.csv                      report/...
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .config import RunConfig, config_hash, dump_config, load_config
from .data import Dataset, load_dataset, save_dataset
from .envs import (
    EnvSpec, GaussianExpert, action_mse, evaluate_policy, expert_action, generate_mixed_dataset, kl_to_expert,
    make_env,
)
from .models import load_models, save_models, train_value
from .policy import Policy, load_policy, save_policy, train_bc, train_gaussian_bc, train_weighted_bc
from .stitching import ModelConfigs, StitchConfig, StitchLog, derive_seed, run_ts, train_env_models

log = logging.getLogger(__name__)

COMMANDS = ("gen", "train-models", "stitch", "bc", "eval", "report", "pipeline")
METRIC_FIELDS = ("metric", "seed", "iteration", "x_percent", "value")
# TS+BC rows use seed = TS_SEED_STRIDE * ts_seed + bc_seed
TS_SEED_STRIDE = 1000


class MissingArtifact(FileNotFoundError):
    pass


def fmt_x(x: float) -> str:
    return f"{x:g}"


@dataclass
class Run:
    """A configured run directory."""

    cfg: RunConfig
    out: str
    command: str = "pipeline"

    # -- paths -------------------------------------------------------------

    def path(self, *parts: str) -> str:
        return os.path.join(self.out, *parts)

    def data_path(self, x: float, name: str = "original") -> str:
        return self.path("data", f"x{fmt_x(x)}", f"{name}.tsds")

    def ts_path(self, x: float, i: int, k: Optional[int] = None) -> str:
        return self.data_path(x, f"ts{i}" if k is None else f"ts{i}_iter{k}")

    def models_dir(self, x: float, i: int) -> str:
        return self.path("models", f"x{fmt_x(x)}", f"ts{i}")

    def log_path(self, x: float, i: int) -> str:
        return self.path("logs", f"x{fmt_x(x)}_ts{i}.jsonl")

    def policy_path(self, x: float, name: str) -> str:
        return self.path("policies", f"x{fmt_x(x)}", f"{name}.tsnn")

    # -- derived settings --------------------------------------------------

    @property
    def env(self) -> EnvSpec:
        return make_env(self.cfg.env.name, **self.cfg.env.params)

    def ts_seed(self, i: int) -> int:
        return derive_seed(self.cfg.seed, 0x75, i)

    def bc_seed(self, j: int) -> int:
        return derive_seed(self.cfg.seed, 0xBC, j)

    def stitch_config(self, i: int) -> StitchConfig:
        return StitchConfig(seed=self.ts_seed(i), **asdict(self.cfg.stitch))

    def model_configs(self) -> ModelConfigs:
        m = self.cfg.models
        return ModelConfigs(m.forward, m.inverse, m.reward, m.value)

    def diagnostic(self, x: float) -> bool:
        return any(abs(x - d) < 1e-12 for d in self.cfg.eval.diagnostics_x)

    def producer(self) -> dict:
        return {"command": self.command, "config_hash": config_hash(self.cfg), "seed": self.cfg.seed,
                "version": __version__}

    def header(self) -> str:
        p = self.producer()
        return f"# trajstitch {p['version']} command={p['command']} config_hash={p['config_hash']} seed={p['seed']}\n"

    def require(self, path: str) -> str:
        if not os.path.exists(path):
            raise MissingArtifact(f"missing prerequisite artifact: {path}")
        return path


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("TS_THREADS", "1")))
    except ValueError:
        return 1


def _map(fn: Callable, jobs: Sequence) -> list:
    """Ordered map; fans out over processes when TS_THREADS > 1. Every job
    seeds its own RNG streams, so results do not depend on scheduling."""
    n = _threads()
    if n <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(n, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


def _save_ds(run: Run, ds: Dataset, path: str, **extra) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    meta = dict(ds.meta)
    meta["producer"] = dict(run.producer(), **extra)
    save_dataset(Dataset(ds.trajectories, ds.dims, meta), path)


def _save_policy(run: Run, policy: Policy, path: str, **extra) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    save_policy(policy, path)
    with open(path + ".meta.json") as f:
        meta = json.load(f)
    meta["producer"] = dict(run.producer(), **extra)
    with open(path + ".meta.json", "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# commands


def cmd_gen(run: Run) -> None:
    env = run.env
    for x in run.cfg.data.x_percent:
        d = run.cfg.data
        ds = generate_mixed_dataset(env, x, d.n_traj, d.noise_std, run.cfg.seed)
        _save_ds(run, ds, run.data_path(x))
        log.info("gen x=%s: %d trajectories, mean return %.4f", fmt_x(x), len(ds), ds.mean_return())


def _train_models_job(args) -> None:
    run, x, i = args
    ds = load_dataset(run.require(run.data_path(x)))
    models = train_env_models(ds, run.model_configs(), run.ts_seed(i), run.env.action_bound)
    save_models(models, run.models_dir(x, i), {"producer": run.producer(), "ts_index": i})


def cmd_train_models(run: Run) -> None:
    jobs = [(run, x, i) for x in run.cfg.data.x_percent for i in run.cfg.seeds.ts]
    for x in run.cfg.data.x_percent:
        run.require(run.data_path(x))
    _map(_train_models_job, jobs)


def _stitch_job(args) -> None:
    run, x, i = args
    ds = load_dataset(run.require(run.data_path(x)))
    models = load_models(run.require(run.models_dir(x, i)))
    out, stitch_log, history = run_ts(ds, run.stitch_config(i), run.model_configs(), models=models,
                                      action_bound=run.env.action_bound, keep_iterations=True)
    _save_ds(run, out, run.ts_path(x, i), ts_index=i)
    if run.diagnostic(x):
        for k, it_ds in enumerate(history[1:-1], start=1):
            _save_ds(run, it_ds, run.ts_path(x, i, k), ts_index=i, iteration=k)
    os.makedirs(os.path.dirname(run.log_path(x, i)), exist_ok=True)
    with open(run.log_path(x, i), "w") as f:
        f.write(json.dumps(dict(run.producer(), type="header", ts_index=i), sort_keys=True) + "\n")
        f.write(stitch_log.dumps())


def cmd_stitch(run: Run) -> None:
    jobs = [(run, x, i) for x in run.cfg.data.x_percent for i in run.cfg.seeds.ts]
    for _, x, i in jobs:
        run.require(run.data_path(x))
        run.require(os.path.join(run.models_dir(x, i), "manifest.json"))
    _map(_stitch_job, jobs)


def _policy_jobs(run: Run) -> List[Tuple[str, float, str, int, Optional[int], Optional[int]]]:
    """(kind, x, name, bc_index, ts_index, iteration) for every policy."""
    K = run.cfg.stitch.K
    jobs = []
    for x in run.cfg.data.x_percent:
        diag = run.diagnostic(x)
        for j in run.cfg.seeds.bc:
            jobs.append(("bc", x, f"bc_b{j}", j, None, None))
            if diag:
                jobs.append(("wbc", x, f"wbc_b{j}", j, None, None))
                jobs.append(("gbc", x, f"gbc_b{j}", j, None, None))
            for i in run.cfg.seeds.ts:
                jobs.append(("bc", x, f"tsbc_t{i}_b{j}", j, i, K))
                if diag:
                    jobs.append(("gbc", x, f"gtsbc_t{i}_b{j}", j, i, K))
                    for k in range(1, K):
                        jobs.append(("bc", x, f"tsbc_t{i}_k{k}_b{j}", j, i, k))
    return jobs


def _dataset_for(run: Run, x: float, i: Optional[int], k: Optional[int]) -> str:
    if i is None:
        return run.data_path(x)
    if k == run.cfg.stitch.K:
        return run.ts_path(x, i)
    return run.ts_path(x, i, k)


def _bc_job(args) -> None:
    run, (kind, x, name, j, i, k) = args
    ds = load_dataset(run.require(_dataset_for(run, x, i, k)))
    bc_cfg = replace(run.cfg.bc, seed=run.bc_seed(j))
    bound = run.env.action_bound
    if kind == "bc":
        policy = train_bc(ds, bc_cfg, bound)
    elif kind == "gbc":
        policy = train_gaussian_bc(ds, bc_cfg, bound)
    else:
        vf = train_value(ds, replace(run.cfg.models.value, seed=derive_seed(run.cfg.seed, 0x7A1)))
        policy = train_weighted_bc(ds, vf, bc_cfg, bound)
    _save_policy(run, policy, run.policy_path(x, name), bc_index=j, ts_index=i, iteration=k)


def cmd_bc(run: Run) -> None:
    jobs = _policy_jobs(run)
    for kind, x, name, j, i, k in jobs:
        run.require(_dataset_for(run, x, i, k))
    _map(_bc_job, [(run, job) for job in jobs])


def _eval_job(args) -> List[Tuple[str, int, int, float, float]]:
    run, (kind, x, name, j, i, k) = args
    env = run.env
    ev = run.cfg.eval
    policy = load_policy(run.require(run.policy_path(x, name)))
    seed = j if i is None else TS_SEED_STRIDE * i + j
    it = 0 if k is None else k
    prefix = {"bc": "bc" if i is None else "tsbc", "wbc": "wbc", "gbc": "bc" if i is None else "tsbc"}[kind]
    rows = []
    if kind == "gbc":
        kl = kl_to_expert(GaussianExpert(env), policy, env, ev.kl_rollouts, ev.seed)
        rows.append((f"kl_{prefix}", seed, it, x, kl))
    else:
        mean, _ = evaluate_policy(env, policy, ev.n_eval, ev.seed)
        rows.append((f"{prefix}_return", seed, it, x, mean))
        if kind == "bc":
            rows.append((f"action_mse_{prefix}", seed, it, x,
                         action_mse(lambda s: expert_action(env, s), policy, env, ev.kl_rollouts, ev.seed)))
    return rows


def _stitch_rows(run: Run, x: float, i: int) -> List[Tuple[str, int, int, float, float]]:
    slog = StitchLog.load(run.require(run.log_path(x, i)))
    rows = []
    for it in slog.iterations:
        if it.iteration == 0:
            rows.append(("stored_mean_return", i, 0, x, it.mean_return_before))
        rows.append(("stored_mean_return", i, it.iteration + 1, x, it.mean_return_after))
        rows.append(("replaced", i, it.iteration + 1, x, float(it.replaced)))
        rows.append(("stitch_events", i, it.iteration + 1, x, float(it.stitch_events)))
    return rows


def cmd_eval(run: Run) -> None:
    jobs = _policy_jobs(run)
    for kind, x, name, *_ in jobs:
        run.require(run.policy_path(x, name))
    rows = []
    for x in run.cfg.data.x_percent:
        for i in run.cfg.seeds.ts:
            rows += _stitch_rows(run, x, i)
    for chunk in _map(_eval_job, [(run, job) for job in jobs]):
        rows += chunk
    rows.sort(key=lambda r: (r[0], r[3], r[2], r[1]))
    write_metrics(run.path("metrics.csv"), rows, run.header())


def write_metrics(path: str, rows: Iterable[Tuple], header: str = "") -> None:
    buf = io.StringIO()
    buf.write(header)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for metric, seed, iteration, x, value in rows:
        w.writerow([metric, int(seed), int(iteration), repr(float(x)), repr(float(value))])
    with open(path, "w") as f:
        f.write(buf.getvalue())


def read_metrics(path: str) -> List[dict]:
    with open(path) as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    out = []
    for rec in csv.DictReader(lines):
        out.append({"metric": rec["metric"], "seed": int(rec["seed"]), "iteration": int(rec["iteration"]),
                    "x_percent": float(rec["x_percent"]), "value": float(rec["value"])})
    return out


def cmd_report(run: Run) -> None:
    from .report import emit_report
    emit_report(run.out, header=run.header())


STEPS = {
    "gen": cmd_gen,
    "train-models": cmd_train_models,
    "stitch": cmd_stitch,
    "bc": cmd_bc,
    "eval": cmd_eval,
    "report": cmd_report,
}


def execute(command: str, cfg: RunConfig, out: str) -> None:
    if command not in COMMANDS:
        raise ValueError(f"unknown command {command!r}")
    os.makedirs(out, exist_ok=True)
    names = list(STEPS) if command == "pipeline" else [command]
    with open(os.path.join(out, "config.yaml"), "w") as f:
        f.write(Run(cfg, out, command).header())
        f.write(dump_config(cfg))
    for name in names:
        log.info("running %s", name)
        STEPS[name](Run(cfg, out, name))
