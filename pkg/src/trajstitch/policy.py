"""Behavioural cloning policies: deterministic (tanh-bounded), value-weighted,
and Gaussian (for divergence estimates against the expert)."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from .data import Dataset
from .models import Normalizer, TrainingError, _holdout_split
from .nn import (
    AdamHyper, MLPSpec, Net, diag_gaussian_log_density, forward, load_net, loss_and_grad, make_net,
    minibatches, save_net, step_nets,
)

log = logging.getLogger(__name__)

POLICY_KINDS = ("deterministic", "gaussian")
WEIGHT_SHIFT = 1e-3


@dataclass
class BCConfig:
    hidden: Tuple[int, ...] = (256, 256)
    epochs: int = 100
    batch_size: int = 256
    lr: float = 1e-3
    holdout: Optional[float] = 0.05  # None disables best-checkpoint selection
    seed: int = 0


@dataclass
class Policy:
    kind: str
    net: Net
    action_bound: float
    state_norm: Normalizer
    history: Optional[List[float]] = None
    best_epoch: Optional[int] = None

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if not self.action_bound > 0:
            raise ValueError("action_bound must be positive")

    def mean_std(self, s: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        x = self.state_norm(np.atleast_2d(s))
        if self.kind == "gaussian":
            return forward(self.net.spec, self.net.state, x)
        out = forward(self.net.spec, self.net.state, x)
        return out, np.zeros_like(out)

    def log_prob(self, s: np.ndarray, a: np.ndarray):
        if self.kind != "gaussian":
            raise ValueError("log_prob needs a gaussian policy")
        mu, std = self.mean_std(s)
        lp = diag_gaussian_log_density(mu, std, np.atleast_2d(a))
        return float(lp[0]) if np.ndim(s) == 1 else lp

    def sample(self, s: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        mu, std = self.mean_std(s)
        if self.kind == "gaussian":
            mu = mu + std * rng.standard_normal(mu.shape)
        return mu[0] if np.ndim(s) == 1 else mu

    def __call__(self, s: np.ndarray) -> np.ndarray:
        return act(self, s)


def act(policy: Policy, s: np.ndarray, mode: str = "mean", seed: Optional[int] = None) -> np.ndarray:
    """Action for state(s) ``s``. Deterministic policies ignore ``mode``;
    Gaussian ones return the mean or a sample seeded by ``seed``."""
    if mode not in ("mean", "sample"):
        raise ValueError(f"unknown mode {mode!r}")
    if policy.kind == "gaussian" and mode == "sample":
        return policy.sample(s, np.random.default_rng(seed))
    mu, _ = policy.mean_std(s)
    return mu[0] if np.ndim(s) == 1 else mu


def _train(dataset: Dataset, cfg: BCConfig, kind: str, action_bound: float,
           weights: Optional[np.ndarray] = None) -> Policy:
    arr = dataset.arrays()
    S, A = arr["states"], arr["actions"]
    n = len(S)
    if n == 0:
        raise TrainingError("cannot clone an empty dataset")
    rng = np.random.default_rng([cfg.seed, 0xBC])
    norm = Normalizer.fit(S)
    X = norm(S)
    dS, dA = dataset.state_dim, dataset.action_dim
    if kind == "gaussian":
        spec = MLPSpec((dS, *cfg.hidden, dA), output_head="gaussian")
        loss = "gaussian_nll"
    else:
        spec = MLPSpec((dS, *cfg.hidden, dA), output_head="tanh_scaled", bound=action_bound)
        loss = "bc_mse" if weights is None else "weighted_bc_mse"
    net = make_net(spec, rng, final_scale=0.01)
    policy = Policy(kind, net, action_bound, norm)

    if cfg.holdout and n >= 20:
        train_idx, val_idx = _holdout_split(n, cfg.holdout, rng)
    else:
        train_idx, val_idx = np.arange(n), None

    def batch(idx):
        b = {"x": X[idx], "y": A[idx]}
        if weights is not None:
            b["w"] = weights[idx]
        return b

    hyper = AdamHyper(lr=cfg.lr)
    history = []
    best_loss, best_params, best_epoch = np.inf, None, None
    for epoch in range(cfg.epochs):
        total = 0.0
        for k in minibatches(len(train_idx), cfg.batch_size, rng):
            idx = train_idx[k]
            value, grad = loss_and_grad(net, batch(idx), loss)
            if not np.isfinite(value) or not np.all(np.isfinite(grad)):
                raise TrainingError(f"bc: non-finite loss at epoch {epoch}")
            step_nets([net], grad, hyper)
            total += value * len(idx)
        history.append(total / len(train_idx))
        if val_idx is not None:
            val, _ = loss_and_grad(net, batch(val_idx), loss)
            if val < best_loss:
                best_loss, best_params, best_epoch = val, net.params.copy(), epoch
    if best_params is not None:
        net.state.params[:] = best_params
    policy.history = history
    policy.best_epoch = best_epoch
    log.debug("bc[%s]: loss %.4g -> %.4g, best epoch %s", kind, history[0] if history else np.nan,
              history[-1] if history else np.nan, best_epoch)
    return policy


def train_bc(dataset: Dataset, cfg: BCConfig, action_bound: float = 1.0) -> Policy:
    """Deterministic policy minimising mean ||pi(s) - a||^2 over all transitions."""
    return _train(dataset, cfg, "deterministic", action_bound)


def value_weights(values: np.ndarray, shift: float = WEIGHT_SHIFT) -> np.ndarray:
    """``V - min V + shift``, rescaled to mean one (constant ``V`` gives all ones)."""
    w = np.asarray(values, dtype=np.float64) - np.min(values) + shift
    return w / np.mean(w)


def train_weighted_bc(dataset: Dataset, value_fn: Callable[[np.ndarray], np.ndarray], cfg: BCConfig,
                      action_bound: float = 1.0, weights: Optional[np.ndarray] = None) -> Policy:
    """BC with per-transition weights from the value of each state.

    ``weights`` overrides the value-derived weights when given.
    """
    if weights is None:
        weights = value_weights(np.asarray(value_fn(dataset.arrays()["states"]), dtype=np.float64))
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(weights) != dataset.n_transitions or np.any(weights < 0):
        raise ValueError("need one nonnegative weight per transition")
    return _train(dataset, cfg, "deterministic", action_bound, weights)


def train_gaussian_bc(dataset: Dataset, cfg: BCConfig, action_bound: float = 1.0) -> Policy:
    """Maximum-likelihood diagonal-Gaussian policy."""
    return _train(dataset, cfg, "gaussian", action_bound)


def save_policy(policy: Policy, path: str) -> None:
    save_net(policy.net, path)
    meta = {"kind": policy.kind, "action_bound": policy.action_bound,
            "state_norm": policy.state_norm.to_json(), "best_epoch": policy.best_epoch}
    with open(path + ".meta.json", "w") as f:
        json.dump(meta, f, indent=1, sort_keys=True)


def load_policy(path: str) -> Policy:
    net = load_net(path)
    with open(path + ".meta.json") as f:
        meta = json.load(f)
    return Policy(meta["kind"], net, float(meta["action_bound"]), Normalizer.from_json(meta["state_norm"]),
                  best_epoch=meta.get("best_epoch"))
