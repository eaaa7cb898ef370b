"""Learned environment models used by trajectory stitching.

* ``ForwardEnsemble``: action-free Gaussian next-state models p(s'|s).
* ``InverseModel``: conditional VAE over actions given (s, s').
* ``RewardModel``: reward predictor for synthetic transitions (wgan, mlp,
  gaussian or vae).
* ``ValueFunction``: minimum of two state-value networks fitted by TD.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from .data import Dataset
from .nn import (
    AdamHyper, MLPSpec, Net, diag_gaussian_log_density, forward, gaussian_kl_standard,
    load_net, loss_and_grad, make_net, minibatches, save_net, step_nets,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Raised when a training loss becomes NaN or infinite."""


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Normalizer":
        x = np.asarray(x, dtype=np.float64)
        if len(x) == 0:
            return cls(np.zeros(x.shape[1]), np.ones(x.shape[1]))
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std < 1e-8, 1.0, std))

    @classmethod
    def identity(cls, d: int) -> "Normalizer":
        return cls(np.zeros(d), np.ones(d))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def invert(self, y: np.ndarray) -> np.ndarray:
        return y * self.std + self.mean

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "Normalizer":
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64))


def _fit(nets: Sequence[Net], loss: str, make_batch, n: int, epochs: int, batch_size: int,
         hyper: AdamHyper, rng: np.random.Generator, n_train: Optional[int] = None, after_step=None,
         name: str = "model") -> List[float]:
    """Minibatch Adam on ``nets[:n_train]``; returns the mean loss per epoch."""
    train = list(nets[:n_train] if n_train else nets)
    history = []
    for epoch in range(epochs):
        total, count = 0.0, 0
        for idx in minibatches(n, batch_size, rng):
            value, grad = loss_and_grad(nets, make_batch(idx), loss)
            if not np.isfinite(value) or not np.all(np.isfinite(grad)):
                raise TrainingError(f"{name}: non-finite loss at epoch {epoch}")
            step_nets(train, grad, hyper)
            if after_step is not None:
                after_step()
            total += value * len(idx)
            count += len(idx)
        history.append(total / max(count, 1))
    log.debug("%s: loss %.4g -> %.4g over %d epochs", name, history[0] if history else np.nan,
              history[-1] if history else np.nan, epochs)
    return history


def _holdout_split(n: int, fraction: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_test = max(1, int(round(n * fraction)))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


# ---------------------------------------------------------------------------
# forward dynamics ensemble


@dataclass
class ForwardConfig:
    hidden: Tuple[int, ...] = (200, 200, 200)
    n_members: int = 7
    n_keep: int = 5
    epochs: int = 100
    batch_size: int = 256
    lr: float = 3e-4
    holdout: float = 0.05
    seed: int = 0


@dataclass
class ForwardEnsemble:
    """Gaussian next-state models trained on ``s -> s'`` pairs.

    Each member predicts the normalised offset ``s' - s``; :meth:`predict`
    maps back so densities are exact diagonal Gaussians over ``s'``.
    """

    members: List[Net]
    val_nll: List[float]
    state_norm: Normalizer
    delta_norm: Normalizer
    trained_count: int = 7
    seeds: List[int] = field(default_factory=list)

    def predict(self, s: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Means and stds, each of shape (members, n, dS)."""
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        x = self.state_norm(s)
        means, stds = [], []
        for net in self.members:
            m, sd = forward(net.spec, net.state, x)
            means.append(s + self.delta_norm.invert(m))
            stds.append(sd * self.delta_norm.std)
        return np.stack(means), np.stack(stds)


def train_forward_ensemble(dataset: Dataset, cfg: ForwardConfig) -> ForwardEnsemble:
    arr = dataset.arrays()
    n = len(arr["states"])
    if n < 20:
        raise ValueError(f"need at least 20 transitions to train the forward ensemble, got {n}")
    if cfg.n_keep > cfg.n_members:
        raise ValueError("n_keep cannot exceed n_members")
    S, S2 = arr["states"], arr["next_states"]
    state_norm = Normalizer.fit(S)
    delta_norm = Normalizer.fit(S2 - S)
    X = state_norm(S)
    Y = delta_norm(S2 - S)
    train_idx, test_idx = _holdout_split(n, cfg.holdout, np.random.default_rng([cfg.seed, 0xF0]))
    dS = dataset.state_dim
    spec = MLPSpec((dS, *cfg.hidden, dS), "relu", "gaussian")
    hyper = AdamHyper(lr=cfg.lr)
    members, nlls, seeds = [], [], []
    for i in range(cfg.n_members):
        rng = np.random.default_rng([cfg.seed, 0xF1, i])
        net = make_net(spec, rng, final_scale=0.1)
        _fit([net], "gaussian_nll", lambda idx: {"x": X[train_idx[idx]], "y": Y[train_idx[idx]]},
             len(train_idx), cfg.epochs, cfg.batch_size, hyper, rng, name=f"forward[{i}]")
        loss, _ = loss_and_grad(net, {"x": X[test_idx], "y": Y[test_idx]}, "gaussian_nll")
        members.append(net)
        nlls.append(float(loss))
        seeds.append(i)
    order = sorted(range(cfg.n_members), key=lambda i: (nlls[i], i))[:cfg.n_keep]
    return ForwardEnsemble([members[i] for i in order], [nlls[i] for i in order], state_norm,
                           delta_norm, cfg.n_members, [seeds[i] for i in order])


def member_log_density(ensemble: ForwardEnsemble, s: np.ndarray, s_next: np.ndarray) -> np.ndarray:
    """log p_i(s_next | s) for each retained member; shape (members,) for a
    single pair or (members, n) for batches."""
    single = np.ndim(s) == 1
    mu, std = ensemble.predict(s)
    out = diag_gaussian_log_density(mu, std, np.atleast_2d(s_next)[None])
    return out[:, 0] if single else out


def gate_from_log_densities(cand_logp: np.ndarray, orig_logp: np.ndarray) -> np.ndarray:
    """``min_i p_i(cand) > mean_i p_i(orig)`` in the log domain.

    ``cand_logp`` has shape (members, k) for k candidates, ``orig_logp``
    shape (members,).
    """
    m = orig_logp.shape[0]
    log_mean_orig = logsumexp(orig_logp) - np.log(m)
    return np.min(cand_logp, axis=0) > log_mean_orig


def likelihood_gate(ensemble: ForwardEnsemble, s: np.ndarray, s_orig_next: np.ndarray,
                    s_cand_next: np.ndarray) -> bool:
    """True iff the least confident member rates the candidate more likely
    than the members' mean density of the observed next state."""
    orig = member_log_density(ensemble, s, s_orig_next)
    cand = member_log_density(ensemble, s, s_cand_next)
    return bool(gate_from_log_densities(cand[:, None], orig)[0])


# ---------------------------------------------------------------------------
# inverse dynamics CVAE


@dataclass
class InverseConfig:
    hidden: Tuple[int, ...] = (256, 256)
    epochs: int = 100
    batch_size: int = 100
    lr: float = 1e-4
    beta: float = 0.5
    latent_dim: Optional[int] = None  # default 2 * action dim
    seed: int = 0


@dataclass
class InverseModel:
    encoder: Net
    decoder: Net
    latent_dim: int
    state_norm: Normalizer
    action_bound: float
    delta_norm: Optional[Normalizer] = None
    history: List[float] = field(default_factory=list)

    def cond(self, s: np.ndarray, s_next: np.ndarray) -> np.ndarray:
        """Network input for the pair: the normalised state and the
        normalised change ``s_next - s`` (same information as the pair, but
        the small differences that determine the action are not drowned
        out by the state scale)."""
        s, s_next = np.atleast_2d(s), np.atleast_2d(s_next)
        delta_norm = self.delta_norm or self.state_norm
        return np.concatenate([self.state_norm(s), delta_norm(s_next - s)], axis=1)


def train_inverse_cvae(dataset: Dataset, cfg: InverseConfig, action_bound: float = 1.0) -> InverseModel:
    arr = dataset.arrays()
    dS, dA = dataset.dims
    dz = cfg.latent_dim or 2 * dA
    state_norm = Normalizer.fit(arr["states"])
    delta_norm = Normalizer.fit(arr["next_states"] - arr["states"])
    rng = np.random.default_rng([cfg.seed, 0x1A])
    enc = make_net(MLPSpec((2 * dS + dA, *cfg.hidden, dz), "relu", "gaussian"), rng, final_scale=0.1)
    dec = make_net(MLPSpec((2 * dS + dz, *cfg.hidden, dA), "relu", "tanh_scaled", action_bound), rng)
    model = InverseModel(enc, dec, dz, state_norm, action_bound, delta_norm)
    C = model.cond(arr["states"], arr["next_states"])
    A = arr["actions"]
    noise_rng = np.random.default_rng([cfg.seed, 0x1B])

    def batch(idx):
        return {"cond": C[idx], "target": A[idx], "eps": noise_rng.standard_normal((len(idx), dz)),
                "beta": cfg.beta}

    model.history = _fit([enc, dec], "cvae_elbo", batch, len(C), cfg.epochs, cfg.batch_size,
                         AdamHyper(lr=cfg.lr), rng, name="inverse")
    return model


def kl_to_prior(mu, std) -> np.ndarray:
    return gaussian_kl_standard(mu, std)


def generate_action(inverse: InverseModel, s: np.ndarray, s_next: np.ndarray, z_mode: str = "prior_mean",
                    rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Decode an action connecting ``s`` to ``s_next``. ``prior_mean`` uses
    z = 0 (deterministic); ``sample`` draws z ~ N(0, I) from ``rng``."""
    single = np.ndim(s) == 1
    c = inverse.cond(s, s_next)
    if z_mode == "prior_mean":
        z = np.zeros((len(c), inverse.latent_dim))
    elif z_mode == "sample":
        if rng is None:
            raise ValueError("z_mode='sample' needs an rng")
        z = rng.standard_normal((len(c), inverse.latent_dim))
    else:
        raise ValueError(f"unknown z_mode {z_mode!r}")
    a = forward(inverse.decoder.spec, inverse.decoder.state, np.concatenate([c, z], axis=1))
    return a[0] if single else a


# ---------------------------------------------------------------------------
# reward models

REWARD_KINDS = ("wgan", "mlp", "gaussian", "vae")


@dataclass
class RewardConfig:
    kind: str = "wgan"
    hidden: Tuple[int, ...] = (512, 512)
    epochs: int = 100
    batch_size: int = 256
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    l2: float = 1e-4
    z_dim: int = 2
    n_critic: int = 5
    clip: float = 0.01
    vae_beta: float = 0.5
    seed: int = 0


@dataclass
class RewardModel:
    kind: str
    nets: Dict[str, Net]
    z_dim: int
    input_norm: Normalizer
    reward_norm: Normalizer
    clip: float = 0.01
    history: List[float] = field(default_factory=list)

    def features(self, s, a, s_next) -> np.ndarray:
        x = np.concatenate([np.atleast_2d(s), np.atleast_2d(a), np.atleast_2d(s_next)], axis=1)
        return self.input_norm(x)


def train_reward_model(dataset: Dataset, cfg: RewardConfig) -> RewardModel:
    if cfg.kind not in REWARD_KINDS:
        raise ValueError(f"unknown reward model kind {cfg.kind!r}")
    arr = dataset.arrays()
    raw_x = np.concatenate([arr["states"], arr["actions"], arr["next_states"]], axis=1)
    input_norm = Normalizer.fit(raw_x)
    reward_norm = Normalizer.fit(arr["rewards"][:, None])
    X = input_norm(raw_x)
    Y = reward_norm(arr["rewards"][:, None])
    n, dx = X.shape
    rng = np.random.default_rng([cfg.seed, 0x2E])
    hyper = AdamHyper(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, l2=cfg.l2)
    noise_rng = np.random.default_rng([cfg.seed, 0x2F])
    model = RewardModel(cfg.kind, {}, cfg.z_dim, input_norm, reward_norm, cfg.clip)

    if cfg.kind == "mlp":
        net = make_net(MLPSpec((dx, *cfg.hidden, 1)), rng, final_scale=0.01)
        model.nets["net"] = net
        model.history = _fit([net], "mse", lambda idx: {"x": X[idx], "y": Y[idx]}, n, cfg.epochs,
                             cfg.batch_size, hyper, rng, name="reward[mlp]")
    elif cfg.kind == "gaussian":
        net = make_net(MLPSpec((dx, *cfg.hidden, 1), "relu", "gaussian"), rng, final_scale=0.01)
        model.nets["net"] = net
        model.history = _fit([net], "gaussian_nll", lambda idx: {"x": X[idx], "y": Y[idx]}, n, cfg.epochs,
                             cfg.batch_size, hyper, rng, name="reward[gaussian]")
    elif cfg.kind == "vae":
        enc = make_net(MLPSpec((dx + 1, *cfg.hidden, cfg.z_dim), "relu", "gaussian"), rng, final_scale=0.1)
        dec = make_net(MLPSpec((dx + cfg.z_dim, *cfg.hidden, 1)), rng, final_scale=0.01)
        model.nets.update(encoder=enc, decoder=dec)
        model.history = _fit(
            [enc, dec], "cvae_elbo",
            lambda idx: {"cond": X[idx], "target": Y[idx],
                         "eps": noise_rng.standard_normal((len(idx), cfg.z_dim)), "beta": cfg.vae_beta},
            n, cfg.epochs, cfg.batch_size, hyper, rng, name="reward[vae]")
    else:
        model.history = _train_wgan(model, X, Y, cfg, hyper, rng, noise_rng)
    return model


def clip_weights(net: Net, c: float) -> None:
    np.clip(net.state.params, -c, c, out=net.state.params)


def _train_wgan(model: RewardModel, X, Y, cfg: RewardConfig, hyper: AdamHyper, rng, noise_rng) -> List[float]:
    n, dx = X.shape
    gen = make_net(MLPSpec((cfg.z_dim + dx, *cfg.hidden, 1)), rng, final_scale=0.01)
    disc = make_net(MLPSpec((dx + 1, *cfg.hidden, 1)), rng)
    clip_weights(disc, cfg.clip)
    model.nets.update(generator=gen, discriminator=disc)
    history = []
    for epoch in range(cfg.epochs):
        gen_losses = []
        for k, idx in enumerate(minibatches(n, cfg.batch_size, rng)):
            z = noise_rng.standard_normal((len(idx), cfg.z_dim))
            fake_r = forward(gen.spec, gen.state, np.concatenate([z, X[idx]], axis=1))
            batch = {"real": np.concatenate([X[idx], Y[idx]], axis=1),
                     "fake": np.concatenate([X[idx], fake_r], axis=1)}
            value, grad = loss_and_grad(disc, batch, "wgan_disc")
            if not np.isfinite(value):
                raise TrainingError(f"reward[wgan]: non-finite critic loss at epoch {epoch}")
            step_nets([disc], grad, hyper)
            clip_weights(disc, cfg.clip)
            if (k + 1) % cfg.n_critic == 0:
                gidx = rng.integers(0, n, size=len(idx))
                z = noise_rng.standard_normal((len(gidx), cfg.z_dim))
                value, grad = loss_and_grad((gen, disc), {"cond": X[gidx], "z": z}, "wgan_gen")
                if not np.isfinite(value):
                    raise TrainingError(f"reward[wgan]: non-finite generator loss at epoch {epoch}")
                step_nets([gen], grad, hyper)
                gen_losses.append(value)
        history.append(float(np.mean(gen_losses)) if gen_losses else float("nan"))
    return history


def predict_reward(model: RewardModel, s, a, s_next, z_mode: str = "prior_mean",
                   rng: Optional[np.random.Generator] = None):
    """Predicted reward(s); scalar for a single transition."""
    single = np.ndim(s) == 1
    x = model.features(s, a, s_next)
    n = len(x)

    def latent(dim):
        if z_mode == "prior_mean":
            return np.zeros((n, dim))
        if z_mode == "sample":
            if rng is None:
                raise ValueError("z_mode='sample' needs an rng")
            return rng.standard_normal((n, dim))
        raise ValueError(f"unknown z_mode {z_mode!r}")

    nets = model.nets
    if model.kind == "mlp":
        y = forward(nets["net"].spec, nets["net"].state, x)
    elif model.kind == "gaussian":
        y, std = forward(nets["net"].spec, nets["net"].state, x)
        if z_mode != "prior_mean":
            y = y + std * latent(1)
    elif model.kind == "vae":
        dec = nets["decoder"]
        y = forward(dec.spec, dec.state, np.concatenate([x, latent(model.z_dim)], axis=1))
    else:
        gen = nets["generator"]
        y = forward(gen.spec, gen.state, np.concatenate([latent(model.z_dim), x], axis=1))
    r = model.reward_norm.invert(y)[:, 0]
    return float(r[0]) if single else r


# ---------------------------------------------------------------------------
# value function


@dataclass
class ValueConfig:
    hidden: Tuple[int, ...] = (256, 256)
    gamma: float = 0.99
    epochs: int = 100
    batch_size: int = 256
    lr: float = 3e-4
    target_every: int = 100
    seed: int = 0


@dataclass
class ValueFunction:
    twins: List[Net]
    targets: List[Net]
    gamma: float
    state_norm: Normalizer
    history: List[float] = field(default_factory=list)
    # full-data residual of the current networks after each epoch
    residuals: List[float] = field(default_factory=list)

    def twin_values(self, s: np.ndarray) -> np.ndarray:
        x = self.state_norm(np.atleast_2d(s))
        return np.stack([forward(n.spec, n.state, x)[:, 0] for n in self.twins])

    def __call__(self, s: np.ndarray):
        return value(self, s)


def value(vf: ValueFunction, s: np.ndarray):
    """min over the two value networks; scalar for a single state."""
    v = np.min(vf.twin_values(s), axis=0)
    return float(v[0]) if np.ndim(s) == 1 else v


def train_value(dataset: Dataset, cfg: ValueConfig) -> ValueFunction:
    """Fit twin state-value networks by minimising the squared Bellman error
    with bootstrapped targets from frozen copies (refreshed every
    ``target_every`` updates). Terminal transitions regress on the reward."""
    arr = dataset.arrays()
    S, R, S2 = arr["states"], arr["rewards"], arr["next_states"]
    D = arr["terminals"].astype(np.float64)
    n = len(S)
    state_norm = Normalizer.fit(S)
    X, X2 = state_norm(S), state_norm(S2)
    rng = np.random.default_rng([cfg.seed, 0x5A])
    spec = MLPSpec((dataset.state_dim, *cfg.hidden, 1))
    twins = [make_net(spec, rng, final_scale=0.01) for _ in range(2)]
    targets = [t.copy() for t in twins]
    vf = ValueFunction(twins, targets, cfg.gamma, state_norm)
    hyper = AdamHyper(lr=cfg.lr)
    updates = 0
    history = []
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in minibatches(n, cfg.batch_size, rng):
            x2 = X2[idx]
            v_next = np.minimum(forward(targets[0].spec, targets[0].state, x2)[:, 0],
                                forward(targets[1].spec, targets[1].state, x2)[:, 0])
            batch = {"x": X[idx], "r": R[idx], "v_next": v_next, "done": D[idx], "gamma": cfg.gamma}
            for net in twins:
                loss, grad = loss_and_grad(net, batch, "bellman_mse")
                if not np.isfinite(loss):
                    raise TrainingError(f"value: non-finite Bellman loss at epoch {epoch}")
                step_nets([net], grad, hyper)
                total += loss * len(idx) / 2
            updates += 1
            if updates % cfg.target_every == 0:
                for t, net in zip(targets, twins):
                    t.state.params[:] = net.state.params
        history.append(total / n)
        vf.residuals.append(bellman_residual(vf, dataset))
    vf.history = history
    return vf


def bellman_residual(vf: ValueFunction, dataset: Dataset) -> float:
    arr = dataset.arrays()
    v = value(vf, arr["states"])
    v2 = value(vf, arr["next_states"])
    target = arr["rewards"] + vf.gamma * (1.0 - arr["terminals"]) * v2
    return float(np.mean((target - v) ** 2))


# ---------------------------------------------------------------------------
# persistence


@dataclass
class EnvModels:
    """The three models trained once per stitching run."""

    forward: ForwardEnsemble
    inverse: InverseModel
    reward: RewardModel


def save_models(models: EnvModels, directory: str, extra: Optional[dict] = None) -> None:
    os.makedirs(directory, exist_ok=True)
    fw, inv, rw = models.forward, models.inverse, models.reward
    for i, net in enumerate(fw.members):
        save_net(net, os.path.join(directory, f"forward_{i}.tsnn"))
    save_net(inv.encoder, os.path.join(directory, "inverse_encoder.tsnn"))
    save_net(inv.decoder, os.path.join(directory, "inverse_decoder.tsnn"))
    for key, net in rw.nets.items():
        save_net(net, os.path.join(directory, f"reward_{key}.tsnn"))
    manifest = {
        "forward": {"members": len(fw.members), "trained_count": fw.trained_count, "val_nll": fw.val_nll,
                    "seeds": fw.seeds, "state_norm": fw.state_norm.to_json(),
                    "delta_norm": fw.delta_norm.to_json()},
        "inverse": {"latent_dim": inv.latent_dim, "action_bound": inv.action_bound,
                    "state_norm": inv.state_norm.to_json(), "delta_norm": inv.delta_norm.to_json()},
        "reward": {"kind": rw.kind, "nets": sorted(rw.nets), "z_dim": rw.z_dim, "clip": rw.clip,
                   "input_norm": rw.input_norm.to_json(), "reward_norm": rw.reward_norm.to_json()},
    }
    manifest.update(extra or {})
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def load_models(directory: str) -> EnvModels:
    with open(os.path.join(directory, "manifest.json")) as f:
        m = json.load(f)
    fm = m["forward"]
    members = [load_net(os.path.join(directory, f"forward_{i}.tsnn")) for i in range(fm["members"])]
    fw = ForwardEnsemble(members, fm["val_nll"], Normalizer.from_json(fm["state_norm"]),
                         Normalizer.from_json(fm["delta_norm"]), fm["trained_count"], fm["seeds"])
    im = m["inverse"]
    inv = InverseModel(load_net(os.path.join(directory, "inverse_encoder.tsnn")),
                       load_net(os.path.join(directory, "inverse_decoder.tsnn")),
                       im["latent_dim"], Normalizer.from_json(im["state_norm"]), im["action_bound"],
                       Normalizer.from_json(im["delta_norm"]))
    rm = m["reward"]
    nets = {k: load_net(os.path.join(directory, f"reward_{k}.tsnn")) for k in rm["nets"]}
    rw = RewardModel(rm["kind"], nets, rm["z_dim"], Normalizer.from_json(rm["input_norm"]),
                     Normalizer.from_json(rm["reward_norm"]), rm["clip"])
    return EnvModels(fw, inv, rw)
