"""Feedforward networks in numpy with hand-derived gradients.

Parameters live in one flat float64 vector per network so that Adam state,
checkpoints and finite-difference checks all work on plain arrays.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

LOG_STD_MIN = -10.0
LOG_STD_MAX = 2.0

ACTIVATIONS = ("relu", "tanh", "identity")
HEADS = ("linear", "tanh_scaled", "gaussian")


@dataclass(frozen=True)
class MLPSpec:
    """Layer widths including input and output.

    A ``gaussian`` head emits a mean and a log-std for each of the
    ``layer_sizes[-1]`` outputs, so its final affine layer is twice as wide.
    """

    layer_sizes: Tuple[int, ...]
    hidden_activation: str = "relu"
    output_head: str = "linear"
    bound: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(n) for n in self.layer_sizes))
        if len(self.layer_sizes) < 2:
            raise ValueError("an MLP needs at least an input and an output width")
        if self.hidden_activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.hidden_activation!r}")
        if self.output_head not in HEADS:
            raise ValueError(f"unknown output head {self.output_head!r}")
        if self.output_head == "tanh_scaled" and not self.bound > 0:
            raise ValueError("tanh_scaled head needs bound > 0")

    @property
    def in_width(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_width(self) -> int:
        return self.layer_sizes[-1]

    def shapes(self) -> List[Tuple[int, int]]:
        widths = list(self.layer_sizes)
        if self.output_head == "gaussian":
            widths[-1] *= 2
        return list(zip(widths[:-1], widths[1:]))

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.shapes())


@dataclass
class MLPState:
    params: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray
    step_count: int = 0

    @classmethod
    def from_params(cls, params: np.ndarray) -> "MLPState":
        params = np.asarray(params, dtype=np.float64).copy()
        return cls(params, np.zeros_like(params), np.zeros_like(params), 0)

    def copy(self) -> "MLPState":
        return MLPState(self.params.copy(), self.adam_m.copy(), self.adam_v.copy(), self.step_count)


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2: float = 0.0

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if not self.eps > 0 or self.l2 < 0 or self.lr < 0:
            raise ValueError("invalid Adam hyperparameters")


@dataclass
class Net:
    spec: MLPSpec
    state: MLPState

    @property
    def params(self) -> np.ndarray:
        return self.state.params

    def __call__(self, x):
        return forward(self.spec, self.state, x)

    def copy(self) -> "Net":
        return Net(self.spec, self.state.copy())


def init_params(spec: MLPSpec, rng: np.random.Generator, final_scale: float = 1.0) -> np.ndarray:
    """Glorot-uniform weights, zero biases; the last layer is scaled by ``final_scale``."""
    chunks = []
    shapes = spec.shapes()
    for k, (fan_in, fan_out) in enumerate(shapes):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        if k == len(shapes) - 1:
            W *= final_scale
        chunks += [W.ravel(), np.zeros(fan_out)]
    return np.concatenate(chunks)


def make_net(spec: MLPSpec, rng: np.random.Generator, final_scale: float = 1.0) -> Net:
    return Net(spec, MLPState.from_params(init_params(spec, rng, final_scale)))


def unpack(spec: MLPSpec, params: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
    if params.shape != (spec.n_params,):
        raise ValueError(f"expected {spec.n_params} parameters, got {params.shape}")
    layers, off = [], 0
    for fan_in, fan_out in spec.shapes():
        W = params[off:off + fan_in * fan_out].reshape(fan_in, fan_out)
        off += fan_in * fan_out
        b = params[off:off + fan_out]
        off += fan_out
        layers.append((W, b))
    return layers


def _as_params(state_or_params) -> np.ndarray:
    return state_or_params.params if isinstance(state_or_params, (MLPState, Net)) else state_or_params


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activate_grad(kind: str, z: np.ndarray, h: np.ndarray, dh: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return dh * (z > 0)
    if kind == "tanh":
        return dh * (1.0 - h * h)
    return dh


@dataclass
class Cache:
    inputs: List[np.ndarray] = field(default_factory=list)
    pre: List[np.ndarray] = field(default_factory=list)
    raw: Optional[np.ndarray] = None
    head: object = None


def forward_cache(spec: MLPSpec, params: np.ndarray, x: np.ndarray):
    """Forward pass keeping what :func:`backward` needs.

    Returns ``(head_output, cache)``; for a gaussian head the output is
    ``(mean, clamped_log_std)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.in_width:
        raise ValueError(f"input shape {x.shape} does not match width {spec.in_width}")
    layers = unpack(spec, params)
    cache = Cache()
    h = x
    for k, (W, b) in enumerate(layers):
        cache.inputs.append(h)
        z = h @ W + b
        if k < len(layers) - 1:
            cache.pre.append(z)
            h = _activate(spec.hidden_activation, z)
        else:
            h = z
    cache.raw = h
    if spec.output_head == "linear":
        out = h
    elif spec.output_head == "tanh_scaled":
        out = spec.bound * np.tanh(h)
    else:
        d = spec.out_width
        out = (h[:, :d], np.clip(h[:, d:], LOG_STD_MIN, LOG_STD_MAX))
    cache.head = out
    return out, cache


def forward(spec: MLPSpec, state, x: np.ndarray):
    """Network output for a batch ``x`` of shape (n, in_width).

    Gaussian heads return ``(mean, std)`` with the log-std clamped to
    [LOG_STD_MIN, LOG_STD_MAX].
    """
    out, _ = forward_cache(spec, _as_params(state), x)
    if spec.output_head == "gaussian":
        mean, log_std = out
        return mean, np.exp(log_std)
    return out


def backward(spec: MLPSpec, params: np.ndarray, cache: Cache, d_out) -> Tuple[np.ndarray, np.ndarray]:
    """Gradient of a scalar loss w.r.t. parameters and inputs, given its
    gradient w.r.t. the head output (``(d_mean, d_log_std)`` for gaussian)."""
    raw = cache.raw
    if spec.output_head == "linear":
        d = np.asarray(d_out, dtype=np.float64)
    elif spec.output_head == "tanh_scaled":
        t = cache.head / spec.bound
        d = np.asarray(d_out) * spec.bound * (1.0 - t * t)
    else:
        d_mean, d_log_std = d_out
        w = spec.out_width
        inside = (raw[:, w:] >= LOG_STD_MIN) & (raw[:, w:] <= LOG_STD_MAX)
        d = np.concatenate([d_mean, d_log_std * inside], axis=1)
    layers = unpack(spec, params)
    grads: List[np.ndarray] = [None] * (2 * len(layers))
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        h_in = cache.inputs[k]
        grads[2 * k] = h_in.T @ d
        grads[2 * k + 1] = d.sum(axis=0)
        d = d @ W.T
        if k > 0:
            z = cache.pre[k - 1]
            d = _activate_grad(spec.hidden_activation, z, h_in, d)
    return np.concatenate([g.ravel() for g in grads]), d


def kink_distance(spec: MLPSpec, cache: Cache) -> float:
    """Smallest distance of any relu pre-activation or raw log-std to a
    point where the network is not differentiable."""
    best = np.inf
    if spec.hidden_activation == "relu":
        for z in cache.pre:
            if z.size:
                best = min(best, float(np.min(np.abs(z))))
    if spec.output_head == "gaussian":
        ls = cache.raw[:, spec.out_width:]
        best = min(best, float(np.min(np.abs(ls - LOG_STD_MIN))), float(np.min(np.abs(ls - LOG_STD_MAX))))
    return best


# ---------------------------------------------------------------------------
# losses


def gaussian_nll(mu: np.ndarray, var: np.ndarray, target: np.ndarray) -> float:
    """Mean over samples of ``(mu - y)^T diag(var)^-1 (mu - y) + log|diag(var)|``.

    The additive ``d log(2 pi)`` constant is omitted.
    """
    mu, var, target = (np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in (mu, var, target))
    if np.any(var <= 0):
        raise ValueError("variances must be positive")
    per = np.sum((mu - target) ** 2 / var + np.log(var), axis=-1)
    return float(np.mean(per))


def gaussian_kl_standard(mu: np.ndarray, std: np.ndarray) -> np.ndarray:
    """Per-sample KL(N(mu, diag std^2) || N(0, I))."""
    mu = np.atleast_2d(mu)
    std = np.atleast_2d(std)
    return 0.5 * np.sum(mu ** 2 + std ** 2 - 1.0 - 2.0 * np.log(std), axis=-1)


def diag_gaussian_log_density(mu: np.ndarray, std: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Exact log N(x; mu, diag(std^2)) along the last axis."""
    z = (x - mu) / std
    d = np.shape(x)[-1]
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(np.log(std), axis=-1) - 0.5 * d * np.log(2 * np.pi)


LossResult = Tuple[float, List[np.ndarray]]


def _mse(nets, batch, kinks=None):
    (net,) = nets
    out, c = forward_cache(net.spec, net.params, batch["x"])
    _track(kinks, net, c)
    diff = out - batch["y"]
    loss = float(np.mean(diff ** 2))
    g, _ = backward(net.spec, net.params, c, 2.0 * diff / diff.size)
    return loss, [g]


def _gaussian_nll(nets, batch, kinks=None):
    (net,) = nets
    (mean, log_std), c = forward_cache(net.spec, net.params, batch["x"])
    _track(kinks, net, c)
    n = len(mean)
    inv_var = np.exp(-2.0 * log_std)
    diff = mean - batch["y"]
    per = np.sum(diff ** 2 * inv_var + 2.0 * log_std, axis=1)
    loss = float(np.mean(per))
    d_mean = 2.0 * diff * inv_var / n
    d_log_std = (2.0 - 2.0 * diff ** 2 * inv_var) / n
    g, _ = backward(net.spec, net.params, c, (d_mean, d_log_std))
    return loss, [g]


def _bc_mse(nets, batch, kinks=None):
    weights = batch.get("w")
    (net,) = nets
    out, c = forward_cache(net.spec, net.params, batch["x"])
    _track(kinks, net, c)
    diff = out - batch["y"]
    n = len(diff)
    per = np.sum(diff ** 2, axis=1)
    if weights is None:
        loss = float(np.mean(per))
        d = 2.0 * diff / n
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        loss = float(np.mean(w * per))
        d = 2.0 * diff * w[:, None] / n
    g, _ = backward(net.spec, net.params, c, d)
    return loss, [g]


def _weighted_bc_mse(nets, batch, kinks=None):
    if "w" not in batch:
        raise KeyError("weighted_bc_mse needs per-sample weights 'w'")
    return _bc_mse(nets, batch, kinks)


def _bellman_mse(nets, batch, kinks=None):
    (net,) = nets
    v, c = forward_cache(net.spec, net.params, batch["x"])
    _track(kinks, net, c)
    v = v[:, 0]
    target = batch["r"] + batch["gamma"] * (1.0 - batch["done"]) * batch["v_next"]
    td = target - v
    n = len(v)
    loss = float(np.mean(td ** 2))
    g, _ = backward(net.spec, net.params, c, (-2.0 * td / n)[:, None])
    return loss, [g]


def _cvae_elbo(nets, batch, kinks=None):
    """Negative evidence lower bound with squared-error reconstruction.

    batch: ``cond`` (n, dc), ``target`` (n, dt), ``eps`` (n, dz) standard
    normal noise, ``beta`` KL weight. The encoder sees ``[cond, target]``,
    the decoder ``[cond, z]``.
    """
    enc, dec = nets
    cond, target, eps = batch["cond"], batch["target"], batch["eps"]
    beta = batch.get("beta", 1.0)
    n = len(cond)
    (mu, log_std), ce = forward_cache(enc.spec, enc.params, np.concatenate([cond, target], axis=1))
    std = np.exp(log_std)
    z = mu + std * eps
    out, cd = forward_cache(dec.spec, dec.params, np.concatenate([cond, z], axis=1))
    _track(kinks, enc, ce)
    _track(kinks, dec, cd)
    diff = out - target
    recon = np.sum(diff ** 2, axis=1)
    kl = 0.5 * np.sum(mu ** 2 + std ** 2 - 1.0 - 2.0 * log_std, axis=1)
    loss = float(np.mean(recon + beta * kl))
    g_dec, d_in = backward(dec.spec, dec.params, cd, 2.0 * diff / n)
    d_z = d_in[:, cond.shape[1]:]
    d_mu = d_z + beta * mu / n
    d_log_std = d_z * std * eps + beta * (std ** 2 - 1.0) / n
    g_enc, _ = backward(enc.spec, enc.params, ce, (d_mu, d_log_std))
    return loss, [g_enc, g_dec]


def _wgan_disc(nets, batch, kinks=None):
    """E[D(real)] - E[D(fake)] over pre-built critic inputs."""
    (disc,) = nets
    real, fake = batch["real"], batch["fake"]
    out_r, cr = forward_cache(disc.spec, disc.params, real)
    out_f, cf = forward_cache(disc.spec, disc.params, fake)
    _track(kinks, disc, cr)
    _track(kinks, disc, cf)
    loss = float(np.mean(out_r) - np.mean(out_f))
    g_r, _ = backward(disc.spec, disc.params, cr, np.full_like(out_r, 1.0 / len(out_r)))
    g_f, _ = backward(disc.spec, disc.params, cf, np.full_like(out_f, -1.0 / len(out_f)))
    return loss, [g_r + g_f]


def _wgan_gen(nets, batch, kinks=None):
    """E[D(cond, G(z, cond))]; gradient for the generator only."""
    gen, disc = nets
    cond, z = batch["cond"], batch["z"]
    fake_r, cg = forward_cache(gen.spec, gen.params, np.concatenate([z, cond], axis=1))
    out, cd = forward_cache(disc.spec, disc.params, np.concatenate([cond, fake_r], axis=1))
    _track(kinks, gen, cg)
    _track(kinks, disc, cd)
    n = len(out)
    loss = float(np.mean(out))
    _, d_in = backward(disc.spec, disc.params, cd, np.full_like(out, 1.0 / n))
    g_gen, _ = backward(gen.spec, gen.params, cg, d_in[:, -fake_r.shape[1]:])
    return loss, [g_gen]


def _track(kinks, net, cache):
    if kinks is not None:
        kinks.append(kink_distance(net.spec, cache))


LOSSES: Dict[str, Tuple[Callable, int]] = {
    # name: (function, number of leading nets that receive gradients)
    "mse": (_mse, 1),
    "gaussian_nll": (_gaussian_nll, 1),
    "bc_mse": (_bc_mse, 1),
    "weighted_bc_mse": (_weighted_bc_mse, 1),
    "bellman_mse": (_bellman_mse, 1),
    "cvae_elbo": (_cvae_elbo, 2),
    "wgan_disc": (_wgan_disc, 1),
    "wgan_gen": (_wgan_gen, 1),
}


def _net_tuple(nets) -> Tuple[Net, ...]:
    return (nets,) if isinstance(nets, Net) else tuple(nets)


def loss_and_grad(nets: Union[Net, Sequence[Net]], batch: dict, loss_spec: str) -> Tuple[float, np.ndarray]:
    """Batch-mean loss and its gradient w.r.t. the concatenated parameters of
    the trainable nets (all of them except the frozen critic in ``wgan_gen``)."""
    if loss_spec not in LOSSES:
        raise ValueError(f"unknown loss {loss_spec!r}")
    fn, _ = LOSSES[loss_spec]
    loss, grads = fn(_net_tuple(nets), batch)
    return loss, np.concatenate(grads)


def trainable(nets, loss_spec: str) -> Tuple[Net, ...]:
    return _net_tuple(nets)[:LOSSES[loss_spec][1]]


def near_kink(nets, batch: dict, loss_spec: str, tol: float = 1e-3) -> bool:
    kinks: List[float] = []
    LOSSES[loss_spec][0](_net_tuple(nets), batch, kinks)
    return min(kinks) < tol


def grad_check(
    nets, batch: dict, loss_spec: str, h: float = 1e-5,
    max_coords: Optional[int] = None, seed: int = 0, floor: float = 1e-6,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per coordinate is ``|g - n| / max(|g|, |n|, floor)``. When
    ``max_coords`` is set and smaller than the parameter count, a seeded random
    subset of coordinates is checked.
    """
    nets = _net_tuple(nets)
    _, grad = loss_and_grad(nets, batch, loss_spec)
    train = trainable(nets, loss_spec)
    sizes = [n.params.size for n in train]
    offsets = np.cumsum([0] + sizes)
    total = offsets[-1]
    coords = np.arange(total)
    if max_coords is not None and max_coords < total:
        coords = np.sort(np.random.default_rng(seed).choice(total, size=max_coords, replace=False))
    worst = 0.0
    for c in coords:
        k = int(np.searchsorted(offsets, c, side="right") - 1)
        p = train[k].state.params
        j = c - offsets[k]
        old = p[j]
        p[j] = old + h
        lp = loss_and_grad(nets, batch, loss_spec)[0]
        p[j] = old - h
        lm = loss_and_grad(nets, batch, loss_spec)[0]
        p[j] = old
        num = (lp - lm) / (2 * h)
        err = abs(grad[c] - num) / max(abs(grad[c]), abs(num), floor)
        worst = max(worst, err)
    return worst


def numeric_grad(nets, batch: dict, loss_spec: str, h: float = 1e-5) -> np.ndarray:
    nets = _net_tuple(nets)
    out = []
    for net in trainable(nets, loss_spec):
        p = net.state.params
        g = np.zeros_like(p)
        for j in range(p.size):
            old = p[j]
            p[j] = old + h
            lp = loss_and_grad(nets, batch, loss_spec)[0]
            p[j] = old - h
            lm = loss_and_grad(nets, batch, loss_spec)[0]
            p[j] = old
            g[j] = (lp - lm) / (2 * h)
        out.append(g)
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# optimisation


def adam_update(state: MLPState, grad: np.ndarray, hyper: AdamHyper) -> MLPState:
    """One bias-corrected Adam step with decoupled weight decay ``l2``.

    Updates ``state`` in place and returns it.
    """
    b1, b2 = hyper.beta1, hyper.beta2
    state.step_count += 1
    t = state.step_count
    state.adam_m *= b1
    state.adam_m += (1.0 - b1) * grad
    state.adam_v *= b2
    state.adam_v += (1.0 - b2) * grad * grad
    m_hat = state.adam_m / (1.0 - b1 ** t)
    v_hat = state.adam_v / (1.0 - b2 ** t)
    step = m_hat / (np.sqrt(v_hat) + hyper.eps)
    if hyper.l2 > 0:
        step = step + hyper.l2 * state.params
    state.params -= hyper.lr * step
    return state


def step_nets(nets: Sequence[Net], grad: np.ndarray, hyper: AdamHyper) -> None:
    off = 0
    for net in nets:
        n = net.params.size
        adam_update(net.state, grad[off:off + n], hyper)
        off += n


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    """Index arrays covering one shuffled epoch."""
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


# ---------------------------------------------------------------------------
# checkpoints

_ACT_CODE = {a: i for i, a in enumerate(ACTIVATIONS)}
_HEAD_CODE = {h: i for i, h in enumerate(HEADS)}
CKPT_MAGIC = b"TSNN"
CKPT_VERSION = 1


def dumps_net(net: Net) -> bytes:
    spec, st = net.spec, net.state
    parts = [
        CKPT_MAGIC,
        struct.pack("<II", CKPT_VERSION, len(spec.layer_sizes)),
        struct.pack(f"<{len(spec.layer_sizes)}I", *spec.layer_sizes),
        struct.pack("<BBd", _ACT_CODE[spec.hidden_activation], _HEAD_CODE[spec.output_head], spec.bound),
        struct.pack("<QQ", st.params.size, st.step_count),
        st.params.astype("<f8").tobytes(),
        st.adam_m.astype("<f8").tobytes(),
        st.adam_v.astype("<f8").tobytes(),
    ]
    return b"".join(parts)


def loads_net(blob: bytes) -> Net:
    if blob[:4] != CKPT_MAGIC:
        raise ValueError("not a TSNN checkpoint")
    version, n_layers = struct.unpack_from("<II", blob, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    sizes = struct.unpack_from(f"<{n_layers}I", blob, off)
    off += 4 * n_layers
    act, head, bound = struct.unpack_from("<BBd", blob, off)
    off += 10
    n, steps = struct.unpack_from("<QQ", blob, off)
    off += 16
    arrs = []
    for _ in range(3):
        arrs.append(np.frombuffer(blob, dtype="<f8", count=n, offset=off).astype(np.float64))
        off += 8 * n
    spec = MLPSpec(sizes, ACTIVATIONS[act], HEADS[head], bound)
    if spec.n_params != n:
        raise ValueError("parameter count does not match the stored spec")
    return Net(spec, MLPState(arrs[0], arrs[1], arrs[2], steps))


def save_net(net: Net, path: str) -> None:
    with open(path, "wb") as f:
        f.write(dumps_net(net))


def load_net(path: str) -> Net:
    with open(path, "rb") as f:
        return loads_net(f.read())
