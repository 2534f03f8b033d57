"""Latent DDPM: linear noise schedule, closed-form forward process, an MLP noise
predictor with manual backprop, Adam training and ancestral sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from lnforge.fileio import FormatError, read_record, write_record
from lnforge.optim import TrainConfig, TrainingDiverged

EMBED_DIM = 16
DEFAULT_T = 200
DEFAULT_BETA = (1e-4, 0.02)


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Arrays are indexed by ``t - 1`` for timesteps ``t = 1..T``."""

    beta: np.ndarray
    beta_start: float = DEFAULT_BETA[0]
    beta_end: float = DEFAULT_BETA[1]

    @property
    def T(self) -> int:
        return int(self.beta.shape[0])

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alpha)


def make_schedule(T: int = DEFAULT_T, beta_start: float = DEFAULT_BETA[0],
                  beta_end: float = DEFAULT_BETA[1]) -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T), float(beta_start), float(beta_end))


def _check_t(t, s: NoiseSchedule) -> np.ndarray:
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > s.T):
        raise ValueError(f"timestep out of range [1, {s.T}]")
    return t.astype(np.int64)


def forward_sample(z0: np.ndarray, t, eps: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    """Closed-form marginal ``q(z_t | z_0)`` evaluated with the given noise."""
    t = _check_t(t, s)
    ab = s.alpha_bar[t - 1]
    if ab.ndim:
        ab = ab[:, None]
    return np.sqrt(ab) * np.asarray(z0) + np.sqrt(1.0 - ab) * np.asarray(eps)


def forward_step(z_prev: np.ndarray, t: int, eps: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    """One transition of the forward kernel ``N(sqrt(1 - beta_t) z_{t-1}, beta_t I)``."""
    _check_t(t, s)
    b = s.beta[t - 1]
    return math.sqrt(1.0 - b) * z_prev + math.sqrt(b) * eps


def time_embedding(t, dim: int = EMBED_DIM, max_period: float = 1000.0) -> np.ndarray:
    """Sine/cosine features of ``t`` at geometrically spaced frequencies; shape ``(n, dim)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


# ---------------------------------------------------------------- network

def silu(x):
    return x * expit(x)


def silu_grad(x):
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


@dataclass(eq=False)
class DenoiserNet:
    """Fully connected noise predictor ``eps(z_t, embed(t), cond)``.

    ``latent_scale`` / ``cond_scale`` record the factors applied to codec
    latents and condition vectors before diffusion; the engine never uses them.
    """

    latent_dim: int
    cond_dim: int = 0
    hidden: tuple[int, ...] = (128, 128)
    embed_dim: int = EMBED_DIM
    seed: int = 0
    latent_scale: float = 1.0
    cond_scale: float = 1.0
    weights: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.weights:
            rng = np.random.default_rng(self.seed)
            sizes = self.layer_sizes
            for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
                self.weights.append(rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in))
                self.biases.append(np.zeros(fan_out))

    @property
    def layer_sizes(self) -> list[int]:
        return [self.latent_dim + self.embed_dim + self.cond_dim, *self.hidden, self.latent_dim]

    @property
    def params(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def inputs(self, z, t, cond=None) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        t = np.broadcast_to(np.asarray(t), (z.shape[0],))
        parts = [z, time_embedding(t, self.embed_dim)]
        if self.cond_dim:
            if cond is None:
                raise ValueError("conditional denoiser needs a condition vector")
            parts.append(np.broadcast_to(np.atleast_2d(cond), (z.shape[0], self.cond_dim)))
        elif cond is not None and np.size(cond):
            raise ValueError("unconditional denoiser got a condition vector")
        return np.concatenate(parts, axis=1)

    def forward(self, x: np.ndarray, cache: list | None = None) -> np.ndarray:
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ w + b
            if cache is not None:
                cache.append((h, a))
            h = a if i == last else silu(a)
        return h

    def backward(self, cache: list, grad_out: np.ndarray) -> list[np.ndarray]:
        """Parameter gradients in ``params`` order, given dLoss/dOutput."""
        gw = [None] * len(self.weights)
        gb = [None] * len(self.biases)
        g = grad_out
        for i in reversed(range(len(self.weights))):
            h, a = cache[i]
            if i != len(self.weights) - 1:
                g = g * silu_grad(a)
            gw[i] = h.T @ g
            gb[i] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return [*gw, *gb]

    def __call__(self, z, t, cond=None) -> np.ndarray:
        return self.forward(self.inputs(z, t, cond))


def diffusion_loss(net: DenoiserNet, z0: np.ndarray, s: NoiseSchedule, rng=None, cond=None,
                   t=None, eps=None) -> tuple[float, list[np.ndarray]]:
    """Noise-prediction loss ``mean_i ||eps_i - net(z_t,i)||^2`` and its gradients.

    Per item, ``t`` is uniform on ``1..T`` and ``eps`` standard normal, drawn
    from ``rng`` in item order unless supplied explicitly.
    """
    z0 = np.atleast_2d(np.asarray(z0, dtype=np.float64))
    n = z0.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if t is None or eps is None:
        if rng is None:
            raise ValueError("need rng or explicit (t, eps)")
        draws_t = np.empty(n, dtype=np.int64)
        draws_e = np.empty_like(z0)
        for i in range(n):
            draws_t[i] = rng.integers(1, s.T + 1)
            draws_e[i] = rng.standard_normal(z0.shape[1])
        t = draws_t if t is None else t
        eps = draws_e if eps is None else eps
    t = _check_t(t, s)
    zt = forward_sample(z0, t, eps, s)
    cache: list = []
    pred = net.forward(net.inputs(zt, t, cond), cache)
    diff = pred - eps
    loss = float(np.sum(diff * diff) / n)
    grads = net.backward(cache, 2.0 * diff / n)
    return loss, grads


def train(net: DenoiserNet, data: np.ndarray, s: NoiseSchedule, cfg: TrainConfig,
          cond: np.ndarray | None = None) -> tuple[DenoiserNet, list[float]]:
    """Optimize ``net`` in place with Adam; returns it with the per-step loss trace."""
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if data.shape[0] == 0:
        raise ValueError("no training data")
    rng = np.random.default_rng(cfg.seed)
    opt = cfg.adam(net.params)
    trace = []
    n = data.shape[0]
    for step in range(cfg.steps):
        idx = rng.integers(0, n, size=cfg.batch_size)
        c = None if cond is None else cond[idx]
        loss, grads = diffusion_loss(net, data[idx], s, rng, cond=c)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite diffusion loss at step {step}")
        opt.step(grads)
        trace.append(loss)
    return net, trace


def reverse_sample(net: DenoiserNet, s: NoiseSchedule, rng, n: int | None = None,
                   cond=None) -> np.ndarray:
    """Ancestral DDPM sampling with ``sigma_t = sqrt(beta_t)``.

    Returns ``(d,)`` when ``n`` is None, else ``(n, d)``.
    """
    rows = 1 if n is None else n
    z = rng.standard_normal((rows, net.latent_dim))
    alpha, alpha_bar, beta = s.alpha, s.alpha_bar, s.beta
    for t in range(s.T, 0, -1):
        eps_hat = net(z, t, cond)
        coef = beta[t - 1] / math.sqrt(1.0 - alpha_bar[t - 1])
        z = (z - coef * eps_hat) / math.sqrt(alpha[t - 1])
        if t > 1:
            z = z + math.sqrt(beta[t - 1]) * rng.standard_normal(z.shape)
        if not np.isfinite(z).all():
            norm = float(np.linalg.norm(np.nan_to_num(z, nan=np.inf)))
            raise FloatingPointError(f"non-finite sampler state at step {t} (norm {norm})")
    return z[0] if n is None else z


# ---------------------------------------------------------------- checkpoints

def save_denoiser(net: DenoiserNet, s: NoiseSchedule, path: str | Path) -> None:
    header = {
        "magic": "LND1",
        "layer_sizes": net.layer_sizes,
        "activation": "silu",
        "embed_dim": net.embed_dim,
        "cond_dim": net.cond_dim,
        "latent_dim": net.latent_dim,
        "latent_scale": net.latent_scale,
        "cond_scale": net.cond_scale,
        "schedule": {"T": s.T, "beta_start": s.beta_start, "beta_end": s.beta_end},
        "dtype": "f32",
    }
    payload = np.concatenate([p.ravel() for p in net.params])
    write_record(path, header, payload)


def load_denoiser(path: str | Path) -> tuple[DenoiserNet, NoiseSchedule]:
    header, flat = read_record(path)
    if header.get("magic") != "LND1":
        raise FormatError("magic", f"bad checkpoint magic {header.get('magic')!r}")
    if header.get("activation") != "silu":
        raise FormatError("activation", f"unsupported activation {header.get('activation')!r}")
    sizes = [int(n) for n in header["layer_sizes"]]
    shapes = [(a, b) for a, b in zip(sizes[:-1], sizes[1:])]
    expected = sum(a * b for a, b in shapes) + sum(b for _, b in shapes)
    if flat.size != expected:
        raise FormatError("payload", "payload length mismatch")
    flat = flat.astype(np.float64)
    weights, biases, pos = [], [], 0
    for a, b in shapes:
        weights.append(flat[pos: pos + a * b].reshape(a, b))
        pos += a * b
    for _, b in shapes:
        biases.append(flat[pos: pos + b].copy())
        pos += b
    net = DenoiserNet(
        latent_dim=int(header["latent_dim"]),
        cond_dim=int(header["cond_dim"]),
        hidden=tuple(sizes[1:-1]),
        embed_dim=int(header["embed_dim"]),
        latent_scale=float(header["latent_scale"]),
        cond_scale=float(header.get("cond_scale", 1.0)),
        weights=weights,
        biases=biases,
    )
    sch = header["schedule"]
    return net, make_schedule(int(sch["T"]), float(sch["beta_start"]), float(sch["beta_end"]))
