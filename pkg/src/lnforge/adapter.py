"""Explicit-space anatomical adapter: a tiny residual 3D conv net that refines
decoded TSDF grids toward ground-truth morphology.

    out = clip(x + conv2(silu(conv1(x))), -tau, tau)

Both convolutions are 3x3x3 with 'same' output size; the input is edge-padded
(the grid exterior continues the border values), the hidden layer is
zero-padded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from lnforge.codec import LinearCodec, decode, encode
from lnforge.diffusion import silu, silu_grad
from lnforge.fileio import FormatError, read_record, write_record
from lnforge.optim import TrainConfig, TrainingDiverged
from lnforge.sdf import TsdfGrid

KERNEL = 3
INFERENCE_CHUNK = 16
_OFFSETS = [(i, j, k) for i in range(KERNEL) for j in range(KERNEL) for k in range(KERNEL)]


def _flat_offsets(padded_shape) -> tuple[int, list[int]]:
    # In the flattened padded grid a kernel tap is a constant index shift, so
    # every convolution below reduces to one GEMM over shifted copies.
    _, Q, R = padded_shape
    base = Q * R + R + 1
    return base, [(i - 1) * Q * R + (j - 1) * R + (k - 1) for i, j, k in _OFFSETS]


def _shifted(flat: np.ndarray, start: int, shifts, length: int, sign: int = 1) -> np.ndarray:
    return np.stack([flat[start + sign * d: start + sign * d + length] for d in shifts])


@dataclass(eq=False)
class AdapterNet:
    tau: float = 0.2
    hidden: int = 8
    seed: int = 0
    w1: np.ndarray = field(default=None)
    b1: np.ndarray = field(default=None)
    w2: np.ndarray = field(default=None)
    b2: np.ndarray = field(default=None)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        k3 = KERNEL ** 3
        if self.w1 is None:
            self.w1 = rng.standard_normal((self.hidden, 1, KERNEL, KERNEL, KERNEL)) / math.sqrt(k3)
            self.b1 = np.zeros(self.hidden)
            # near-zero residual at init: the adapter starts as (almost) the identity
            self.w2 = rng.standard_normal((1, self.hidden, KERNEL, KERNEL, KERNEL)) * 1e-3
            self.b2 = np.zeros(1)

    @classmethod
    def identity(cls, tau: float = 0.2, hidden: int = 8) -> "AdapterNet":
        net = cls(tau=tau, hidden=hidden)
        net.w2[:] = 0.0
        return net

    def _bound(self) -> float:
        # Grids are stored as float32, so a value sitting exactly at the clamp
        # is float32(tau); clipping there keeps such grids bit-for-bit intact.
        return float(np.float32(self.tau))

    @property
    def params(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def forward(self, x: np.ndarray, cache: dict | None = None) -> np.ndarray:
        """``x``: ``(N, X, Y, Z)`` or ``(X, Y, Z)`` TSDF values; returns the same shape.

        Without a ``cache`` (inference only), large batches are processed in
        chunks so the im2col buffers stay bounded.
        """
        single = x.ndim == 3
        xb = np.asarray(x, dtype=np.float64)
        xb = xb[None] if single else xb
        if cache is None and len(xb) > INFERENCE_CHUNK:
            return np.concatenate([self.forward(xb[i:i + INFERENCE_CHUNK])
                                   for i in range(0, len(xb), INFERENCE_CHUNK)])
        xp = np.pad(xb, ((0, 0), (1, 1), (1, 1), (1, 1)), mode="edge")
        padded = xp.shape[1:]
        base, shifts = _flat_offsets(padded)
        flat = xp.reshape(-1)
        length = flat.size - 2 * base
        interior = np.zeros(xp.shape, dtype=bool)
        interior[:, 1:-1, 1:-1, 1:-1] = True
        valid = interior.reshape(-1)[base:base + length]

        cols = _shifted(flat, base, shifts, length)                 # (27, L)
        h = self.w1.reshape(self.hidden, -1) @ cols + self.b1[:, None]
        a = silu(h) * valid                                         # zero padding of the hidden layer
        a_full = np.zeros((self.hidden, flat.size))
        a_full[:, base:base + length] = a
        taps = self.w2.reshape(self.hidden, -1).T @ a_full          # (27, total)
        r = sum(taps[n, base + d: base + d + length] for n, d in enumerate(shifts)) + self.b2[0]
        pre = flat[base:base + length] + r
        out_flat = np.zeros(flat.size)
        bound = self._bound()
        out_flat[base:base + length] = np.clip(pre, -bound, bound)
        out = out_flat.reshape(xp.shape)[:, 1:-1, 1:-1, 1:-1]
        if cache is not None:
            cache.update(cols=cols, h=h, a=a, pre=pre, valid=valid, base=base, shifts=shifts,
                         padded_shape=xp.shape)
        return out[0] if single else out

    def backward(self, cache: dict, grad_out: np.ndarray) -> list[np.ndarray]:
        """Parameter gradients (``params`` order) given dLoss/dOutput."""
        g = np.asarray(grad_out, dtype=np.float64)
        g = g[None] if g.ndim == 3 else g
        base, shifts, pre = cache["base"], cache["shifts"], cache["pre"]
        length = pre.size
        g_full = np.zeros(cache["padded_shape"])
        g_full[:, 1:-1, 1:-1, 1:-1] = g
        g_full = g_full.reshape(-1)
        bound = self._bound()
        g_full[base:base + length] *= (pre > -bound) & (pre < bound)
        gb2 = np.array([g_full.sum()])
        gcols = _shifted(g_full, base, shifts, length, sign=-1)   # (27, L)
        gw2 = cache["a"] @ gcols.T                                  # (H, 27)
        ga = self.w2.reshape(self.hidden, -1) @ gcols
        gh = ga * silu_grad(cache["h"]) * cache["valid"]
        gw1 = gh @ cache["cols"].T
        gb1 = gh.sum(axis=1)
        return [gw1.reshape(self.w1.shape), gb1, gw2.reshape(self.w2.shape), gb2]


def make_noisy_recon(M: TsdfGrid, codec: LinearCodec, sigma: float, rng) -> TsdfGrid:
    """Decode the latent of ``M`` after adding isotropic Gaussian noise of scale ``sigma``."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    z = encode(codec, M)
    return decode(codec, z + sigma * rng.standard_normal(z.shape))


def adapter_loss(M, M_hat, A: AdapterNet, norm: str = "l1") -> tuple[float, list[np.ndarray]]:
    """Mean per-voxel |M - A(M_hat)| (or squared error with ``norm='l2'``) and gradients.

    ``M``/``M_hat`` may be TsdfGrids or arrays of shape ``(X, Y, Z)`` / ``(N, X, Y, Z)``.
    """
    target = np.asarray(getattr(M, "values", M), dtype=np.float64)
    source = np.asarray(getattr(M_hat, "values", M_hat), dtype=np.float64)
    if target.shape != source.shape:
        raise ValueError(f"shape mismatch {target.shape} vs {source.shape}")
    cache: dict = {}
    out = A.forward(source, cache)
    diff = out - target
    count = diff.size
    if norm == "l1":
        loss = float(np.abs(diff).sum() / count)
        g = np.sign(diff) / count
    elif norm == "l2":
        loss = float((diff * diff).sum() / count)
        g = 2.0 * diff / count
    else:
        raise ValueError(f"unknown norm {norm!r}")
    return loss, A.backward(cache, g)


def apply_adapter(A: AdapterNet, t: TsdfGrid) -> TsdfGrid:
    out = A.forward(t.values)
    return TsdfGrid(out.astype(np.float32), t.spacing, t.tau, t.norm_scale)


def total_loss(diffusion: float, adapter: float, lam: float) -> float:
    """Combined objective reported alongside the two-phase training."""
    return diffusion + lam * adapter


def train_adapter(A: AdapterNet, pairs, cfg: TrainConfig, norm: str = "l1",
                  diffusion_loss_value: float | None = None):
    """Fit ``A`` on ``(M, M_hat)`` pairs with Adam.

    Returns ``(A, trace, report)``; ``report`` holds the final adapter loss over all
    pairs and, when ``diffusion_loss_value`` is given, the combined total.
    """
    if not len(pairs):
        raise ValueError("no training pairs")
    targets = np.stack([np.asarray(getattr(m, "values", m), dtype=np.float64) for m, _ in pairs])
    sources = np.stack([np.asarray(getattr(h, "values", h), dtype=np.float64) for _, h in pairs])
    rng = np.random.default_rng(cfg.seed)
    opt = cfg.adam(A.params)
    trace = []
    n = len(targets)
    for step in range(cfg.steps):
        idx = rng.integers(0, n, size=min(cfg.batch_size, n))
        loss, grads = adapter_loss(targets[idx], sources[idx], A, norm)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite adapter loss at step {step}")
        opt.step(grads)
        trace.append(loss)
    final, _ = adapter_loss(targets, sources, A, norm)
    report = {"adapter_loss": final, "lambda": cfg.lam}
    if diffusion_loss_value is not None:
        report["diffusion_loss"] = diffusion_loss_value
        report["total_loss"] = total_loss(diffusion_loss_value, final, cfg.lam)
    return A, trace, report


# ---------------------------------------------------------------- checkpoints

def save_adapter(A: AdapterNet, path: str | Path) -> None:
    header = {"magic": "LNA1", "kernel_size": KERNEL, "channels": [1, A.hidden, 1],
              "tau": A.tau, "dtype": "f32"}
    write_record(path, header, np.concatenate([p.ravel() for p in A.params]))


def load_adapter(path: str | Path) -> AdapterNet:
    header, flat = read_record(path)
    if header.get("magic") != "LNA1":
        raise FormatError("magic", f"bad adapter magic {header.get('magic')!r}")
    if header.get("kernel_size") != KERNEL:
        raise FormatError("kernel_size", f"unsupported kernel size {header.get('kernel_size')!r}")
    hidden = int(header["channels"][1])
    k3 = KERNEL ** 3
    sizes = [hidden * k3, hidden, hidden * k3, 1]
    if flat.size != sum(sizes):
        raise FormatError("payload", "payload length mismatch")
    flat = flat.astype(np.float64)
    parts, pos = [], 0
    for n in sizes:
        parts.append(flat[pos:pos + n])
        pos += n
    return AdapterNet(
        tau=float(header["tau"]), hidden=hidden,
        w1=parts[0].reshape(hidden, 1, KERNEL, KERNEL, KERNEL), b1=parts[1].copy(),
        w2=parts[2].reshape(1, hidden, KERNEL, KERNEL, KERNEL), b2=parts[3].copy(),
    )
