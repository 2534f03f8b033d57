"""Linear (PCA-style) codec between fixed-size grids and latent vectors.

The basis is the top-``d`` right singular subspace of the centred training
matrix, found by block power iteration with Rayleigh-Ritz extraction on the
sample-space Gram matrix. Decoding clips to ``[-clip, clip]``: the TSDF
truncation bound for shape codecs, 1.0 for normalized-intensity codecs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from lnforge.fileio import FormatError, read_record, write_record
from lnforge.sdf import TsdfGrid

DEFAULT_LATENT_DIM = 32
POWER_TOL = 1e-8
POWER_MAX_ITER = 1000
_OVERSAMPLE = 8


@dataclass(eq=False)
class LinearCodec:
    grid_dims: tuple[int, int, int]
    mean: np.ndarray            # (V,)
    basis: np.ndarray           # (d, V), orthonormal rows
    singular_values: np.ndarray  # (d,), descending
    clip: float = 0.2
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    norm_scale: float = 1.0

    @property
    def latent_dim(self) -> int:
        return int(self.basis.shape[0])

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.grid_dims))

    def encode_array(self, x: np.ndarray) -> np.ndarray:
        """Encode one grid (``dims``) or a stack of flattened grids (``(n, V)``)."""
        x = np.asarray(x, dtype=np.float64)
        flat = x.reshape(-1, self.n_voxels) if x.ndim != 1 else x[None]
        z = (flat - self.mean) @ self.basis.T
        return z[0] if x.ndim == 1 or x.shape == tuple(self.grid_dims) else z

    def decode_array(self, z: np.ndarray, clamp: bool = True) -> np.ndarray:
        """Decode latents ``(d,)`` or ``(n, d)`` to grids ``dims`` or ``(n, *dims)``."""
        z = np.asarray(z, dtype=np.float64)
        flat = self.mean + np.atleast_2d(z) @ self.basis
        if clamp:
            flat = np.clip(flat, -self.clip, self.clip)
        out = flat.reshape((-1, *self.grid_dims))
        return out[0] if z.ndim == 1 else out


def _orthonormal_completion(q: np.ndarray, total: int, n_features: int) -> np.ndarray:
    # Extend the orthonormal rows of q to ``total`` rows, deterministically.
    rows = [r for r in q]
    e = 0
    while len(rows) < total:
        cand = np.zeros(n_features)
        cand[e % n_features] = 1.0
        e += 1
        for r in rows:
            cand -= (cand @ r) * r
        for r in rows:  # second pass for numerical orthogonality
            cand -= (cand @ r) * r
        norm = np.linalg.norm(cand)
        if norm > 1e-6:
            rows.append(cand / norm)
    return np.array(rows).reshape(total, n_features)


def top_singular(x: np.ndarray, d: int, tol: float = POWER_TOL, max_iter: int = POWER_MAX_ITER,
                 seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Top-``d`` singular values and right singular vectors of ``x`` (n, V).

    Orthogonalized block power iteration on ``x x^T`` with an oversampled block;
    stops when every tracked singular value changes by less than ``tol``
    (relative to the largest one) between iterations.
    """
    n, v = x.shape
    gram = x @ x.T
    k = min(n, d + _OVERSAMPLE)
    rng = np.random.default_rng(seed)
    u, _ = np.linalg.qr(rng.standard_normal((n, k)))
    prev = None
    eigvals = np.zeros(k)
    for _ in range(max_iter * max(d, 1)):
        u, _ = np.linalg.qr(gram @ u)
        # Rayleigh-Ritz on the current block
        small = u.T @ gram @ u
        eigvals, vecs = np.linalg.eigh(0.5 * (small + small.T))
        order = np.argsort(eigvals)[::-1]
        eigvals, u = eigvals[order], u @ vecs[:, order]
        sv = np.sqrt(np.clip(eigvals[:d], 0.0, None))
        if prev is not None:
            scale = max(sv[0], 1e-300)
            if np.max(np.abs(sv - prev)) <= tol * scale:
                break
        prev = sv
    sv = np.sqrt(np.clip(eigvals[:d], 0.0, None))
    m = len(sv)
    keep = sv > max(sv[0] if m else 0.0, 1.0) * 1e-10
    rows = (u[:, :m][:, keep].T @ x) / sv[keep][:, None] if keep.any() else np.zeros((0, v))
    # re-orthonormalize right vectors (Gram-Schmidt via QR)
    if len(rows):
        q, r = np.linalg.qr(rows.T)
        q *= np.sign(np.diag(r))[None, :]
        rows = q.T
    basis = _orthonormal_completion(rows, d, v)
    values = np.zeros(d)
    values[: m][keep] = sv[keep]
    return values, basis


def fit_codec(training: Sequence[TsdfGrid] | np.ndarray, d: int = DEFAULT_LATENT_DIM,
              clip: float | None = None, spacing=None) -> LinearCodec:
    """Fit a rank-``d`` linear codec to TSDF grids (or a ``(n, *dims)`` array)."""
    if isinstance(training, np.ndarray):
        stack = np.asarray(training, dtype=np.float64)
        dims = tuple(int(s) for s in stack.shape[1:])
        clip = 1.0 if clip is None else clip
        norm_scale = 1.0
        spacing = spacing or (1.0, 1.0, 1.0)
    else:
        if not training:
            raise ValueError("fit_codec needs training grids")
        dims = training[0].dims
        for g in training:
            if g.dims != dims:
                raise ValueError(f"inconsistent dims: {g.dims} vs {dims}")
        stack = np.stack([g.values.astype(np.float64) for g in training])
        clip = training[0].tau if clip is None else clip
        norm_scale = training[0].norm_scale
        spacing = training[0].spacing
    n = stack.shape[0]
    if n < d + 1:
        raise ValueError(f"fit_codec needs at least d+1={d + 1} samples, got {n}")
    flat = stack.reshape(n, -1)
    mean = flat.mean(axis=0)
    sv, basis = top_singular(flat - mean, d)
    return LinearCodec(dims, mean, basis, sv, float(clip), tuple(spacing), float(norm_scale))


def encode(c: LinearCodec, t: TsdfGrid) -> np.ndarray:
    if t.dims != tuple(c.grid_dims):
        raise ValueError(f"grid dims {t.dims} do not match codec dims {tuple(c.grid_dims)}")
    return c.encode_array(t.values)


def decode(c: LinearCodec, z: np.ndarray) -> TsdfGrid:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (c.latent_dim,):
        raise ValueError(f"latent has shape {z.shape}, codec expects ({c.latent_dim},)")
    vals = c.decode_array(z)
    return TsdfGrid(vals.astype(np.float32), c.spacing, c.clip, c.norm_scale)


# ---------------------------------------------------------------- persistence

def save_codec(c: LinearCodec, path: str | Path) -> None:
    header = {
        "magic": "LNC1",
        "grid_dims": list(c.grid_dims),
        "latent_dim": c.latent_dim,
        "clip": c.clip,
        "spacing": list(c.spacing),
        "norm_scale": c.norm_scale,
        "dtype": "f32",
    }
    payload = np.concatenate([c.mean, c.basis.ravel(), c.singular_values])
    write_record(path, header, payload)


def load_codec(path: str | Path) -> LinearCodec:
    header, flat = read_record(path)
    if header.get("magic") != "LNC1":
        raise FormatError("magic", f"bad codec magic {header.get('magic')!r}")
    dims = tuple(int(n) for n in header["grid_dims"])
    v = int(np.prod(dims))
    d = int(header["latent_dim"])
    if flat.size != v + d * v + d:
        raise FormatError("payload", "payload length mismatch")
    flat = flat.astype(np.float64)
    return LinearCodec(
        dims,
        flat[:v],
        flat[v: v + d * v].reshape(d, v),
        flat[v + d * v:],
        float(header["clip"]),
        tuple(header["spacing"]),
        float(header["norm_scale"]),
    )
