"""Mask <-> truncated signed distance conversion, shape measurement and rescaling.

Sign convention: negative strictly inside the shape, positive outside.
Distances are computed with an exact separable squared EDT (lower envelope of
parabolas, one pass per axis).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
from scipy import ndimage, spatial

from lnforge.volume import Mask, VolumeFormatError, _check_spacing, read_lnv, write_lnv

DEFAULT_TAU = 0.2
MIN_FACTOR, MAX_FACTOR = 0.05, 20.0

# Sentinel for "no feature voxel on this line / in this grid".
EDT_INF = 1e30

_SIX_NEIGHBORS = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True, eq=False)
class TsdfGrid:
    values: np.ndarray
    spacing: tuple[float, float, float]
    tau: float = DEFAULT_TAU
    norm_scale: float = 1.0

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float32)
        if vals.ndim != 3:
            raise VolumeFormatError("dims", f"expected 3D array, got shape {vals.shape}")
        if not (self.tau > 0 and self.norm_scale > 0):
            raise ValueError("tau and norm_scale must be positive")
        if vals.size and (vals.min() < -self.tau or vals.max() > self.tau):
            raise ValueError(f"TSDF values outside [-{self.tau}, {self.tau}]")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.values.shape)


def save_tsdf(t: TsdfGrid, path: str | Path) -> None:
    write_lnv(path, t.values, t.spacing, "SDF", tau=float(t.tau), norm_scale=float(t.norm_scale))


def load_tsdf(path: str | Path) -> TsdfGrid:
    header, values = read_lnv(path)
    if header["unit"] != "SDF":
        raise VolumeFormatError("unit", f"expected SDF, got {header['unit']}")
    for key in ("tau", "norm_scale"):
        if not isinstance(header.get(key), (int, float)):
            raise VolumeFormatError(key, f"missing or malformed {key}")
    return TsdfGrid(values, tuple(header["spacing"]), float(header["tau"]), float(header["norm_scale"]))


def default_norm_scale(dims, spacing) -> float:
    """Half the physical extent of the grid along its shortest axis."""
    return 0.5 * min(n * s for n, s in zip(dims, spacing))


# ---------------------------------------------------------------- exact EDT

@numba.njit(cache=True)
def _envelope_lines(g, w2):
    # g: (lines, n) float64, transformed in place along the last axis.
    nlines, n = g.shape
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1, dtype=np.float64)
    f = np.empty(n, dtype=np.float64)
    for line in range(nlines):
        for q in range(n):
            f[q] = g[line, q]
        k = -1
        for q in range(n):
            if f[q] >= EDT_INF:
                continue
            if k < 0:
                k = 0
                v[0] = q
                z[0] = -np.inf
                z[1] = np.inf
                continue
            p = v[k]
            s = ((f[q] + w2 * q * q) - (f[p] + w2 * p * p)) / (2.0 * w2 * (q - p))
            while s <= z[k]:
                k -= 1
                p = v[k]
                s = ((f[q] + w2 * q * q) - (f[p] + w2 * p * p)) / (2.0 * w2 * (q - p))
            k += 1
            v[k] = q
            z[k] = s
            z[k + 1] = np.inf
        if k < 0:
            for q in range(n):
                g[line, q] = EDT_INF
            continue
        j = 0
        for q in range(n):
            while z[j + 1] < q:
                j += 1
            d = q - v[j]
            g[line, q] = w2 * d * d + f[v[j]]


def edt_squared(m: Mask | np.ndarray, sampling=None) -> np.ndarray:
    """Squared Euclidean distance from every voxel to the nearest foreground voxel.

    With ``sampling=None`` distances are in voxel-index units and the result is
    integer-valued. Passing per-axis step lengths (e.g. the spacing in mm) gives
    squared physical distances. A grid without foreground yields values of
    ``EDT_INF``.
    """
    fg = np.asarray(m.values if isinstance(m, Mask) else m, dtype=bool)
    steps = (1.0, 1.0, 1.0) if sampling is None else tuple(float(s) for s in sampling)
    g = np.where(fg, 0.0, EDT_INF)
    for axis in range(3):
        moved = np.moveaxis(g, axis, -1)
        shape = moved.shape
        lines = np.ascontiguousarray(moved).reshape(-1, shape[-1])
        _envelope_lines(lines, steps[axis] ** 2)
        g = np.moveaxis(lines.reshape(shape), -1, axis)
    return np.ascontiguousarray(g)


def distance_mm(fg: np.ndarray, spacing) -> np.ndarray:
    """Physical distance to the nearest ``fg`` voxel (``inf`` if there is none)."""
    d2 = edt_squared(fg, spacing)
    out = np.sqrt(d2)
    out[d2 >= EDT_INF] = np.inf
    return out


def dilate(m: np.ndarray, radius_vox: float) -> np.ndarray:
    """Euclidean ball dilation in voxel units."""
    m = np.asarray(m, dtype=bool)
    if radius_vox <= 0 or not m.any():
        return m.copy()
    return edt_squared(m) <= radius_vox * radius_vox


# ---------------------------------------------------------------- TSDF

def mask_to_tsdf(m: Mask, tau: float = DEFAULT_TAU, norm_scale: float | None = None) -> TsdfGrid:
    fg = m.values
    n_fg = int(fg.sum())
    if n_fg == 0 or n_fg == fg.size:
        raise ValueError("mask_to_tsdf needs at least one foreground and one background voxel")
    if norm_scale is None:
        norm_scale = default_norm_scale(m.dims, m.spacing)
    outside = np.sqrt(edt_squared(fg, m.spacing))
    inside = np.sqrt(edt_squared(~fg, m.spacing))
    sdf = np.where(fg, -inside, outside) / norm_scale
    return TsdfGrid(np.clip(sdf, -tau, tau).astype(np.float32), m.spacing, tau, norm_scale)


def tsdf_to_mask(t: TsdfGrid) -> Mask:
    return Mask(t.values < 0, t.spacing)


# ---------------------------------------------------------------- measurement

def surface_voxels(fg: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one background 6-neighbour (grid exterior counts as background)."""
    fg = np.asarray(fg, dtype=bool)
    eroded = ndimage.binary_erosion(fg, structure=_SIX_NEIGHBORS, border_value=0)
    return fg & ~eroded


def _max_pairwise(points: np.ndarray) -> float:
    if len(points) > 64:
        try:
            points = points[spatial.ConvexHull(points).vertices]
        except spatial.QhullError:
            pass
    best = 0.0
    chunk = 1024
    for start in range(0, len(points), chunk):
        block = points[start:start + chunk]
        diff = block[:, None, :] - points[None, :, :]
        best = max(best, float(np.einsum("ijk,ijk->ij", diff, diff).max()))
    return math.sqrt(best)


def long_axis_mm(m: Mask) -> float:
    """Maximum caliper diameter between surface voxel centres, in millimetres."""
    fg = m.values
    count = int(fg.sum())
    if count == 0:
        raise ValueError("long_axis_mm of an empty mask")
    if count == 1:
        return float(sum(m.spacing) / 3.0)
    idx = np.argwhere(surface_voxels(fg)).astype(np.float64)
    return _max_pairwise(idx * np.asarray(m.spacing))


def voxel_diagonal(spacing) -> float:
    return float(math.sqrt(sum(s * s for s in spacing)))


def is_connected(fg: np.ndarray) -> bool:
    _, n = ndimage.label(np.asarray(fg, dtype=bool), structure=_SIX_NEIGHBORS)
    return n == 1


def centroid(fg: np.ndarray) -> np.ndarray:
    return np.argwhere(fg).mean(axis=0)


# ---------------------------------------------------------------- rescaling

def resample(values: np.ndarray, factor: float, center, out_dims, cval: float = 0.0,
             mode: str = "constant") -> np.ndarray:
    """Trilinear sample of ``values`` at ``center + (x - out_center) / factor``.

    ``out_center`` is the geometric centre of the output grid, so ``center``
    (input voxel coordinates) lands in the middle of the output.
    """
    out_dims = tuple(int(n) for n in out_dims)
    out_center = (np.asarray(out_dims, dtype=np.float64) - 1.0) / 2.0
    grids = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in out_dims), indexing="ij")
    coords = [c + (g - oc) / factor for g, c, oc in zip(grids, center, out_center)]
    return ndimage.map_coordinates(
        np.asarray(values, dtype=np.float64), coords, order=1, mode=mode, cval=cval
    )


def fitting_dims(fg: np.ndarray, factor: float, center, margin: int = 2) -> tuple[int, int, int]:
    """Smallest odd cubic-per-axis output dims that hold ``fg`` scaled by ``factor`` about ``center``."""
    idx = np.argwhere(fg)
    reach = np.abs(idx - np.asarray(center)).max(axis=0) + 1.0
    half = np.ceil(reach * factor).astype(int) + margin
    return tuple(int(2 * h + 1) for h in half)


def scale_shape(t: TsdfGrid, factor: float, out_dims=None, center=None) -> TsdfGrid:
    """Rescale the implicit shape by ``factor`` about ``center``.

    Values are resampled trilinearly from the input grid; ``norm_scale`` is
    multiplied by ``factor`` so normalized values keep their physical meaning.
    """
    if not (MIN_FACTOR <= factor <= MAX_FACTOR) or not math.isfinite(factor):
        raise ValueError(f"scale factor {factor} outside [{MIN_FACTOR}, {MAX_FACTOR}]")
    if out_dims is None:
        out_dims = t.dims
    if center is None:
        center = [(n - 1) / 2.0 for n in t.dims]
    if factor == 1.0 and tuple(out_dims) == t.dims and np.allclose(center, [(n - 1) / 2.0 for n in t.dims]):
        vals = t.values.astype(np.float64)
    else:
        vals = resample(t.values, factor, center, out_dims, cval=t.tau)
    vals = np.clip(vals, -t.tau, t.tau).astype(np.float32)
    inside = vals < 0
    if inside.any():
        border = np.zeros_like(inside)
        border[[0, -1], :, :] = border[:, [0, -1], :] = border[:, :, [0, -1]] = True
        if (inside & border).any():
            raise ValueError("scaled shape exceeds the output grid")
    return TsdfGrid(vals, t.spacing, t.tau, t.norm_scale * factor)
