"""Procedural toy data: blobby lesion masks, matching intensity patches and
CT-like pelvic backgrounds with region masks. Everything is seeded."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from lnforge.volume import Mask, Volume, normalize_hu

SOFT_TISSUE_HU = 40.0
FAT_HU = -100.0
BONE_HU = 650.0
GAS_HU = -900.0
AIR_HU = -1000.0
LESION_NORM_MEAN = 0.5


def _rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _ellipsoid(coords: np.ndarray, center, semi_axes, rot) -> np.ndarray:
    local = (coords - np.asarray(center)) @ rot
    return ((local / np.asarray(semi_axes)) ** 2).sum(axis=-1) <= 1.0


def blob_mask(rng, dims=(24, 24, 24), spacing=(1.0, 1.0, 1.0), max_lobes: int = 3,
              semi_axis_range=(2.5, 7.0)) -> Mask:
    """Union of 1..``max_lobes`` ellipsoids whose centres lie inside the first one.

    Secondary lobes are anchored inside the primary ellipsoid, so the union is
    connected; semi-axes >= 2.5 voxels keep every feature at least 5 voxels thick.
    """
    dims = tuple(int(n) for n in dims)
    coords = np.stack(np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij"), -1)
    center = (np.asarray(dims) - 1) / 2.0 + rng.uniform(-1.0, 1.0, 3)
    lo, hi = semi_axis_range
    axes = rng.uniform(lo, hi, 3)
    rot = _rotation(rng)
    fg = _ellipsoid(coords, center, axes, rot)
    for _ in range(int(rng.integers(0, max_lobes))):
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        offset = direction * rng.uniform(0.3, 0.8) * axes.min()
        sub_axes = rng.uniform(lo, max(lo, 0.8 * axes.max()), 3)
        fg |= _ellipsoid(coords, center + offset, sub_axes, _rotation(rng))
    # keep a one-voxel empty border so the TSDF always has outside voxels
    fg[[0, -1], :, :] = fg[:, [0, -1], :] = fg[:, :, [0, -1]] = False
    return Mask(fg, spacing)


def blob_family(n: int, seed: int, **kwargs) -> list[Mask]:
    rng = np.random.default_rng(seed)
    return [blob_mask(rng, **kwargs) for _ in range(n)]


def lesion_texture(m: Mask, rng, inside_mean_hu: float | None = None) -> Volume:
    """Normalized intensity patch: bright lesion on soft-tissue surroundings."""
    if inside_mean_hu is None:
        # normalized value LESION_NORM_MEAN in the default window
        inside_mean_hu = 37.5 + LESION_NORM_MEAN * 212.5
    noise = ndimage.gaussian_filter(rng.standard_normal(m.dims), 1.0) * 60.0
    hu = np.where(m.values, inside_mean_hu, SOFT_TISSUE_HU) + noise
    hu = ndimage.gaussian_filter(hu, 0.5)
    return normalize_hu(Volume(hu.astype(np.float32), m.spacing, "HU"))


def pelvic_background(rng, dims=(64, 64, 48), spacing=(1.0, 1.0, 1.0)) -> tuple[Volume, Mask]:
    """CT-like slab: fat-wrapped soft-tissue body, gas-filled rectum, lateral bones.

    Returns the HU volume and the region mask (a perirectal ellipsoid, excluding
    the rectal lumen and bone) where lesions may be placed.
    """
    nx, ny, nz = (int(n) for n in dims)
    sx, sy, sz = spacing
    x, y, z = np.meshgrid(np.arange(nx) * sx, np.arange(ny) * sy, np.arange(nz) * sz, indexing="ij")
    cx, cy, cz = (nx - 1) * sx / 2, (ny - 1) * sy / 2, (nz - 1) * sz / 2
    jitter = rng.uniform(-2.0, 2.0, 2)
    ex, ey = 0.47 * nx * sx, 0.44 * ny * sy
    body = ((x - cx) / ex) ** 2 + ((y - cy) / ey) ** 2 <= 1.0
    inner = ((x - cx) / (ex - 4.0)) ** 2 + ((y - cy) / (ey - 4.0)) ** 2 <= 1.0
    hu = np.full(dims, AIR_HU)
    hu[body] = FAT_HU
    hu[inner] = SOFT_TISSUE_HU
    rx, ry = cx + jitter[0], cy + 0.15 * ny * sy + jitter[1]
    lumen = (x - rx) ** 2 + (y - ry) ** 2 <= 2.0 ** 2
    wall = (x - rx) ** 2 + (y - ry) ** 2 <= 4.0 ** 2
    hu[wall] = SOFT_TISSUE_HU + 15.0
    hu[lumen] = GAS_HU
    bone = np.zeros(dims, dtype=bool)
    for side in (-1, 1):
        bx = cx + side * 0.36 * nx * sx
        bone |= (x - bx) ** 2 + (y - cy + 0.05 * ny * sy) ** 2 <= 5.0 ** 2
    hu[bone] = BONE_HU
    noise = ndimage.gaussian_filter(rng.standard_normal(dims), 1.5) * 150.0
    hu = hu + np.where(body, noise, 0.0)
    region = (((x - rx) / (0.32 * nx * sx)) ** 2 + ((y - ry) / (0.3 * ny * sy)) ** 2
              + ((z - cz) / (0.42 * nz * sz)) ** 2) <= 1.0
    region &= inner & ~wall & ~ndimage.binary_dilation(bone, iterations=2)
    return Volume(hu.astype(np.float32), spacing, "HU"), Mask(region, spacing)
