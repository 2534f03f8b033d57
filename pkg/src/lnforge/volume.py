"""Raster data model (``Volume``, ``Mask``) and the LNV volume file format.

Arrays are held in memory with shape ``(nx, ny, nz)`` and indexed ``[i, j, k]``.
On disk the payload is x-fastest (Fortran order), little-endian float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from lnforge.fileio import FormatError, read_record, write_record

UNITS = ("HU", "SDF", "NORMALIZED")
# on-disk unit tags
_UNIT_TO_TAG = {"HU": "HU", "SDF": "SDF", "NORMALIZED": "NORM"}
_TAG_TO_UNIT = {v: k for k, v in _UNIT_TO_TAG.items()}

HU_WINDOW = (-175.0, 250.0)
SPACING_ATOL = 1e-9


class VolumeFormatError(FormatError):
    """Raised for LNV files or volume values that violate the format contract."""


Triple = tuple[int, int, int]


def _check_spacing(spacing) -> tuple[float, float, float]:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3:
        raise VolumeFormatError("spacing", "expected three components")
    if not all(math.isfinite(s) and s > 0 for s in sp):
        raise VolumeFormatError("spacing", f"non-finite or non-positive spacing {sp}")
    return sp


@dataclass(frozen=True, eq=False)
class Volume:
    values: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    unit: str = "HU"

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float32)
        if vals.ndim != 3 or min(vals.shape) < 1:
            raise VolumeFormatError("dims", f"expected a non-empty 3D array, got shape {vals.shape}")
        if self.unit not in UNITS:
            raise VolumeFormatError("unit", f"unknown unit {self.unit!r}")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))
        if self.unit == "NORMALIZED" and vals.size and (vals.min() < -1.0 or vals.max() > 1.0):
            raise VolumeFormatError("values", "NORMALIZED volume outside [-1, 1]")

    @property
    def dims(self) -> Triple:
        return tuple(int(n) for n in self.values.shape)

    def with_values(self, values: np.ndarray, unit: str | None = None) -> "Volume":
        return Volume(values, self.spacing, self.unit if unit is None else unit)


@dataclass(frozen=True, eq=False)
class Mask:
    values: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        raw = np.asarray(self.values)
        if raw.ndim != 3 or min(raw.shape) < 1:
            raise VolumeFormatError("dims", f"expected a non-empty 3D array, got shape {raw.shape}")
        if raw.dtype != np.bool_:
            if not np.isin(raw, (0, 1)).all():
                raise VolumeFormatError("values", "mask values must be 0 or 1")
            raw = raw.astype(bool)
        object.__setattr__(self, "values", raw)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> Triple:
        return tuple(int(n) for n in self.values.shape)

    @property
    def count(self) -> int:
        return int(self.values.sum())


def spacing_equal(a, b, atol: float = SPACING_ATOL) -> bool:
    return all(abs(x - y) <= atol for x, y in zip(a, b))


# ---------------------------------------------------------------- file format

def write_lnv(path: str | Path, values: np.ndarray, spacing, unit_tag: str, **extras) -> None:
    values = np.asarray(values, dtype=np.float32)
    if not np.isfinite(values).all():
        raise VolumeFormatError("values", "non-finite voxel")
    header = {
        "magic": "LNV1",
        "dims": [int(n) for n in values.shape],
        "spacing": [float(s) for s in spacing],
        "dtype": "f32",
        "unit": unit_tag,
    }
    header.update(extras)
    write_record(path, header, values.ravel(order="F"))


def read_lnv(path: str | Path) -> tuple[dict, np.ndarray]:
    """Parse an LNV file into ``(header, values)`` with values shaped ``dims``."""
    try:
        header, flat = read_record(path)
    except FormatError as exc:
        raise VolumeFormatError(exc.field, str(exc).split(": ", 1)[-1]) from exc
    if header.get("magic") != "LNV1":
        raise VolumeFormatError("magic", f"bad magic {header.get('magic')!r}")
    if header["dtype"] != "f32":
        raise VolumeFormatError("dtype", "LNV payload must be f32")
    dims = header.get("dims")
    if (not isinstance(dims, list) or len(dims) != 3
            or not all(isinstance(n, int) and n > 0 for n in dims)):
        raise VolumeFormatError("dims", f"malformed dims {dims!r}")
    spacing = header.get("spacing")
    if not isinstance(spacing, list) or len(spacing) != 3:
        raise VolumeFormatError("spacing", f"malformed spacing {spacing!r}")
    header["spacing"] = list(_check_spacing(spacing))
    if header.get("unit") not in ("HU", "SDF", "NORM", "MASK"):
        raise VolumeFormatError("unit", f"unknown unit {header.get('unit')!r}")
    if flat.size != dims[0] * dims[1] * dims[2]:
        raise VolumeFormatError("payload", "payload length mismatch")
    if not np.isfinite(flat).all():
        raise VolumeFormatError("payload", "non-finite voxel")
    return header, flat.reshape(dims, order="F")


def save_volume(v: Volume, path: str | Path) -> None:
    write_lnv(path, v.values, v.spacing, _UNIT_TO_TAG[v.unit])


def load_volume(path: str | Path) -> Volume:
    header, values = read_lnv(path)
    if header["unit"] == "MASK":
        raise VolumeFormatError("unit", "file holds a mask; use load_mask")
    return Volume(values, tuple(header["spacing"]), _TAG_TO_UNIT[header["unit"]])


def save_mask(m: Mask, path: str | Path) -> None:
    write_lnv(path, m.values.astype(np.float32), m.spacing, "MASK")


def load_mask(path: str | Path) -> Mask:
    header, values = read_lnv(path)
    if header["unit"] != "MASK":
        raise VolumeFormatError("unit", f"expected MASK, got {header['unit']}")
    return Mask(values, tuple(header["spacing"]))


# ---------------------------------------------------------------- intensity ops

def clamp_hu(v: Volume, lo: float = HU_WINDOW[0], hi: float = HU_WINDOW[1]) -> Volume:
    if not lo < hi:
        raise ValueError(f"clamp window requires lo < hi, got ({lo}, {hi})")
    return v.with_values(np.clip(v.values, np.float32(lo), np.float32(hi)))


def normalize_hu(v: Volume, lo: float = HU_WINDOW[0], hi: float = HU_WINDOW[1]) -> Volume:
    """Clamp to ``[lo, hi]`` and map affinely onto ``[-1, 1]``."""
    if not lo < hi:
        raise ValueError(f"normalization window requires lo < hi, got ({lo}, {hi})")
    x = np.clip(v.values.astype(np.float64), lo, hi)
    out = np.clip((2.0 * x - (lo + hi)) / (hi - lo), -1.0, 1.0)
    return Volume(out.astype(np.float32), v.spacing, "NORMALIZED")


def denormalize_hu(values: np.ndarray, lo: float = HU_WINDOW[0], hi: float = HU_WINDOW[1]) -> np.ndarray:
    """Inverse of :func:`normalize_hu` on raw arrays (float64 result)."""
    x = np.asarray(values, dtype=np.float64)
    return 0.5 * (x * (hi - lo) + (lo + hi))


# ---------------------------------------------------------------- patches

def _slices(corner, size) -> tuple[slice, slice, slice]:
    return tuple(slice(int(c), int(c) + int(s)) for c, s in zip(corner, size))


def _inside(corner, size, dims) -> bool:
    return all(c >= 0 and s >= 0 and c + s <= n for c, s, n in zip(corner, size, dims))


def extract_patch(v: Volume | Mask, corner: Triple, size: Triple) -> Volume | Mask:
    if len(corner) != 3 or len(size) != 3 or min(size) < 1 or not _inside(corner, size, v.dims):
        raise IndexError(f"patch corner={tuple(corner)} size={tuple(size)} outside dims {v.dims}")
    block = v.values[_slices(corner, size)].copy()
    if isinstance(v, Mask):
        return Mask(block, v.spacing)
    return v.with_values(block)


def paste_patch(v: Volume | Mask, patch: Volume | Mask | None, corner: Triple) -> Volume | Mask:
    """Return a copy of ``v`` with ``patch`` written at ``corner``.

    ``patch=None`` stands for a zero-size patch and returns ``v`` unchanged.
    """
    if patch is None:
        return v
    if not spacing_equal(v.spacing, patch.spacing):
        raise ValueError(f"spacing mismatch: {v.spacing} vs {patch.spacing}")
    if not _inside(corner, patch.dims, v.dims):
        raise IndexError(f"patch of dims {patch.dims} at {tuple(corner)} exceeds dims {v.dims}")
    out = v.values.copy()
    out[_slices(corner, patch.dims)] = patch.values
    if isinstance(v, Mask):
        return Mask(out, v.spacing)
    return v.with_values(out)
