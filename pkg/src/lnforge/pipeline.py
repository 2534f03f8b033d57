"""Lesion synthesis and dataset assembly.

A lesion is made in three stages. A shape is sampled in latent space, decoded
to a TSDF and refined by the adapter, then rescaled to a target long axis. A
texture patch is sampled conditioned on the shape latent. The lesion is then
composited into a background CT at a site that passes the placement checks.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numba import njit

from lnforge.adapter import AdapterNet, apply_adapter
from lnforge.codec import LinearCodec, decode, encode
from lnforge.config import PipelineConfig, Placement
from lnforge.diffusion import DenoiserNet, NoiseSchedule, reverse_sample
from lnforge.sdf import (
    MAX_FACTOR,
    MIN_FACTOR,
    TsdfGrid,
    centroid,
    dilate,
    distance_mm,
    fitting_dims,
    is_connected,
    long_axis_mm,
    mask_to_tsdf,
    resample,
    scale_shape,
    tsdf_to_mask,
    voxel_diagonal,
)
from lnforge.volume import (
    HU_WINDOW,
    Mask,
    Volume,
    denormalize_hu,
    save_mask,
    save_volume,
    spacing_equal,
)

MANIFEST_VERSION = 1
LONG_AXIS_RANGE = (1.7, 30.0)
_FIT_ITERATIONS = 4


class ShapeRejected(RuntimeError):
    """Every shape draw was rejected; ``reasons`` lists why, one per try."""

    def __init__(self, reasons: list[str]):
        super().__init__(f"no acceptable shape after {len(reasons)} tries: " + "; ".join(reasons))
        self.reasons = reasons


class PlacementError(RuntimeError):
    pass


# ---------------------------------------------------------------- placement

@dataclass(frozen=True)
class PlacementCandidate:
    center: tuple[int, int, int]
    max_long_axis_mm: float
    soft_tissue_fraction: float
    probe_radius_mm: float

    def __post_init__(self):
        if not 0.0 <= self.soft_tissue_fraction <= 1.0:
            raise ValueError(f"soft_tissue_fraction {self.soft_tissue_fraction} outside [0, 1]")
        if not self.max_long_axis_mm > 0:
            raise ValueError("max_long_axis_mm must be positive")


def ball_offsets(radius_mm: float, spacing) -> tuple[np.ndarray, np.ndarray]:
    """Integer offsets within ``radius_mm`` of the origin, sorted by distance.

    Returns ``(offsets (n, 3), distances_mm (n,))``; the sort is stable so ties
    keep C order.
    """
    sp = np.asarray(spacing, dtype=np.float64)
    reach = np.floor(radius_mm / sp + 1e-9).astype(int)
    axes = [np.arange(-r, r + 1) for r in reach]
    off = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    dist = np.sqrt((((off * sp) ** 2).sum(axis=1)))
    keep = dist <= radius_mm + 1e-9
    off, dist = off[keep], dist[keep]
    order = np.argsort(dist, kind="stable")
    return off[order], dist[order]


@njit(cache=True)
def _ball_counts(flat, centers, offsets, counts_at):
    # offsets are sorted by distance, so each ladder ball is a prefix of them
    out = np.zeros((centers.shape[0], counts_at.shape[0]), dtype=np.int64)
    for i in range(centers.shape[0]):
        c = centers[i]
        total = 0
        j = 0
        for r in range(counts_at.shape[0]):
            while j < counts_at[r]:
                total += flat[c + offsets[j]]
                j += 1
            out[i, r] = total
    return out


def _check_grids(ct: Volume, *masks: Mask) -> None:
    for m in masks:
        if m.dims != ct.dims:
            raise ValueError(f"dims mismatch: {m.dims} vs {ct.dims}")
        if not spacing_equal(m.spacing, ct.spacing):
            raise ValueError(f"spacing mismatch: {m.spacing} vs {ct.spacing}")


def find_candidates(ct: Volume, region: Mask, existing: Mask | None, cfg: Placement | None = None
                    ) -> list[PlacementCandidate]:
    """Scan region voxels on a stride lattice for sites that admit a lesion.

    A lattice voxel qualifies at probe radius ``r`` when its ball of radius ``r``
    holds at least ``cfg.min_soft_fraction`` voxels inside the HU window (voxels
    outside the volume count as not soft) and no voxel of ``existing`` dilated by
    ``cfg.margin`` voxels. The centre voxel itself must also lie in the window.
    The admitted radius is the largest ladder radius such that it and every
    smaller ladder radius qualify; candidates are returned in C scan order.
    """
    cfg = cfg or Placement()
    if existing is None:
        existing = Mask(np.zeros(ct.dims, dtype=bool), ct.spacing)
    _check_grids(ct, region, existing)
    radii = np.asarray(cfg.radius_ladder, dtype=np.float64)
    soft = (ct.values >= cfg.hu_lo) & (ct.values <= cfg.hu_hi)

    lattice = np.zeros(ct.dims, dtype=bool)
    s = cfg.stride
    lattice[::s, ::s, ::s] = True
    centers = np.argwhere(region.values & lattice & soft)
    if len(centers) == 0:
        return []

    blocked = dilate(existing.values, cfg.margin)
    clearance = distance_mm(blocked, ct.spacing)[tuple(centers.T)]

    offsets, dist = ball_offsets(float(radii[-1]), ct.spacing)
    counts_at = np.searchsorted(dist, radii + 1e-9, side="right")
    pad = np.abs(offsets).max(axis=0)
    padded = np.pad(soft, [(p, p) for p in pad], constant_values=False)
    strides = np.array([padded.shape[1] * padded.shape[2], padded.shape[2], 1])
    flat = padded.ravel().astype(np.uint8)
    off_flat = offsets @ strides
    c_flat = (centers + pad) @ strides

    fractions = _ball_counts(flat, c_flat, off_flat, counts_at) / counts_at
    ok = (fractions >= cfg.min_soft_fraction) & (clearance[:, None] > radii[None, :])
    n_ok = np.cumprod(ok, axis=1).sum(axis=1)
    out = []
    for c, n, frac in zip(centers, n_ok, fractions):
        if n == 0:
            continue
        out.append(PlacementCandidate(
            center=tuple(int(v) for v in c),
            max_long_axis_mm=float(2.0 * radii[n - 1]),
            soft_tissue_fraction=float(frac[n - 1]),
            probe_radius_mm=float(radii[n - 1]),
        ))
    return out


def sample_target_long_axis(rng, lo_mm: float = LONG_AXIS_RANGE[0], hi_mm: float = LONG_AXIS_RANGE[1]) -> float:
    if not lo_mm < hi_mm:
        raise ValueError(f"need lo < hi, got ({lo_mm}, {hi_mm})")
    return float(rng.uniform(lo_mm, hi_mm))


# ---------------------------------------------------------------- shape

@dataclass(eq=False)
class ShapeDraw:
    """A synthesized shape before texturing.

    ``canonical_*`` live on the codec grid; ``mask``/``tsdf`` are the rescaled
    result, obtained by scaling about ``center`` (canonical voxel coords) by
    ``factor``.
    """

    mask: Mask
    tsdf: TsdfGrid
    canonical_mask: Mask
    canonical_tsdf: TsdfGrid
    factor: float
    center: np.ndarray
    long_axis_mm: float
    tries: int
    rejections: list[str] = field(default_factory=list)


def _fit_to_target(t: TsdfGrid, m: Mask, measured: float, target_mm: float, margin: int):
    """Rescale ``t`` until its long axis is as close to ``target_mm`` as a few
    multiplicative corrections get it. Returns ``(tsdf, mask, factor, length)``
    for the best connected result, or None."""
    center = centroid(m.values)
    factor = target_mm / measured
    best = None
    for _ in range(_FIT_ITERATIONS):
        factor = min(max(factor, MIN_FACTOR), MAX_FACTOR)
        dims = fitting_dims(m.values, factor, center, margin)
        try:
            scaled = scale_shape(t, factor, dims, center)
        except ValueError:
            break
        sm = tsdf_to_mask(scaled)
        if sm.count == 0 or not is_connected(sm.values):
            factor *= 1.25
            continue
        length = long_axis_mm(sm)
        if best is None or abs(length - target_mm) < abs(best[3] - target_mm):
            best = (scaled, sm, factor, length)
        if abs(length - target_mm) <= 0.25 * voxel_diagonal(t.spacing):
            break
        factor *= target_mm / length
    return best, center


def synth_shape(shape_net: DenoiserNet, adapter: AdapterNet | None, codec: LinearCodec,
                schedule: NoiseSchedule, rng, target_mm: float, *, max_tries: int = 10,
                margin: int = 2) -> ShapeDraw:
    """Sample a connected lesion shape and rescale it to ``target_mm`` long axis.

    The decoded shape is rejected (and redrawn) when it is empty, disconnected
    under 6-connectivity, or cannot be brought within two voxel diagonals of the
    target. ``margin`` voxels of background surround the rescaled mask.
    """
    tolerance = 2.0 * voxel_diagonal(codec.spacing)
    reasons: list[str] = []
    for attempt in range(1, max_tries + 1):
        z = reverse_sample(shape_net, schedule, rng) / shape_net.latent_scale
        t = decode(codec, z)
        if adapter is not None:
            t = apply_adapter(adapter, t)
        m = tsdf_to_mask(t)
        if m.count == 0:
            reasons.append(f"try {attempt}: empty mask")
            continue
        if not is_connected(m.values):
            reasons.append(f"try {attempt}: disconnected mask")
            continue
        measured = long_axis_mm(m)
        if target_mm == measured:
            return ShapeDraw(m, t, m, t, 1.0, centroid(m.values), measured, attempt, reasons)
        best, center = _fit_to_target(t, m, measured, target_mm, margin)
        if best is None:
            reasons.append(f"try {attempt}: rescaling failed")
            continue
        scaled, sm, factor, length = best
        if abs(length - target_mm) > tolerance:
            reasons.append(f"try {attempt}: long axis {length:.3f} mm misses target {target_mm:.3f} mm")
            continue
        return ShapeDraw(sm, scaled, m, t, factor, center, length, attempt, reasons)
    raise ShapeRejected(reasons)


# ---------------------------------------------------------------- texture

def synth_texture(texture_net: DenoiserNet, codec_tex: LinearCodec, schedule: NoiseSchedule,
                  mask: Mask, rng, *, shape_codec: LinearCodec) -> Volume:
    """Sample a normalized intensity patch conditioned on ``mask``'s shape latent."""
    if mask.dims != tuple(codec_tex.grid_dims):
        raise ValueError(f"mask dims {mask.dims} do not match texture grid {tuple(codec_tex.grid_dims)}")
    cond = encode(shape_codec, mask_to_tsdf(mask, shape_codec.clip, shape_codec.norm_scale))
    z = reverse_sample(texture_net, schedule, rng, cond=cond * texture_net.cond_scale)
    vals = codec_tex.decode_array(z / texture_net.latent_scale, clamp=False)
    return Volume(np.clip(vals, -1.0, 1.0).astype(np.float32), mask.spacing, "NORMALIZED")


def rescale_texture(texture: Volume, shape: ShapeDraw) -> Volume:
    """Carry a canonical-grid texture through the same rescaling as ``shape``."""
    if shape.factor == 1.0 and shape.mask.dims == texture.dims:
        return texture
    vals = resample(texture.values, shape.factor, shape.center, shape.mask.dims, mode="nearest")
    return Volume(np.clip(vals, -1.0, 1.0).astype(np.float32), texture.spacing, "NORMALIZED")


# ---------------------------------------------------------------- samples

def _anchor(fg: np.ndarray) -> tuple[int, int, int]:
    idx = np.argwhere(fg)
    k = int(np.argmin(((idx - idx.mean(axis=0)) ** 2).sum(axis=1)))
    return tuple(int(v) for v in idx[k])


@dataclass(eq=False)
class SynthSample:
    """A textured lesion patch. ``anchor`` is the mask voxel nearest the mask
    centroid; placing the sample at ``center`` puts the anchor there."""

    mask_patch: Mask
    texture_patch: Volume
    long_axis_mm: float
    provenance: dict = field(default_factory=dict)
    anchor: tuple[int, int, int] | None = None
    # the generated shape on the codec grid, before rescaling
    canonical_mask: Mask | None = None

    def __post_init__(self):
        if self.mask_patch.dims != self.texture_patch.dims:
            raise ValueError("texture and mask dims differ")
        if self.texture_patch.unit != "NORMALIZED":
            raise ValueError("texture patch must be NORMALIZED")
        if self.mask_patch.count == 0:
            raise ValueError("empty lesion mask")
        if abs(long_axis_mm(self.mask_patch) - self.long_axis_mm) > 1e-6:
            raise ValueError("long_axis_mm does not match the mask")
        if self.anchor is None:
            self.anchor = _anchor(self.mask_patch.values)


@dataclass(eq=False)
class PipelineModels:
    shape_net: DenoiserNet
    shape_schedule: NoiseSchedule
    shape_codec: LinearCodec
    texture_net: DenoiserNet
    texture_schedule: NoiseSchedule
    texture_codec: LinearCodec
    adapter: AdapterNet | None = None
    # checkpoint digests recorded in provenance; the CLI fills in file hashes
    hashes: dict = field(default_factory=dict)


def make_sample(models: PipelineModels, target_mm: float, shape_seed: int, texture_seed: int,
                max_tries: int = 10, margin: int = 2) -> SynthSample:
    shape = synth_shape(models.shape_net, models.adapter, models.shape_codec, models.shape_schedule,
                        np.random.default_rng(shape_seed), target_mm, max_tries=max_tries, margin=margin)
    tex = synth_texture(models.texture_net, models.texture_codec, models.texture_schedule,
                        shape.canonical_mask, np.random.default_rng(texture_seed),
                        shape_codec=models.shape_codec)
    provenance = {
        "shape_seed": int(shape_seed),
        "scale_factor": float(shape.factor),
        "texture_seed": int(texture_seed),
        "checkpoints": dict(sorted(models.hashes.items())),
        "shape_tries": shape.tries,
    }
    return SynthSample(shape.mask, rescale_texture(tex, shape), shape.long_axis_mm, provenance,
                       canonical_mask=shape.canonical_mask)


# ---------------------------------------------------------------- compositing

def _corner(sample: SynthSample, center) -> tuple[int, int, int]:
    return tuple(int(c) - int(a) for c, a in zip(center, sample.anchor))


def _fits(corner, size, dims) -> bool:
    return all(c >= 0 and c + s <= n for c, s, n in zip(corner, size, dims))


def blend_weights(mask: Mask, feather_mm: float) -> np.ndarray:
    """1 inside the mask, falling linearly to 0 at ``feather_mm`` outside it."""
    if feather_mm < 0:
        raise ValueError("feather_mm must be >= 0")
    fg = mask.values
    if feather_mm == 0:
        return fg.astype(np.float64)
    w = np.clip(1.0 - distance_mm(fg, mask.spacing) / feather_mm, 0.0, 1.0)
    w[fg] = 1.0
    return w


def blend(ct: Volume, sample: SynthSample, center, feather_mm: float,
          hu_window: tuple[float, float] = HU_WINDOW) -> Volume:
    """Composite ``sample`` into ``ct`` with its anchor at ``center``.

    Voxels with zero weight keep their exact input value.
    """
    if ct.unit != "HU":
        raise ValueError("blend needs an HU background")
    if not spacing_equal(ct.spacing, sample.mask_patch.spacing):
        raise ValueError(f"spacing mismatch: {ct.spacing} vs {sample.mask_patch.spacing}")
    corner = _corner(sample, center)
    size = sample.mask_patch.dims
    if not _fits(corner, size, ct.dims):
        raise IndexError(f"lesion patch at corner {corner} with dims {size} exceeds volume dims {ct.dims}")
    w = blend_weights(sample.mask_patch, feather_mm)
    sl = tuple(slice(c, c + s) for c, s in zip(corner, size))
    out = ct.values.copy()
    sub = out[sl]
    tex_hu = denormalize_hu(sample.texture_patch.values, *hu_window)
    mixed = w * tex_hu + (1.0 - w) * sub.astype(np.float64)
    touched = w > 0
    sub[touched] = mixed[touched].astype(np.float32)
    return Volume(out, ct.spacing, "HU")


def _patch_overlaps(blocked: np.ndarray, mask: Mask, corner) -> bool:
    sl = tuple(slice(c, c + s) for c, s in zip(corner, mask.dims))
    return bool((blocked[sl] & mask.values).any())


# ---------------------------------------------------------------- assembly

@dataclass
class DatasetManifest:
    seed: int
    config_hash: str
    backgrounds: list[dict] = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)
    entries: list[dict] = field(default_factory=list)
    version: int = MANIFEST_VERSION

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "checkpoints": self.checkpoints,
            "backgrounds": self.backgrounds,
            "entries": self.entries,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def read(cls, path: str | Path) -> "DatasetManifest":
        d = json.loads(Path(path).read_text())
        return cls(seed=d["seed"], config_hash=d["config_hash"], backgrounds=d["backgrounds"],
                   checkpoints=d["checkpoints"], entries=d["entries"], version=d["version"])

    def missing_files(self, root: str | Path) -> list[str]:
        root = Path(root)
        paths = [p for b in self.backgrounds for k, p in b.items() if k != "id"]
        paths += [p for e in self.entries for p in e["files"].values()]
        return [p for p in paths if not (root / p).exists()]


def entry_seeds(seed: int, index: int) -> tuple[int, int, int]:
    """Independent (shape, texture, placement) seeds for the ``index``-th lesion."""
    state = np.random.SeedSequence([int(seed), int(index)]).generate_state(3, dtype=np.uint64)
    return tuple(int(s) for s in state)


def deal_targets(counts: Sequence[int], seed: int, lo: float, hi: float) -> list[list[tuple]]:
    """Draw one target per lesion and deal them to backgrounds.

    Lesion ``i`` owns the seeds :func:`entry_seeds` ``(seed, i)`` and draws its
    first target from its placement stream. Targets are sorted in descending
    order and dealt to backgrounds in snake order (0..B-1, B-1..0, ...), skipping
    full ones, so every background receives a spread of sizes. Returns, per
    background, ``(index, seeds, place_rng, target)`` tuples in descending
    target order.
    """
    plans = []
    for i in range(int(sum(counts))):
        seeds = entry_seeds(seed, i)
        rng = np.random.default_rng(seeds[2])
        plans.append((i, seeds, rng, sample_target_long_axis(rng, lo, hi)))
    plans.sort(key=lambda p: (-p[3], p[0]))
    assigned: list[list[tuple]] = [[] for _ in counts]
    order = list(range(len(counts)))
    snake: list[int] = []
    pos = 0
    for plan in plans:
        while True:
            if not snake:
                snake = order if pos % 2 == 0 else order[::-1]
                snake = list(snake)
                pos += 1
            b = snake.pop(0)
            if len(assigned[b]) < counts[b]:
                break
        assigned[b].append(plan)
    return assigned


def _place_one(composite: Volume, region: Mask, existing: Mask, target: float, models: PipelineModels,
               cfg: PipelineConfig, seeds, place_rng):
    """Place one lesion; returns ``(sample, candidate, corner, first_target, draws)``."""
    pc = cfg.placement
    candidates = find_candidates(composite, region, existing, pc)
    blocked = dilate(existing.values, pc.margin)
    margin = int(math.ceil(pc.feather_mm / min(composite.spacing))) + 1
    lo, hi = cfg.long_axis.lo, cfg.long_axis.hi
    for draw in range(1, pc.max_retries + 1):
        if draw > 1:
            target = sample_target_long_axis(place_rng, lo, hi)
        qualifying = [c for c in candidates if c.max_long_axis_mm >= target]
        if not qualifying:
            continue
        sample = make_sample(models, target, seeds[0], seeds[1], pc.max_shape_tries, margin)
        sample.provenance["target_mm"] = target
        for k in place_rng.permutation(len(qualifying)):
            cand = qualifying[int(k)]
            corner = _corner(sample, cand.center)
            if not _fits(corner, sample.mask_patch.dims, composite.dims):
                continue
            if _patch_overlaps(blocked, sample.mask_patch, corner):
                continue
            return sample, cand, corner, target, draw
    raise PlacementError(f"no qualifying placement after {pc.max_retries} target draws")


def assemble_dataset(backgrounds: Sequence[Volume], regions: Sequence[Mask], counts: Sequence[int],
                     models: PipelineModels, cfg: PipelineConfig, seed: int, out_dir: str | Path,
                     ids: Sequence[str] | None = None) -> DatasetManifest:
    """Composite ``counts[b]`` synthetic lesions into each background and write the dataset.

    Layout under ``out_dir`` (all paths in the manifest are relative to it):
    ``volumes/<id>.lnv`` composited CT, ``labels/<id>.lnv`` union lesion mask,
    ``regions/<id>.lnv`` placement region, ``masks/<id>_<k>.lnv`` per-lesion
    patch masks (positioned by the entry's ``corner``), ``shapes/<id>_<k>.lnv``
    the same shapes on the codec grid before rescaling, and ``manifest.json``.

    Target long axes for the whole run are drawn up front and dealt across
    backgrounds (see :func:`deal_targets`); each background then places its
    lesions largest first, so small lesions do not use up the room large ones
    need.
    """
    if not (len(backgrounds) == len(regions) == len(counts)):
        raise ValueError("backgrounds, regions and counts must have equal length")
    if any(c < 0 for c in counts):
        raise ValueError("counts must be >= 0")
    ids = list(ids) if ids is not None else [f"bg{b:03d}" for b in range(len(backgrounds))]
    out = Path(out_dir)
    for sub in ("volumes", "labels", "regions", "masks", "shapes"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    manifest = DatasetManifest(seed=int(seed), config_hash=cfg.digest(),
                               checkpoints=dict(sorted(models.hashes.items())))
    assigned = deal_targets(counts, seed, cfg.long_axis.lo, cfg.long_axis.hi)
    for b, (ct, region, bg_id) in enumerate(zip(backgrounds, regions, ids)):
        _check_grids(ct, region)
        plans = assigned[b]
        composite = ct
        existing = Mask(np.zeros(ct.dims, dtype=bool), ct.spacing)
        for k, (i, seeds, place_rng, target) in enumerate(plans):
            sample, cand, corner, target, draws = _place_one(
                composite, region, existing, target, models, cfg, seeds, place_rng)
            composite = blend(composite, sample, cand.center, cfg.placement.feather_mm,
                              (cfg.placement.hu_lo, cfg.placement.hu_hi))
            sl = tuple(slice(c, c + s) for c, s in zip(corner, sample.mask_patch.dims))
            labels = existing.values.copy()
            labels[sl] |= sample.mask_patch.values
            existing = Mask(labels, ct.spacing)
            mask_rel = f"masks/{bg_id}_{k}.lnv"
            shape_rel = f"shapes/{bg_id}_{k}.lnv"
            save_mask(sample.mask_patch, out / mask_rel)
            save_mask(sample.canonical_mask, out / shape_rel)
            manifest.entries.append({
                "index": i,
                "background": bg_id,
                "center": list(cand.center),
                "corner": list(corner),
                "target_mm": target,
                "realized_mm": sample.long_axis_mm,
                "shape_seed": seeds[0],
                "texture_seed": seeds[1],
                "placement_seed": seeds[2],
                "scale_factor": sample.provenance["scale_factor"],
                "target_draws": draws,
                "shape_tries": sample.provenance["shape_tries"],
                "probe_radius_mm": cand.probe_radius_mm,
                "max_long_axis_mm": cand.max_long_axis_mm,
                "soft_tissue_fraction": cand.soft_tissue_fraction,
                "files": {"volume": f"volumes/{bg_id}.lnv", "mask": mask_rel, "shape": shape_rel},
            })
        paths = {"id": bg_id, "volume": f"volumes/{bg_id}.lnv", "label": f"labels/{bg_id}.lnv",
                 "region": f"regions/{bg_id}.lnv"}
        save_volume(composite, out / paths["volume"])
        save_mask(existing, out / paths["label"])
        save_mask(region, out / paths["region"])
        manifest.backgrounds.append(paths)

    manifest.write(out / "manifest.json")
    return manifest


def model_digest(*arrays: np.ndarray) -> str:
    """Digest of in-memory parameters, for models that were never written to disk."""
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return h.hexdigest()
