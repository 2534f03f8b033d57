"""Distribution-fidelity metrics: improved precision/recall over exact k-NN
manifolds, and long-axis statistics of lesion masks."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from lnforge.codec import LinearCodec
from lnforge.sdf import long_axis_mm, mask_to_tsdf
from lnforge.volume import Mask

DEFAULT_K = 3


@dataclass(frozen=True, eq=False)
class FeatureSet:
    vectors: np.ndarray
    label: str = "REAL"

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        if not np.isfinite(v).all():
            raise ValueError("feature vectors must be finite")
        if self.label not in ("REAL", "FAKE"):
            raise ValueError(f"label must be REAL or FAKE, got {self.label!r}")
        object.__setattr__(self, "vectors", v)

    def __len__(self):
        return self.vectors.shape[0]


def _vectors(s) -> np.ndarray:
    return s.vectors if isinstance(s, FeatureSet) else np.atleast_2d(np.asarray(s, dtype=np.float64))


def pairwise_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact squared distances (difference form, no dot-product expansion)."""
    out = np.empty((a.shape[0], b.shape[0]))
    for start in range(0, a.shape[0], 256):
        diff = a[start:start + 256, None, :] - b[None, :, :]
        out[start:start + 256] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def _knn_sq(v: np.ndarray, k: int) -> np.ndarray:
    n = v.shape[0]
    if k < 1 or n < k + 1:
        raise ValueError(f"need at least k+1={k + 1} rows for k={k}, got {n}")
    d = pairwise_sq(v, v)
    np.fill_diagonal(d, np.inf)  # exclude self by index, not by distance
    return np.partition(d, k - 1, axis=1)[:, k - 1]


def knn_radius(s, k: int = DEFAULT_K) -> np.ndarray:
    """Distance from each row to its k-th nearest other row."""
    return np.sqrt(_knn_sq(_vectors(s), k))


def improved_precision(real, fake, k: int = DEFAULT_K) -> float:
    """Fraction of fake rows inside at least one real row's k-NN ball."""
    r, f = _vectors(real), _vectors(fake)
    if f.shape[0] == 0:
        raise ValueError("empty fake set")
    if r.shape[1] != f.shape[1]:
        raise ValueError("feature dimensions differ")
    radii_sq = _knn_sq(r, k)
    covered = (pairwise_sq(f, r) <= radii_sq[None, :]).any(axis=1)
    return float(covered.mean())


def improved_recall(real, fake, k: int = DEFAULT_K) -> float:
    """Fraction of real rows inside the fake manifold (precision with roles swapped)."""
    return improved_precision(fake, real, k)


def shape_features(codec: LinearCodec, masks: Sequence[Mask]) -> np.ndarray:
    """Latent codes of the masks' TSDFs, the shared embedding for precision/recall."""
    grids = [mask_to_tsdf(m, codec.clip, codec.norm_scale).values for m in masks]
    return codec.encode_array(np.stack(grids).reshape(len(grids), -1))


def ipr_report(real, fake, k: int = DEFAULT_K) -> dict:
    return {
        "ip": improved_precision(real, fake, k),
        "ir": improved_recall(real, fake, k),
        "k": int(k),
        "n_real": int(_vectors(real).shape[0]),
        "n_fake": int(_vectors(fake).shape[0]),
    }


# ---------------------------------------------------------------- long axis

def long_axis_report(masks: Sequence[Mask] | Sequence[float], bins: int = 10) -> dict:
    """Equal-width histogram over [min, max] of mask long axes plus summary stats.

    Accepts masks or already-measured lengths in millimetres.
    """
    if not len(masks):
        raise ValueError("long_axis_report needs at least one mask")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    lengths = np.array([long_axis_mm(m) if isinstance(m, Mask) else float(m) for m in masks])
    lo, hi = float(lengths.min()), float(lengths.max())
    counts, edges = np.histogram(lengths, bins=bins, range=(lo, hi) if hi > lo else (lo, lo + 1.0))
    return {
        "n": int(lengths.size),
        "min": lo,
        "max": hi,
        "mean": float(lengths.mean()),
        "fraction_3_10": float(((lengths >= 3.0) & (lengths <= 10.0)).mean()),
        "lengths": lengths.tolist(),
        "histogram": [
            {"bin_lo": float(a), "bin_hi": float(b), "count": int(c)}
            for a, b, c in zip(edges[:-1], edges[1:], counts)
        ],
    }


def write_histogram_csv(report: dict, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "count"])
        for row in report["histogram"]:
            writer.writerow([repr(row["bin_lo"]), repr(row["bin_hi"]), row["count"]])


def write_json(obj: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")


def ks_uniform(samples, lo: float, hi: float) -> float:
    """One-sample Kolmogorov-Smirnov statistic against uniform[lo, hi]."""
    x = np.sort(np.asarray(samples, dtype=np.float64))
    n = x.size
    cdf = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    upper = np.arange(1, n + 1) / n - cdf
    lower = cdf - np.arange(n) / n
    return float(max(upper.max(), lower.max()))
