"""Overlap and landmark metrics for registration results."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..autodiff import ShapeError, no_grad
from ..geometry import TransformMap, fold_fraction, resample_nearest
from ..synthdata import LandmarkSet

__all__ = ["dice", "MTRE", "mtre", "MetricReport", "evaluate_pairs"]


def dice(warped_mask, target_mask) -> float:
    """``2 |A n B| / (|A| + |B|)`` of two binary masks; two empty masks score 1."""
    a = np.asarray(warped_mask)
    b = np.asarray(target_mask)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a = a > 0.5
    b = b > 0.5
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


@dataclass(frozen=True)
class MTRE:
    """Mean landmark error in normalized units and in pixels."""

    normalized: float
    pixels: float


def mtre(landmarks: LandmarkSet, phi: TransformMap, grid_shape=None) -> MTRE:
    """Mean of ``|phi(point_b) - point_a|`` over the landmark pairs.

    ``phi`` maps target-frame points into the source frame.  Pixel errors
    scale each component by the extent of its axis (``grid_shape``);
    without a grid the pixel value equals the normalized one.  Sums use
    ``math.fsum`` so the result does not depend on landmark order.
    """
    if len(landmarks) == 0:
        raise ValueError("mtre of an empty landmark set")
    pts = landmarks.points_b.T[None]
    with no_grad():
        mapped = phi(pts).data[0].T
    err = mapped - landmarks.points_a
    scale = np.ones(err.shape[1]) if grid_shape is None else np.asarray(grid_shape, dtype=np.float64)
    norm = np.sqrt(np.sum(err * err, axis=1))
    norm_px = np.sqrt(np.sum((err * scale) ** 2, axis=1))
    k = len(landmarks)
    return MTRE(math.fsum(norm) / k, math.fsum(norm_px) / k)


@dataclass
class MetricReport:
    dice: float | None
    mtre: float | None
    mtre_px: float | None
    fold_fraction: float
    per_pair: list = field(default_factory=list)

    def __post_init__(self):
        if self.dice is not None and not 0.0 <= self.dice <= 1.0:
            raise ValueError("dice must lie in [0, 1]")
        if self.mtre is not None and self.mtre < 0:
            raise ValueError("mtre must be non-negative")


def evaluate_pairs(pairs, maps) -> MetricReport:
    """DICE, mTRE and folds of one estimated map per ``ElasticPair``.

    ``maps[k]`` warps target-frame points into the source frame of
    ``pairs[k]``; the warped mask is the nearest-neighbour resampled
    source mask.
    """
    rows = []
    for pair, phi in zip(pairs, maps):
        shape = pair.source.shape[2:]
        warped = resample_nearest(pair.source_mask, phi)
        err = mtre(pair.landmarks, phi, shape)
        rows.append(
            {
                "dice": dice(warped, pair.target_mask),
                "mtre": err.normalized,
                "mtre_px": err.pixels,
                "fold_fraction": fold_fraction(phi, shape).fraction_negative,
            }
        )
    if not rows:
        raise ValueError("no pairs to evaluate")

    def mean(key):
        return math.fsum(r[key] for r in rows) / len(rows)

    return MetricReport(mean("dice"), mean("mtre"), mean("mtre_px"), mean("fold_fraction"), rows)
