"""Synthetic registration data: hollow triangles and circles, elastic-warp pairs.

All generators are pure functions of their arguments and seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, grid_sample, no_grad
from .geometry import FieldMap, fold_fraction, identity_grid, resample_image, resample_nearest

__all__ = [
    "ShapeSpec",
    "ElasticWarpSpec",
    "LandmarkSet",
    "ElasticPair",
    "WarpGenerationError",
    "render_shape",
    "gen_shapes",
    "random_warp",
    "gen_elastic_pairs",
]


@dataclass(frozen=True)
class ShapeSpec:
    """A hollow circle or triangle; ``radius`` is the circumradius in domain units."""

    kind: str
    center: tuple
    radius: float
    stroke: float = 2.0
    rotation: float = 0.0

    def __post_init__(self):
        if self.kind not in ("circle", "triangle"):
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if self.radius <= 0 or self.stroke <= 0:
            raise ValueError("radius and stroke must be positive")


@dataclass(frozen=True)
class ElasticWarpSpec:
    """Gaussian displacements on a ``control x control`` grid, multilinearly upsampled."""

    control: int = 5
    std: float = 0.03
    max_tries: int = 20
    landmarks: int = 100

    def __post_init__(self):
        if self.control < 1 or self.max_tries < 1 or self.landmarks < 1:
            raise ValueError("control, max_tries and landmarks must be at least 1")
        if self.std < 0:
            raise ValueError("std must be non-negative")


@dataclass
class LandmarkSet:
    """Correspondences: ``points_a[k]`` in the source frame matches ``points_b[k]`` in the target.

    Arrays have shape (K, d) in normalized coordinates.
    """

    points_a: np.ndarray
    points_b: np.ndarray

    def __post_init__(self):
        self.points_a = np.asarray(self.points_a, dtype=np.float64)
        self.points_b = np.asarray(self.points_b, dtype=np.float64)
        if self.points_a.shape != self.points_b.shape or self.points_a.ndim != 2:
            raise ValueError("landmark arrays must both be (K, d)")

    def __len__(self) -> int:
        return len(self.points_a)


@dataclass
class ElasticPair:
    source: np.ndarray  # (1, 1, *S)
    target: np.ndarray
    truth: FieldMap  # target-frame points -> source-frame points
    landmarks: LandmarkSet
    source_mask: np.ndarray
    target_mask: np.ndarray


class WarpGenerationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# shapes
# ---------------------------------------------------------------------------


def _triangle_sdf(px: np.ndarray, spec: ShapeSpec) -> np.ndarray:
    """Signed distance (negative inside) to an equilateral triangle, in domain units."""
    angles = spec.rotation + np.array([0.0, 2.0, 4.0]) * np.pi / 3
    verts = np.stack([spec.center[0] + spec.radius * np.cos(angles), spec.center[1] + spec.radius * np.sin(angles)], 1)
    dist = np.full(px.shape[1:], np.inf)
    inside = np.ones(px.shape[1:], dtype=bool)
    for k in range(3):
        p, q = verts[k], verts[(k + 1) % 3]
        e = q - p
        rel0, rel1 = px[0] - p[0], px[1] - p[1]
        t = np.clip((rel0 * e[0] + rel1 * e[1]) / (e @ e), 0.0, 1.0)
        dist = np.minimum(dist, np.hypot(rel0 - t * e[0], rel1 - t * e[1]))
        # vertices run counter-clockwise, so the interior is left of every edge
        inside &= e[0] * rel1 - e[1] * rel0 >= 0
    return np.where(inside, -dist, dist)


def render_shape(spec: ShapeSpec, size: int) -> tuple:
    """Anti-aliased hollow outline and filled mask, both (size, size).

    Intensity is ``clip(stroke/2 + 1/2 - |sd|, 0, 1)`` with the signed
    distance ``sd`` measured in pixels.
    """
    px = identity_grid((size, size))[0]
    if spec.kind == "circle":
        sd = np.hypot(px[0] - spec.center[0], px[1] - spec.center[1]) - spec.radius
    else:
        sd = _triangle_sdf(px, spec)
    sd_px = sd * size
    image = np.clip(spec.stroke / 2 + 0.5 - np.abs(sd_px), 0.0, 1.0)
    mask = (sd < 0).astype(np.float64)
    return image, mask


def gen_shapes(n: int, size: int = 128, seed: int = 0, stroke: float = 2.0) -> list:
    """``n`` random hollow triangles or circles as (image, mask, ShapeSpec).

    Centres are uniform in [0.3, 0.7]^2.  The circumradius is uniform in
    [0.15, r_max] with ``r_max = min(0.35, edge distance - 0.05 - stroke)``
    so the whole outline keeps a 0.05 margin from the domain boundary.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if size < 16:
        raise ValueError("size must be at least 16 pixels")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        kind = "circle" if rng.random() < 0.5 else "triangle"
        center = tuple(float(c) for c in rng.uniform(0.3, 0.7, size=2))
        edge = min(min(center), 1.0 - max(center))
        r_max = min(0.35, edge - 0.05 - stroke / size)
        radius = float(rng.uniform(0.15, max(0.15, r_max)))
        rotation = float(rng.uniform(0.0, 2.0 * np.pi))
        spec = ShapeSpec(kind, center, radius, stroke, rotation)
        image, mask = render_shape(spec, size)
        out.append((image, mask, spec))
    return out


# ---------------------------------------------------------------------------
# elastic pairs
# ---------------------------------------------------------------------------


def random_warp(shape, spec: ElasticWarpSpec, rng) -> FieldMap:
    """One draw of the control-grid displacement, upsampled to ``shape`` at pixel centres."""
    d = len(shape)
    ctrl = rng.normal(0.0, spec.std, size=(1, d) + (spec.control,) * d) if spec.std > 0 else np.zeros((1, d) + (spec.control,) * d)
    with no_grad():
        dense = grid_sample(Tensor(ctrl), identity_grid(shape)).data
    return FieldMap(dense)


def gen_elastic_pairs(mask, pairs_per_image: int, spec: ElasticWarpSpec = ElasticWarpSpec(), seed: int = 0, image=None) -> list:
    """Warp a binary mask (and optionally an image) by random fold-free elastic maps.

    The truth map sends target-frame points to source-frame points, so
    ``target = resample_image(source, truth)``; the mask target uses
    nearest-neighbour sampling.  Landmarks are ``spec.landmarks`` pixel
    centres drawn from the target foreground (all pixels if it is empty)
    with ``points_b = x`` and ``points_a = truth(x)``.

    Raises
    ------
    WarpGenerationError
        If no fold-free warp is found in ``spec.max_tries`` draws.
    """
    mask = np.asarray(mask, dtype=np.float64)
    shape = mask.shape[-2:] if mask.ndim >= 2 else mask.shape
    mask = mask.reshape((1, 1) + tuple(shape))
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must be binary")
    source = mask if image is None else np.asarray(image, dtype=np.float64).reshape(mask.shape)
    rng = np.random.default_rng(seed)
    grid = identity_grid(shape)
    out = []
    for _ in range(pairs_per_image):
        for _ in range(spec.max_tries):
            truth = random_warp(shape, spec, rng)
            if fold_fraction(truth, shape).fraction_negative == 0.0:
                break
        else:
            raise WarpGenerationError(f"no fold-free warp in {spec.max_tries} draws (std={spec.std})")
        with no_grad():
            target = resample_image(Tensor(source), truth).data
            warped_grid = truth(grid).data[0]
        target_mask = resample_nearest(mask, truth)
        flat_fg = np.flatnonzero(target_mask[0, 0])
        pool = flat_fg if flat_fg.size else np.arange(int(np.prod(shape)))
        pick = rng.choice(pool, size=spec.landmarks, replace=pool.size < spec.landmarks)
        d = len(shape)
        pts_b = grid[0].reshape(d, -1)[:, pick].T
        pts_a = warped_grid.reshape(d, -1)[:, pick].T
        out.append(ElasticPair(source.copy(), target, truth, LandmarkSet(pts_a, pts_b), mask.copy(), target_mask))
    return out
