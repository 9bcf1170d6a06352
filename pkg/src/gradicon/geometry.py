"""Transform maps on the unit domain, backed by displacement fields.

A field map evaluates ``x + interp(D, clip(x, [0, 1]^d))``, so it is defined
on all of R^d even though ``D`` only lives on the grid.  Maps compose
lazily: nothing is resampled until a map is evaluated at concrete points,
which keeps compositions exact and differentiable through every part.

Shapes are always batched: images ``(N, 1, *S)``, fields ``(N, d, *S)`` and
point sets ``(N, d, *P)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, _make, as_tensor, concat, grid_sample, no_grad, stack

__all__ = [
    "TransformMap",
    "Identity",
    "FieldMap",
    "AffineMap",
    "Composed",
    "Stacked",
    "BatchPermuted",
    "JacobianProbe",
    "FoldReport",
    "identity_grid",
    "eval_map",
    "compose",
    "jacobian_fd",
    "jacobian_determinant",
    "fold_fraction",
    "resample_image",
    "resample_nearest",
    "export_field",
]


class TransformMap:
    """A map R^d -> R^d that can be evaluated at batched point tensors."""

    def __call__(self, points) -> Tensor:
        raise NotImplementedError


class Identity(TransformMap):
    def __call__(self, points) -> Tensor:
        return as_tensor(points)

    def __repr__(self) -> str:
        return "Identity()"


class FieldMap(TransformMap):
    """``x + interp(D, clip(x))`` for a displacement grid ``D`` of shape (N, d, *S)."""

    def __init__(self, displacement):
        self.displacement = as_tensor(displacement)
        d = self.displacement.shape[1]
        if self.displacement.ndim != d + 2:
            raise ValueError(
                f"displacement of shape {self.displacement.shape} must be (N, d, *S) with d spatial axes"
            )

    @property
    def grid_shape(self) -> tuple:
        return self.displacement.shape[2:]

    def __call__(self, points) -> Tensor:
        points = as_tensor(points)
        return points + grid_sample(self.displacement, points)

    def __repr__(self) -> str:
        return f"FieldMap(shape={self.displacement.shape})"


class AffineMap(TransformMap):
    """``x -> A x + b`` with ``matrix = [A | b]`` of shape (d, d+1) or (N, d, d+1)."""

    def __init__(self, matrix):
        self.matrix = as_tensor(matrix)

    def __call__(self, points) -> Tensor:
        points = as_tensor(points)
        m = self.matrix.data
        d = m.shape[-2]
        pts = points.data.reshape(points.shape[0], d, -1)
        if m.ndim == 2:
            m = m[None]
        n = points.shape[0]
        lin = np.broadcast_to(m[:, :, :d], (n, d, d))
        off = np.broadcast_to(m[:, :, d:], (n, d, 1))
        out = np.einsum("nij,njp->nip", lin, pts) + off
        shape = points.shape
        # the matrix is a constant; only the points carry gradient
        return _make(
            out.reshape(shape),
            (points,),
            lambda g: (np.einsum("nij,nip->njp", lin, g.reshape(n, d, -1)).reshape(shape),),
        )

    def __repr__(self) -> str:
        return f"AffineMap({self.matrix.data.tolist()})"


class Composed(TransformMap):
    """``outer(inner(x))``."""

    def __init__(self, outer: TransformMap, inner: TransformMap):
        self.outer = outer
        self.inner = inner

    def __call__(self, points) -> Tensor:
        return self.outer(self.inner(points))

    def __repr__(self) -> str:
        return f"Composed({self.outer!r}, {self.inner!r})"


class Stacked(TransformMap):
    """Concatenate maps along the batch axis; part ``k`` sees its own slice of points."""

    def __init__(self, parts, sizes):
        self.parts = list(parts)
        self.sizes = list(sizes)

    def __call__(self, points) -> Tensor:
        points = as_tensor(points)
        outs, start = [], 0
        for part, size in zip(self.parts, self.sizes):
            outs.append(part(points[start : start + size]))
            start += size
        return concat(outs, axis=0)


class BatchPermuted(TransformMap):
    """Evaluate batch item ``perm[k]`` of ``base`` on point set ``k``.

    ``perm`` must be an involution (for example swapping two halves).
    """

    def __init__(self, base: TransformMap, perm):
        self.base = base
        self.perm = np.asarray(perm, dtype=np.int64)
        if not np.array_equal(self.perm[self.perm], np.arange(len(self.perm))):
            raise ValueError("BatchPermuted needs an involutive permutation")

    def __call__(self, points) -> Tensor:
        points = as_tensor(points)
        return self.base(points[self.perm])[self.perm]


def identity_grid(shape, batch: int = 1) -> np.ndarray:
    """Pixel-centre coordinates ``(i + 0.5) / n`` as an array of shape (batch, d, *shape)."""
    axes = [(np.arange(n) + 0.5) / n for n in shape]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=0)
    return np.broadcast_to(grid[None], (batch,) + grid.shape).copy()


def eval_map(phi: TransformMap, points) -> Tensor:
    return phi(points)


def compose(outer: TransformMap, inner: TransformMap) -> TransformMap:
    """Lazy composition evaluating as ``outer(inner(x))``."""
    if isinstance(outer, Identity):
        return inner
    if isinstance(inner, Identity):
        return outer
    return Composed(outer, inner)


@dataclass(frozen=True)
class JacobianProbe:
    """One-sided finite-difference step for map Jacobians."""

    dx: float = 1e-3

    def __post_init__(self):
        if not self.dx > 0:
            raise ValueError("JacobianProbe.dx must be positive")


def jacobian_fd(phi: TransformMap, points, probe: JacobianProbe | float = JacobianProbe()) -> Tensor:
    """Forward-difference Jacobian ``J[:, i, j] = (phi(x + dx e_j) - phi(x))_i / dx``.

    Evaluated as ``I + (u(x + dx e_j) - u(x)) / dx`` with ``u = phi - id``.

    All ``d + 1`` probe sets are pushed through the map in one evaluation.

    Returns
    -------
    Tensor of shape (N, d, d, *P).
    """
    dx = probe.dx if isinstance(probe, JacobianProbe) else float(probe)
    if not dx > 0:
        raise ValueError("finite-difference step must be positive")
    points = as_tensor(points)
    n, d = points.shape[:2]
    pshape = points.shape[2:]
    flat = points.reshape(n, d, -1)
    m = flat.shape[-1]
    shifted = [flat]
    for j in range(d):
        e = np.zeros((1, d, 1))
        e[0, j, 0] = dx
        shifted.append(flat + e)
    probes = concat(shifted, axis=2)
    # difference displacements rather than positions: exact for the identity
    # and free of the cancellation in (x + dx) - x
    disp = phi(probes) - probes
    base = disp[:, :, :m]
    cols = []
    for j in range(d):
        e = np.zeros((1, d, 1))
        e[0, j, 0] = 1.0
        cols.append((disp[:, :, (j + 1) * m : (j + 2) * m] - base) * (1.0 / dx) + e)
    jac = stack(cols, axis=2)  # (n, d_out, d_in, m)
    return jac.reshape((n, d, d) + pshape)


def jacobian_determinant(jac: np.ndarray) -> np.ndarray:
    """Determinants of an (N, d, d, *P) stack of Jacobians."""
    jac = np.asarray(jac)
    d = jac.shape[1]
    if d == 1:
        return jac[:, 0, 0]
    if d == 2:
        return jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
    moved = np.moveaxis(np.moveaxis(jac, 1, -1), 1, -1)
    return np.linalg.det(moved)


@dataclass
class FoldReport:
    """Fraction of probed grid points whose FD Jacobian determinant is <= 0."""

    fraction_negative: float
    grid_shape: tuple
    sample_margin: float
    per_item: tuple = field(default_factory=tuple)

    @property
    def percent(self) -> float:
        return 100.0 * self.fraction_negative


def fold_fraction(
    phi: TransformMap,
    grid_shape,
    margin: float | None = None,
    probe: JacobianProbe = JacobianProbe(),
    batch: int = 1,
) -> FoldReport:
    """Evaluate det(J) at every pixel centre at least ``margin`` inside the domain.

    The default margin is two pixels; points closer to the boundary see the
    clipped interpolation and carry no information about folding.
    """
    grid_shape = tuple(int(s) for s in grid_shape)
    if margin is None:
        margin = 2.0 / min(grid_shape)
    if margin < probe.dx:
        raise ValueError("fold margin must be at least the finite-difference step")
    axes = []
    for n in grid_shape:
        c = (np.arange(n) + 0.5) / n
        c = c[(c >= margin) & (c <= 1.0 - margin)]
        if c.size == 0:
            raise ValueError("no grid points left inside the fold margin")
        axes.append(c)
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=0).reshape(len(grid_shape), -1)
    pts = np.broadcast_to(pts[None], (batch,) + pts.shape).copy()
    with no_grad():
        det = jacobian_determinant(jacobian_fd(phi, pts, probe).data)
    folded = det <= 0.0
    per_item = tuple(float(v) for v in folded.mean(axis=-1))
    return FoldReport(float(folded.mean()), grid_shape, float(margin), per_item)


def resample_image(image, phi: TransformMap) -> Tensor:
    """``(I o phi)`` sampled at the pixel centres of ``image``."""
    image = as_tensor(image)
    grid = identity_grid(image.shape[2:], image.shape[0])
    return grid_sample(image, phi(grid))


def resample_nearest(image, phi: TransformMap) -> np.ndarray:
    """Nearest-neighbour ``I o phi`` for label images; not differentiable."""
    image = np.asarray(as_tensor(image).data)
    shape = image.shape[2:]
    with no_grad():
        pts = phi(identity_grid(shape, image.shape[0])).data
    idx = []
    for k, n in enumerate(shape):
        u = np.clip(pts[:, k], 0.0, 1.0) * n - 0.5
        idx.append(np.clip(np.floor(u + 0.5), 0, n - 1).astype(np.int64))
    out = np.empty_like(image)
    for b in range(image.shape[0]):
        sel = tuple(i[b] for i in idx)
        for c in range(image.shape[1]):
            out[b, c] = image[b, c][sel]
    return out


def export_field(phi: TransformMap, grid_shape, batch: int = 1) -> np.ndarray:
    """Dense displacement ``phi(x) - x`` at pixel centres, shape (batch, d, *grid_shape)."""
    grid = identity_grid(grid_shape, batch)
    with no_grad():
        return phi(grid).data - grid
