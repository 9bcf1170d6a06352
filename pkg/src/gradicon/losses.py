"""Similarity measures, transformation regularizers and the training loss.

The symmetric loss evaluates a model once on the stacked batch
``[(A, B); (B, A)]``.  The stacked map therefore holds ``phi_AB`` in its
first half and ``phi_BA`` in its second half, and the inverse-consistency
terms compose each half with its partner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, as_tensor, concat, conv2d, no_grad
from .geometry import (
    BatchPermuted,
    JacobianProbe,
    Stacked,
    TransformMap,
    compose,
    identity_grid,
    jacobian_fd,
    resample_image,
)

__all__ = [
    "SimilarityConfig",
    "RegularizerConfig",
    "LossReport",
    "REGULARIZERS",
    "gaussian_kernel1d",
    "mse",
    "lncc",
    "dissimilarity",
    "sample_points",
    "icon_reg",
    "gradicon_reg",
    "bending_energy",
    "diffusion",
    "swap_halves",
    "total_loss",
    "correlation_identity_check",
    "h1_proxy",
]

REGULARIZERS = ("icon", "gradicon", "bending", "diffusion")


@dataclass(frozen=True)
class SimilarityConfig:
    kind: str = "lncc"
    lncc_sigma: float = 5.0
    lncc_eps: float = 1e-5

    def __post_init__(self):
        if self.kind not in ("mse", "lncc"):
            raise ValueError(f"unknown similarity {self.kind!r}; expected 'mse' or 'lncc'")
        if not (self.lncc_sigma > 0 and self.lncc_eps > 0):
            raise ValueError("lncc_sigma and lncc_eps must be positive")


@dataclass(frozen=True)
class RegularizerConfig:
    """Regularizer kind, weight and finite-difference step.

    Monte Carlo terms draw ``voxels // 2**d`` sample points.
    """

    kind: str = "gradicon"
    lam: float = 1.5
    dx: float = 1e-3

    def __post_init__(self):
        if self.kind not in REGULARIZERS:
            raise ValueError(f"unknown regularizer {self.kind!r}; expected one of {REGULARIZERS}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not self.dx > 0:
            raise ValueError("dx must be positive")

    def sample_count(self, grid_shape) -> int:
        return max(1, int(np.prod(grid_shape)) // (2 ** len(grid_shape)))


@dataclass
class LossReport:
    sim_ab: float
    sim_ba: float
    reg: float
    total: float
    lam: float = 0.0

    def row(self, iteration: int, fold_fraction: float | None = None) -> list:
        fold = "" if fold_fraction is None else repr(float(fold_fraction))
        return [iteration, repr(self.sim_ab), repr(self.sim_ba), repr(self.reg), repr(self.total), fold]


# ---------------------------------------------------------------------------
# similarity
# ---------------------------------------------------------------------------


def _check_same(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")


def mse(image_a, image_b) -> Tensor:
    a, b = as_tensor(image_a), as_tensor(image_b)
    _check_same(a, b)
    return (a - b).square().mean()


def gaussian_kernel1d(sigma: float, truncate: float = 3.0) -> np.ndarray:
    """Unit-sum Gaussian weights on ``[-ceil(truncate*sigma), ceil(truncate*sigma)]``."""
    radius = int(math.ceil(truncate * sigma))
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (k / sigma) ** 2)
    return w / w.sum()


def _window_mass(kern: np.ndarray, n: int) -> np.ndarray:
    """Total kernel weight falling inside ``[0, n)`` for each output position."""
    r = (kern.size - 1) // 2
    offsets = np.arange(n)[:, None] + np.arange(-r, r + 1)[None, :]
    return ((offsets >= 0) & (offsets < n)) @ kern


def _blur(x: Tensor, sigma: float) -> Tensor:
    """Separable Gaussian window average of (N, C, H, W).

    Windows hanging over the border are renormalized by their in-image
    weight, so every output is a weighted mean of image pixels only.
    """
    n, c, h, w = x.shape
    kern = gaussian_kernel1d(sigma)
    r = (kern.size - 1) // 2
    flat = x.reshape(n * c, 1, h, w)
    flat = conv2d(flat, Tensor(kern.reshape(1, 1, 1, -1)), pad=(0, r))
    flat = conv2d(flat, Tensor(kern.reshape(1, 1, -1, 1)), pad=(r, 0))
    mass = np.outer(_window_mass(kern, h), _window_mass(kern, w))
    return (flat * (1.0 / mass)).reshape(n, c, h, w)


def lncc(image_a, image_b, sigma: float = 5.0, eps: float = 1e-5) -> Tensor:
    """Mean Gaussian-windowed normalized cross-correlation of two (N, 1, H, W) images.

    Local moments use a unit-sum Gaussian truncated at 3 sigma; near the
    border the window is restricted to the image and renormalized.  Each
    pixel contributes ``cov / (sigma_a * sigma_b + eps)``; negative
    variances from roundoff are clipped to zero, so flat windows give 0.
    """
    a, b = as_tensor(image_a), as_tensor(image_b)
    _check_same(a, b)
    n = a.shape[0]
    moments = _blur(concat([a, b, a * a, b * b, a * b], axis=0), sigma)
    mu_a, mu_b = moments[:n], moments[n : 2 * n]
    e_aa, e_bb, e_ab = moments[2 * n : 3 * n], moments[3 * n : 4 * n], moments[4 * n :]
    var_a = (e_aa - mu_a * mu_a).clip(0.0)
    var_b = (e_bb - mu_b * mu_b).clip(0.0)
    cov = e_ab - mu_a * mu_b
    return (cov / ((var_a * var_b).sqrt() + eps)).mean()


def dissimilarity(image_a, image_b, cfg: SimilarityConfig) -> Tensor:
    if cfg.kind == "mse":
        return mse(image_a, image_b)
    return 1.0 - lncc(image_a, image_b, cfg.lncc_sigma, cfg.lncc_eps)


# ---------------------------------------------------------------------------
# regularizers
# ---------------------------------------------------------------------------


def sample_points(batch: int, grid_shape, count: int, margin: float, rng) -> np.ndarray:
    """Uniform points in ``[margin, 1 - margin]^d`` shared by every batch item."""
    d = len(grid_shape)
    pts = rng.uniform(margin, 1.0 - margin, size=(d, count))
    return np.broadcast_to(pts[None], (batch, d, count)).copy()


def icon_reg(phi_ab: TransformMap, phi_ba: TransformMap, points) -> Tensor:
    """Mean of ``|phi_ab(phi_ba(x)) - x|^2`` over the sample points."""
    points = as_tensor(points)
    diff = phi_ab(phi_ba(points)) - points
    return diff.square().sum(axis=1).mean()


def gradicon_reg(phi_ab: TransformMap, phi_ba: TransformMap, points, dx: float = 1e-3) -> Tensor:
    """Mean squared Frobenius distance of the FD Jacobian of ``phi_ab o phi_ba`` to I."""
    points = as_tensor(points)
    jac = jacobian_fd(compose(phi_ab, phi_ba), points, JacobianProbe(dx))
    d = points.shape[1]
    eye = np.eye(d).reshape((1, d, d) + (1,) * (jac.ndim - 3))
    return (jac - eye).square().sum(axis=(1, 2)).mean()


def _interior(x: Tensor, spatial: int, offsets: dict) -> Tensor:
    """Slice the interior ``1 .. n-2`` of each spatial axis, shifted per ``offsets``."""
    index = [slice(None), slice(None)]
    for k in range(spatial):
        n = x.shape[2 + k]
        o = offsets.get(k, 0)
        index.append(slice(1 + o, n - 1 + o))
    return x[tuple(index)]


def _spacing(displacement: Tensor) -> list:
    return [1.0 / n for n in displacement.shape[2:]]


def diffusion(displacement) -> Tensor:
    """Mean over interior grid points of ``sum_ij (d_j u_i)^2`` (central differences)."""
    u = as_tensor(displacement)
    spatial = u.ndim - 2
    if min(u.shape[2:]) < 3:
        raise ValueError("diffusion needs at least 3 grid points per axis")
    h = _spacing(u)
    total = None
    for j in range(spatial):
        grad = (_interior(u, spatial, {j: 1}) - _interior(u, spatial, {j: -1})) * (1.0 / (2 * h[j]))
        term = grad.square().sum(axis=1)
        total = term if total is None else total + term
    return total.mean()


def bending_energy(displacement) -> Tensor:
    """Mean over interior grid points of the squared Frobenius norm of each component's Hessian."""
    u = as_tensor(displacement)
    spatial = u.ndim - 2
    if min(u.shape[2:]) < 3:
        raise ValueError("bending energy needs at least 3 grid points per axis")
    h = _spacing(u)
    centre = _interior(u, spatial, {})
    total = None
    for j in range(spatial):
        for k in range(spatial):
            if j == k:
                sec = (_interior(u, spatial, {j: 1}) - 2.0 * centre + _interior(u, spatial, {j: -1})) * (
                    1.0 / h[j] ** 2
                )
            else:
                sec = (
                    _interior(u, spatial, {j: 1, k: 1})
                    - _interior(u, spatial, {j: 1, k: -1})
                    - _interior(u, spatial, {j: -1, k: 1})
                    + _interior(u, spatial, {j: -1, k: -1})
                ) * (1.0 / (4 * h[j] * h[k]))
            term = sec.square().sum(axis=1)
            total = term if total is None else total + term
    return total.mean()


def swap_halves(batch: int) -> np.ndarray:
    half = batch // 2
    return np.concatenate([np.arange(half, batch), np.arange(half)])


def _stacked_map(phi, half: int) -> TransformMap:
    if isinstance(phi, (tuple, list)):
        return Stacked(phi, [half, half])
    return phi


def total_loss(
    image_a,
    image_b,
    phi,
    sim: SimilarityConfig,
    reg: RegularizerConfig,
    rng=None,
    points=None,
):
    """Symmetric registration loss ``sim_ab + sim_ba + lam * reg``.

    Parameters
    ----------
    image_a, image_b : (N, 1, *S) images.
    phi : TransformMap or (TransformMap, TransformMap)
        Either the stacked map for the batch ``[(A, B); (B, A)]`` of size 2N or
        the separate pair ``(phi_ab, phi_ba)``.
    rng : numpy Generator used to draw Monte Carlo sample points when
        ``points`` is not given.

    Returns
    -------
    (Tensor, LossReport)
        The scalar loss node and the float breakdown.  The inverse
        consistency terms average ``phi_ab o phi_ba`` and ``phi_ba o phi_ab``
        over the same sample points, so swapping ``A`` and ``B`` leaves the
        total unchanged.
    """
    a, b = as_tensor(image_a), as_tensor(image_b)
    _check_same(a, b)
    n = a.shape[0]
    shape = a.shape[2:]
    phi = _stacked_map(phi, n)
    warped = resample_image(concat([a, b], axis=0), phi)
    sim_ab = dissimilarity(warped[:n], b, sim)
    sim_ba = dissimilarity(warped[n:], a, sim)

    if reg.kind in ("icon", "gradicon"):
        if points is None:
            rng = np.random.default_rng(0) if rng is None else rng
            points = sample_points(2 * n, shape, reg.sample_count(shape), reg.dx, rng)
        partner = BatchPermuted(phi, swap_halves(2 * n))
        if reg.kind == "icon":
            reg_value = icon_reg(phi, partner, points)
        else:
            reg_value = gradicon_reg(phi, partner, points, reg.dx)
    else:
        grid = identity_grid(shape, 2 * n)
        disp = phi(grid) - grid
        reg_value = bending_energy(disp) if reg.kind == "bending" else diffusion(disp)

    total = sim_ab + sim_ba + reg.lam * reg_value
    report = LossReport(sim_ab.item(), sim_ba.item(), reg_value.item(), total.item(), reg.lam)
    return total, report


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def correlation_identity_check(psi, delta: float = 1.0, axis: int = 0):
    """Both sides of the periodic-shift expansion of ``sum |psi(x+delta) - psi(x)|^2 / delta^2``.

    Returns ``(lhs, rhs, |lhs - rhs|)`` where the right-hand side is
    ``2 |psi|^2 / delta^2 * (1 - <psi, psi(. + delta)> / |psi|^2)``.
    """
    psi = np.asarray(psi, dtype=np.float64)
    norm2 = float(np.sum(psi * psi))
    if norm2 == 0.0:
        raise ValueError("psi has zero norm; the normalized correlation is undefined")
    shifted = np.roll(psi, -1, axis=axis)
    lhs = float(np.sum((shifted - psi) ** 2)) / delta**2
    inner = float(np.sum(psi * shifted))
    rhs = 2.0 * norm2 / delta**2 * (1.0 - inner / norm2)
    return lhs, rhs, abs(lhs - rhs)


@dataclass
class H1Proxy:
    value: float
    excluded: int
    samples: int


def h1_proxy(phi_ab: TransformMap, phi_ba: TransformMap, points, dx: float = 1e-3, full_output: bool = False):
    """Mean of ``|J_ab^{-1} sqrt(det J_ab)|_F^2 + |J_ba^{-1}|_F^2`` at the sample points.

    Jacobians come from forward differences.  Samples with ``|det| <= 1e-8``
    in either map are excluded; more than 10% exclusions raise.
    ``sqrt(det)`` is taken of ``|det|``.  Diagnostic only, no gradient.
    """
    with no_grad():
        j_ab = jacobian_fd(phi_ab, points, JacobianProbe(dx)).data
        j_ba = jacobian_fd(phi_ba, points, JacobianProbe(dx)).data
    n, d = j_ab.shape[:2]
    a = np.moveaxis(j_ab.reshape(n, d, d, -1), -1, 1).reshape(-1, d, d)
    b = np.moveaxis(j_ba.reshape(n, d, d, -1), -1, 1).reshape(-1, d, d)
    det_a = np.linalg.det(a)
    det_b = np.linalg.det(b)
    ok = (np.abs(det_a) > 1e-8) & (np.abs(det_b) > 1e-8)
    excluded = int((~ok).sum())
    if excluded > 0.1 * ok.size:
        raise FloatingPointError(f"{excluded} of {ok.size} sample Jacobians are singular")
    inv_a = np.linalg.inv(a[ok])
    inv_b = np.linalg.inv(b[ok])
    first = np.sum(inv_a**2, axis=(1, 2)) * np.abs(det_a[ok])
    second = np.sum(inv_b**2, axis=(1, 2))
    value = float(np.mean(first + second))
    if full_output:
        return H1Proxy(value, excluded, int(ok.size))
    return value
