"""Estimate of the inverse-consistency noise carried by a predicted map pair.

Given network maps ``phi_ab``, ``phi_ba`` the estimator searches for the
exactly inverse-consistent pair closest to them in L2: the forward map is a
free displacement field ``V`` and the backward map is its numerical inverse.
The residual ``n = U_ab - V`` is the noise; the ratio of its gradient norm
to its norm tells whether the noise lives at high spatial frequencies.
The estimator is biased (the split of the residual between the two
directions depends on the objective) and is not claimed to be anything
more than a first natural choice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..autodiff import Tensor, backward, grid_sample, no_grad
from ..geometry import TransformMap, export_field, identity_grid

__all__ = ["NoiseEstimate", "InverseNotConverged", "choose_relax", "fixed_point_inverse", "noise_hypothesis", "rms_and_gradient"]


class InverseNotConverged(RuntimeError):
    pass


@dataclass(frozen=True)
class NoiseEstimate:
    """RMS noise norm, RMS gradient norm (per normalized length) and their ratio.

    ``degenerate`` is set when the noise vanishes; ``ratio`` is then
    ``None`` rather than NaN.  ``ratio_per_pixel`` measures the gradient
    per pixel step instead (``ratio / extent`` on a square grid).
    """

    n_norm: float
    grad_n_norm: float
    ratio: float | None
    degenerate: bool
    inverse_error: float
    ratio_per_pixel: float | None = None

    def __post_init__(self):
        if self.n_norm < 0 or self.grad_n_norm < 0:
            raise ValueError("norms must be non-negative")


def fixed_point_inverse(disp, iters: int = 50, relax: float = 1.0):
    """Displacement ``W`` of the inverse of ``x -> x + V(x)`` at pixel centres.

    Iterates ``W <- (1 - relax) W - relax V(x + W)`` from ``W = -V(x)``;
    differentiable in ``V``.  The plain iteration (``relax = 1``) only
    contracts where ``|grad V| < 1``; strong local expansion needs a
    smaller ``relax``.  Returns ``(W, max_residual)`` where the residual is
    ``|W(x) + V(x + W(x))|`` over the grid.
    """
    if not 0.0 < relax <= 1.0:
        raise ValueError(f"relax must lie in (0, 1], got {relax}")
    disp = disp if isinstance(disp, Tensor) else Tensor(np.asarray(disp, dtype=np.float64))
    shape = disp.shape[2:]
    grid = identity_grid(shape, disp.shape[0])
    w = -grid_sample(disp, grid)
    for _ in range(iters):
        step = -grid_sample(disp, grid + w)
        w = step if relax == 1.0 else w * (1.0 - relax) + step * relax
    with no_grad():
        resid = w.data + grid_sample(disp, grid + w.data).data
    return w, float(np.max(np.sqrt(np.sum(resid * resid, axis=1))))


RELAX_LADDER = (1.0, 0.5, 0.25, 0.125)


def choose_relax(disp, iters: int, tol: float) -> float:
    """Largest factor on ``RELAX_LADDER`` whose inverse of ``disp`` converges in ``iters / relax`` steps."""
    with no_grad():
        for relax in RELAX_LADDER:
            _, err = fixed_point_inverse(disp, int(math.ceil(iters / relax)), relax)
            if err <= tol:
                return relax
    raise InverseNotConverged(f"fixed-point inverse did not reach {tol:g} for any relaxation in {RELAX_LADDER}")


def rms_and_gradient(field: np.ndarray) -> tuple:
    """RMS magnitude and RMS central-difference gradient of a (1, d, *S) field.

    Both are taken over interior points ``1 .. n-2`` of every axis, with
    derivatives per normalized length (grid spacing ``1/n``).
    """
    field = np.asarray(field, dtype=np.float64)
    shape = field.shape[2:]
    core = (slice(None), slice(None)) + tuple(slice(1, n - 1) for n in shape)
    value = field[core]
    grad_sq = np.zeros(value.shape[:1] + value.shape[2:])
    for k, n in enumerate(shape):
        fwd = [slice(None), slice(None)] + [slice(1, m - 1) for m in shape]
        bwd = list(fwd)
        fwd[2 + k] = slice(2, n)
        bwd[2 + k] = slice(0, n - 2)
        diff = (field[tuple(fwd)] - field[tuple(bwd)]) * (n / 2.0)
        grad_sq += np.sum(diff * diff, axis=1)
    n_norm = float(np.sqrt(np.mean(np.sum(value * value, axis=1))))
    g_norm = float(np.sqrt(np.mean(grad_sq)))
    return n_norm, g_norm


def _inverse(disp, inverse_iters: int, relax: float, tol: float):
    """Fixed-point inverse, stepping down ``RELAX_LADDER`` from ``relax`` until it converges."""
    while True:
        w, err = fixed_point_inverse(disp, int(math.ceil(inverse_iters / relax)), relax)
        if err <= tol or relax <= RELAX_LADDER[-1]:
            return w, err, relax
        relax *= 0.5


def noise_hypothesis(
    phi_ab: TransformMap,
    phi_ba: TransformMap,
    grid_shape,
    iters: int = 100,
    step: float = 0.25,
    inverse_iters: int = 50,
    inverse_tol: float = 1e-4,
    degenerate_tol: float = 1e-12,
    max_halvings: int = 20,
) -> NoiseEstimate:
    """Closest inverse-consistent pair by gradient descent; noise statistics of the residual.

    Minimizes ``sum |V - U_ab|^2 + sum |inv(V) - U_ba|^2`` over the free
    field ``V`` (initialized at ``U_ab``).  Each pixel term has curvature
    close to 4 where the map is mild, so ``step = 0.25`` is tried first; a
    step is halved while it raises the objective or leaves ``V`` without a
    convergent inverse (strong compression makes the inverse very sensitive
    to ``V``), and allowed to grow back after each accepted step.  Descent
    stops early once no step within ``max_halvings`` halvings helps.

    Raises
    ------
    InverseNotConverged
        If the prediction ``U_ab`` itself has no convergent fixed-point inverse.
    """
    shape = tuple(grid_shape)
    u_ab = export_field(phi_ab, shape)
    u_ba = export_field(phi_ba, shape)
    relax = choose_relax(u_ab, inverse_iters, inverse_tol)
    v = Tensor(u_ab.copy(), requires_grad=True)
    t = step
    for _ in range(iters):
        v.zero_grad()
        w, err, relax = _inverse(v, inverse_iters, relax, inverse_tol)
        loss = (v - u_ab).square().sum() + (w - u_ba).square().sum()
        backward(loss)
        grad, current = v.grad, loss.item()
        for _ in range(max_halvings):
            cand = v.data - t * grad
            with no_grad():
                wc, err_c, relax_c = _inverse(cand, inverse_iters, relax, inverse_tol)
                value = float(np.sum((cand - u_ab) ** 2) + np.sum((wc.data - u_ba) ** 2))
            if err_c <= inverse_tol and value < current:
                v.data, relax = cand, relax_c
                t = min(step, 2.0 * t)
                break
            t *= 0.5
        else:
            break
    with no_grad():
        _, err, _ = _inverse(v.data, inverse_iters, relax, inverse_tol)
    noise = u_ab - v.data
    n_norm, g_norm = rms_and_gradient(noise)
    if n_norm <= degenerate_tol:
        return NoiseEstimate(n_norm, g_norm, None, True, err, None)
    ratio = g_norm / n_norm
    return NoiseEstimate(n_norm, g_norm, ratio, False, err, ratio / float(np.mean(shape)))
