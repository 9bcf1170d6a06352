"""Dense float64 tensors with a reverse-mode differentiation tape.

Every node records its parents together with a closure mapping the output
gradient to per-parent gradients.  ``backward`` walks the graph in reverse
topological order and accumulates into the ``grad`` of every leaf that
requires a gradient.  Intermediate gradients are kept in a local table and
discarded after the pass.

Arrays follow the NCHW-style convention used throughout the package: a
leading batch axis, then channels, then spatial axes.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "as_tensor",
    "elementwise",
    "no_grad",
    "is_grad_enabled",
    "concat",
    "stack",
    "conv2d",
    "avg_pool2",
    "upsample2",
    "leaky_relu",
    "grid_sample",
    "backward",
    "check_gradients",
    "check_gradients_report",
    "GradCheckReport",
    "check_directional",
    "check_finite",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised by :func:`check_finite` when a tensor holds NaN or Inf."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A float64 array that optionally participates in the tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    # -- basic protocol -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", other, self)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("sub", other, self)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", other, self)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __rtruediv__(self, other):
        return elementwise("div", other, self)

    def __neg__(self):
        return elementwise("neg", self)

    def __getitem__(self, index):
        return _getitem(self, index)

    def square(self):
        return elementwise("square", self)

    def sqrt(self):
        return elementwise("sqrt", self)

    def clip(self, lo=-np.inf, hi=np.inf):
        return elementwise("clipval", self, lo=lo, hi=hi)

    def sum(self, axis=None, keepdims: bool = False):
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if np.isscalar(axis) else tuple(axis)
            count = int(np.prod([self.shape[a] for a in axes]))
        return _sum(self, axis, keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and not np.isscalar(shape[0]):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and not np.isscalar(axes[0]):
            axes = tuple(axes[0])
        return _transpose(self, axes)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as a node; record the closure only if a parent needs it."""
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_binary_shapes(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

_UNARY = {"neg", "square", "sqrt", "clipval"}
_BINARY = {"add", "sub", "mul", "div"}


def elementwise(kind: str, a, b=None, *, lo=-np.inf, hi=np.inf) -> Tensor:
    """Apply a pointwise operation and register its backward closure.

    Binary kinds broadcast with numpy rules, which covers the equal-shape and
    scalar-operand cases.  ``div`` refuses zero denominators instead of
    producing Inf.  ``sqrt`` uses a zero subgradient at 0 and ``clipval``
    passes gradient only where the input lies inside ``[lo, hi]``.
    """
    a = as_tensor(a)
    if kind in _BINARY:
        if b is None:
            raise ShapeError(f"{kind} needs two operands")
        b = as_tensor(b)
        _check_binary_shapes(a, b)
        sa, sb = a.shape, b.shape
        if kind == "add":
            data = a.data + b.data
            fn = lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
        elif kind == "sub":
            data = a.data - b.data
            fn = lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
        elif kind == "mul":
            ad, bd = a.data, b.data
            data = ad * bd
            fn = lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb))
        else:
            if np.any(b.data == 0.0):
                raise ZeroDivisionError("division by a zero-valued denominator")
            ad, bd = a.data, b.data
            data = ad / bd
            fn = lambda g: (
                _unbroadcast(g / bd, sa),
                _unbroadcast(-g * data / bd, sb),
            )
        return _make(data, (a, b), fn)

    if kind not in _UNARY:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    if b is not None:
        raise ShapeError(f"{kind} takes a single operand")
    ad = a.data
    if kind == "neg":
        return _make(-ad, (a,), lambda g: (-g,))
    if kind == "square":
        return _make(ad * ad, (a,), lambda g: (2.0 * ad * g,))
    if kind == "sqrt":
        if np.any(ad < 0):
            raise FloatingPointError("sqrt of a negative value")
        data = np.sqrt(ad)

        def fn(g):
            scale = np.zeros_like(data)
            np.divide(0.5, data, out=scale, where=data > 0)
            return (g * scale,)

        return _make(data, (a,), fn)
    # clipval
    data = np.clip(ad, lo, hi)
    inside = (ad >= lo) & (ad <= hi)
    return _make(data, (a,), lambda g: (g * inside,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    xd = x.data
    pos = xd > 0
    data = np.where(pos, xd, slope * xd)
    return _make(data, (x,), lambda g: (np.where(pos, g, slope * g),))


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def _sum(x: Tensor, axis, keepdims: bool) -> Tensor:
    shape = x.shape
    data = np.sum(x.data, axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(data, dtype=np.float64), (x,), fn)


def _reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def _transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def _getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    basic = _is_basic_index(index)

    def fn(g):
        full = np.zeros(shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(x.data[index]), (x,), fn)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(data, tensors, lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _make(
        data,
        tensors,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
    )


# ---------------------------------------------------------------------------
# convolution and resampling
# ---------------------------------------------------------------------------


def _zero_pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    out = np.zeros(x.shape[:-2] + (x.shape[-2] + 2 * ph, x.shape[-1] + 2 * pw))
    out[..., ph : ph + x.shape[-2], pw : pw + x.shape[-1]] = x
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, s: int):
    """Channel-first patch matrix (n, c*kh*kw, ho*wo) of an already padded input."""
    n, c = xp.shape[:2]
    ho = (xp.shape[2] - kh) // s + 1
    wo = (xp.shape[3] - kw) // s + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)
    return cols, ho, wo


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad=0) -> Tensor:
    """2D cross-correlation with zero padding.

    Parameters
    ----------
    x : Tensor, shape (N, C_in, H, W) or (C_in, H, W)
    kernel : Tensor, shape (C_out, C_in, kh, kw)
    stride : int
        Same stride for both spatial axes.
    pad : int or (int, int)
        Symmetric zero padding, either shared or per spatial axis.

    Returns
    -------
    Tensor of shape (N, C_out, H_out, W_out), or (C_out, H_out, W_out) when
    the input had no batch axis.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    squeeze = x.ndim == 3
    if squeeze:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIHW kernel, got {x.shape}, {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"kernel expects {kcin} input channels, input has {cin}")
    ph, pw = (pad, pad) if np.isscalar(pad) else (int(pad[0]), int(pad[1]))
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ShapeError("kernel larger than padded input")
    s = int(stride)
    padded = ph or pw
    xp = _zero_pad(x.data, ph, pw) if padded else x.data
    cols, ho, wo = _im2col(xp, kh, kw, s)
    wmat = kernel.data.reshape(cout, -1)
    out = np.matmul(wmat, cols).reshape(n, cout, ho, wo)

    def fn(g):
        gflat = g.reshape(n, cout, ho * wo)
        gk = np.matmul(gflat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        if s == 1 and ph < kh and pw < kw:
            # input gradient of a stride-1 correlation is a correlation of g with the flipped kernel
            gp = _zero_pad(g, kh - 1 - ph, kw - 1 - pw)
            gcols, _, _ = _im2col(gp, kh, kw, 1)
            flipped = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
            return np.matmul(flipped, gcols).reshape(n, cin, h, w), gk
        gcols = np.matmul(wmat.T, gflat).reshape(n, cin, kh, kw, ho, wo)
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += gcols[:, :, i, j]
        gx = gxp[:, :, ph : ph + h, pw : pw + w] if padded else gxp
        return gx, gk

    res = _make(np.ascontiguousarray(out), (x, kernel), fn)
    return res.reshape(res.shape[1:]) if squeeze else res


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 mean pooling with stride 2 over the last two axes.

    Odd extents drop the trailing row/column.
    """
    x = as_tensor(x)
    shape = x.shape
    h, w = shape[-2] // 2, shape[-1] // 2
    if h == 0 or w == 0:
        raise ShapeError(f"cannot pool spatial shape {shape[-2:]}")
    core = x.data[..., : 2 * h, : 2 * w]
    data = core.reshape(shape[:-2] + (h, 2, w, 2)).mean(axis=(-3, -1))

    def fn(g):
        full = np.zeros(shape)
        up = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25
        full[..., : 2 * h, : 2 * w] = up
        return (full,)

    return _make(data, (x,), fn)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the last two axes."""
    x = as_tensor(x)
    shape = x.shape
    data = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)

    def fn(g):
        h, w = shape[-2], shape[-1]
        return (g.reshape(shape[:-2] + (h, 2, w, 2)).sum(axis=(-3, -1)),)

    return _make(data, (x,), fn)


def grid_sample(field: Tensor, points) -> Tensor:
    """Multilinear interpolation of ``field`` at normalized coordinates.

    Parameters
    ----------
    field : Tensor, shape (N, C, n_0, ..., n_{d-1})
        Grid value ``i`` along axis ``k`` lives at ``(i + 0.5) / n_k``.
    points : Tensor or array, shape (N, d, *P)
        Component ``k`` addresses spatial axis ``k``.  Coordinates are clipped
        to ``[0, 1]``; between the outermost pixel centre and the domain edge
        the boundary value is held constant.

    Returns
    -------
    Tensor of shape (N, C, *P).  The gradient w.r.t. ``points`` is the
    piecewise-linear derivative of the interpolant and vanishes wherever the
    coordinate was clamped.
    """
    field, points = as_tensor(field), as_tensor(points)
    fshape = field.shape
    n, c = fshape[0], fshape[1]
    sizes = fshape[2:]
    d = len(sizes)
    if points.ndim < 2 or points.shape[1] != d:
        raise ShapeError(f"points shape {points.shape} incompatible with {d}-d field")
    pn = points.shape[0]
    if pn != n and n != 1 and pn != 1:
        raise ShapeError(f"batch mismatch: field {n}, points {pn}")
    nb = max(n, pn)
    pshape = points.shape[2:]
    pts = points.data.reshape(pn, d, -1)
    if pn != nb:
        pts = np.broadcast_to(pts, (nb,) + pts.shape[1:])
    npts = pts.shape[-1]

    lo_idx, frac, live = [], [], []
    for k, nk in enumerate(sizes):
        u = np.clip(pts[:, k], 0.0, 1.0) * nk - 0.5
        inside = (u > 0.0) & (u < nk - 1) & (pts[:, k] >= 0.0) & (pts[:, k] <= 1.0)
        u = np.clip(u, 0.0, nk - 1)
        i0 = np.minimum(np.floor(u), max(nk - 2, 0)).astype(np.int64)
        lo_idx.append(i0)
        frac.append(u - i0)
        live.append(inside * float(nk))

    strides = np.ones(d, dtype=np.int64)
    for k in range(d - 2, -1, -1):
        strides[k] = strides[k + 1] * sizes[k + 1]
    total = int(np.prod(sizes))
    fflat = field.data.reshape(n, c, total)
    batch_ix = np.arange(nb)[:, None] if n == nb else np.zeros((nb, 1), dtype=np.int64)

    corners = []
    out = np.zeros((nb, c, npts))
    for bits in range(1 << d):
        flat = np.zeros((nb, npts), dtype=np.int64)
        weight = np.ones((nb, npts))
        for k in range(d):
            hi = (bits >> (d - 1 - k)) & 1
            idx = lo_idx[k] + hi if sizes[k] > 1 else lo_idx[k]
            flat += idx * strides[k]
            weight = weight * (frac[k] if hi else 1.0 - frac[k])
        vals = fflat[batch_ix, :, flat].transpose(0, 2, 1)  # (nb, c, npts)
        out += weight[:, None, :] * vals
        corners.append((bits, flat, weight, vals))

    out_shape = (nb, c) + pshape

    def fn(g):
        g = g.reshape(nb, c, npts)
        gfield = None
        if field.requires_grad:
            base = (batch_ix if n == nb else np.zeros((nb, 1), dtype=np.int64)) * c
            chan = np.arange(c)[None, :, None]
            acc = np.zeros(n * c * total)
            for _, flat, weight, _ in corners:
                idx = ((base[:, :, None] + chan) * total + flat[:, None, :]).ravel()
                acc += np.bincount(idx, weights=(g * weight[:, None, :]).ravel(), minlength=n * c * total)
            gfield = acc.reshape(fshape)
        gpts = None
        if points.requires_grad:
            gp = np.zeros((nb, d, npts))
            for bits, _, _, vals in corners:
                gv = np.einsum("ncp,ncp->np", g, vals)
                for k in range(d):
                    hi = (bits >> (d - 1 - k)) & 1
                    dw = np.full((nb, npts), 1.0 if hi else -1.0)
                    for m in range(d):
                        if m != k:
                            him = (bits >> (d - 1 - m)) & 1
                            dw = dw * (frac[m] if him else 1.0 - frac[m])
                    gp[:, k] += gv * dw
            for k in range(d):
                gp[:, k] *= live[k]
            if pn != nb:
                gp = gp.sum(axis=0, keepdims=True)
            gpts = gp.reshape(points.shape)
        return gfield, gpts

    return _make(out.reshape(out_shape), (field, points), fn)


# ---------------------------------------------------------------------------
# backward pass and checks
# ---------------------------------------------------------------------------


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``grad`` of every leaf reachable from a scalar ``root``.

    Leaf gradients accumulate across calls; call ``zero_grad`` to reset.
    """
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads = {id(root): np.ones(root.shape)}
    for node in reversed(_topological(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = node.grad + g if node.grad is not None else g.copy()
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return t


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference gradient check.

    ``strict_error`` is the plain central-difference comparison at ``eps``.
    Coordinates above ``rtol`` are compared again at each of
    ``fallback_eps``; ``resolved_error`` keeps, per coordinate, the smallest
    error seen.  A kink of a piecewise smooth loss (ReLU, bilinear cell
    boundary, clip) lying within ``eps`` of the evaluation point breaks the
    central difference but disappears at a smaller step, whereas a wrong
    gradient disagrees at every step.  ``retried`` counts such coordinates.
    """

    strict_error: float
    resolved_error: float
    coords: int
    retried: int
    worst: tuple = ()


def check_gradients_report(
    build: Callable[[], Tensor],
    leaves: Iterable[Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng=None,
    fallback_eps: Sequence[float] = (),
    rtol: float = 1e-4,
) -> GradCheckReport:
    """Compare autodiff gradients of ``build()`` with central differences.

    ``build`` must rebuild the scalar from the current ``leaves`` data on every
    call.  The error per coordinate is ``|ad - fd| / (|fd| + 1e-8)``.  With
    ``max_coords`` set, that many coordinates per leaf are drawn from ``rng``.
    """
    leaves = list(leaves)
    for leaf in leaves:
        # perturbations write through a flat view, which needs contiguous storage
        leaf.data = np.ascontiguousarray(leaf.data)
        leaf.requires_grad = True
        leaf.zero_grad()
    backward(build())
    analytic = [leaf.grad.copy() for leaf in leaves]
    rng = np.random.default_rng(0) if rng is None else rng
    strict = resolved = 0.0
    count = retried = 0
    worst = ()

    def rel_error(flat, i, g, h):
        orig = flat[i]
        flat[i] = orig + h
        fp = build().item()
        flat[i] = orig - h
        fm = build().item()
        flat[i] = orig
        fd = (fp - fm) / (2.0 * h)
        return abs(g - fd) / (abs(fd) + 1e-8), fd

    with no_grad():
        for k, (leaf, ad) in enumerate(zip(leaves, analytic)):
            flat = leaf.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for i in coords:
                g = float(ad.reshape(-1)[i])
                err, fd = rel_error(flat, i, g, eps)
                count += 1
                if err > strict:
                    strict, worst = err, (k, int(i), g, fd)
                if err > rtol and fallback_eps:
                    retried += 1
                    for h in fallback_eps:
                        err = min(err, rel_error(flat, i, g, h)[0])
                resolved = max(resolved, err)
    return GradCheckReport(strict, resolved, count, retried, worst)


def check_gradients(
    build: Callable[[], Tensor],
    leaves: Iterable[Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng=None,
) -> float:
    """Largest relative disagreement between autodiff and central differences.

    ``build`` must rebuild the scalar from the current ``leaves`` data on every
    call.  The error per coordinate is ``|ad - fd| / (|fd| + 1e-8)``.  With
    ``max_coords`` set, that many coordinates per leaf are drawn from ``rng``.
    """
    return check_gradients_report(build, leaves, eps, max_coords, rng).strict_error


def check_directional(
    build: Callable[[], Tensor],
    leaves: Iterable[Tensor],
    directions: int = 4,
    steps: Sequence[float] = (1e-4, 1e-5, 1e-6, 1e-7),
    rng=None,
) -> float:
    """Worst relative error of the directional derivative along random unit directions.

    All leaves move together along ``v``; ``<grad, v>`` is compared with
    central differences at each of ``steps`` and the best agreement per
    direction is kept.  Tiny gradient components that sit below the
    roundoff floor of a coordinate-wise check are summed into a single
    well-conditioned number, and a kink near the evaluation point only
    spoils the larger steps.
    """
    leaves = list(leaves)
    for leaf in leaves:
        leaf.data = np.ascontiguousarray(leaf.data)
        leaf.requires_grad = True
        leaf.zero_grad()
    backward(build())
    analytic = [leaf.grad.copy() for leaf in leaves]
    base = [leaf.data.copy() for leaf in leaves]
    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    with no_grad():
        for _ in range(directions):
            v = [rng.standard_normal(b.shape) for b in base]
            norm = np.sqrt(sum(float(np.sum(x * x)) for x in v))
            v = [x / norm for x in v]
            g = sum(float(np.sum(a * x)) for a, x in zip(analytic, v))
            best = np.inf
            for h in steps:
                vals = []
                for sign in (1.0, -1.0):
                    for leaf, b, x in zip(leaves, base, v):
                        leaf.data = b + sign * h * x
                    vals.append(build().item())
                fd = (vals[0] - vals[1]) / (2.0 * h)
                best = min(best, abs(g - fd) / (abs(fd) + 1e-8))
            worst = max(worst, best)
        for leaf, b in zip(leaves, base):
            leaf.data = b
    return worst
