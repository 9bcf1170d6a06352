"""Adam, affine augmentation, the two-stage training loop and test-time refinement."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import NonFiniteError, Tensor, backward, concat, no_grad
from .geometry import AffineMap, FieldMap, Identity, Stacked, TransformMap, export_field, fold_fraction, resample_image
from .losses import LossReport, RegularizerConfig, SimilarityConfig, sample_points, total_loss
from .models import RegistrationModel, UNet, UNetSpec, build_stage1, build_stage2

__all__ = [
    "AdamState",
    "adam_step",
    "Adam",
    "AugmentConfig",
    "sample_flips",
    "affine_augment",
    "TrainConfig",
    "desk_config",
    "default_lambda",
    "augment_pair",
    "ImageCorpus",
    "PairList",
    "TrainingDiverged",
    "TrainResult",
    "CURVE_COLUMNS",
    "make_stage1",
    "train",
    "InstanceResult",
    "instance_optimize",
    "predict_pair",
    "split_pair",
]

CURVE_COLUMNS = ("iter", "sim_ab", "sim_ba", "reg", "total", "fold_fraction", "wall_ms")


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **kw) -> "AdamState":
        return cls([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params], **kw)


def adam_step(state: AdamState, params, grads, lr: float) -> None:
    """Bias-corrected Adam update of ``params`` in place.

    Raises
    ------
    NonFiniteError
        If any gradient holds NaN or inf; parameters are left untouched.
    """
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and Adam moments must have the same length")
    for k, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in parameter {k} of shape {np.shape(g)}")
        if np.shape(g) != params[k].shape:
            raise ValueError(f"gradient {k} has shape {np.shape(g)}, parameter has {params[k].shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Adam over a fixed parameter list, stepping on their ``.grad`` buffers."""

    def __init__(self, params, lr: float):
        self.params = list(params)
        self.lr = float(lr)
        self.state = AdamState.for_params(self.params)

    def step(self) -> None:
        adam_step(self.state, self.params, [p.grad for p in self.params], self.lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    """Random flips plus a Gaussian perturbation ``gamma * G`` of the affine matrix."""

    gamma: float = 0.05
    flips: bool = True

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("augmentation gamma must be non-negative")


def sample_flips(rng, dim: int, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Per-axis signs ``u_i`` in {-1, +1}; drawn once and shared by both images of a pair."""
    if not cfg.flips:
        return np.ones(dim)
    return rng.choice(np.array([-1.0, 1.0]), size=dim)


def affine_augment(image, rng, cfg: AugmentConfig = AugmentConfig(), flips=None) -> Tensor:
    """Resample each image of the batch through ``x -> M (x - c) + t + c``.

    ``[M | t] = [diag(u) | 0] + gamma * G`` with ``G`` standard normal and
    ``c`` the domain centre, so flips mirror about the middle of the image.
    ``flips`` fixes ``u``; pass the same array for both images of a pair.
    """
    image = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float64))
    n = image.shape[0]
    d = image.ndim - 2
    u = sample_flips(rng, d, cfg) if flips is None else np.asarray(flips, dtype=np.float64)
    mats = np.zeros((n, d, d + 1))
    for k in range(n):
        mats[k, :, :d] = np.diag(u)
        mats[k] += cfg.gamma * rng.standard_normal((d, d + 1))
    # shift so the matrix acts about the centre: offset = t + c - M c
    centre = np.full(d, 0.5)
    mats[:, :, d] += centre - np.einsum("nij,j->ni", mats[:, :, :d], centre)
    with no_grad():
        out = resample_image(image, AffineMap(mats))
    return out


def augment_pair(a: np.ndarray, b: np.ndarray, rng, cfg: AugmentConfig) -> tuple:
    """Shared flips, independent affine perturbations."""
    flips = sample_flips(rng, a.ndim - 2, cfg)
    return affine_augment(a, rng, cfg, flips).data, affine_augment(b, rng, cfg, flips).data


# ---------------------------------------------------------------------------
# configuration and data
# ---------------------------------------------------------------------------


def default_lambda(sim_kind: str) -> float:
    return 1.5 if sim_kind == "lncc" else 0.2


@dataclass(frozen=True)
class TrainConfig:
    """Training protocol.

    Defaults follow the large-scale protocol (lr 5e-5, 50000 iterations per
    stage); :func:`desk_config` gives the small CPU setting.  ``lam`` of
    ``None`` picks 1.5 for LNCC and 0.2 for MSE and always overrides
    ``reg.lam``.
    """

    lam: float | None = None
    lr: float = 5e-5
    iters_per_stage: int = 50000
    batch: int = 4
    seed: int = 0
    augment: bool = False
    augment_cfg: AugmentConfig = AugmentConfig()
    sim: SimilarityConfig = SimilarityConfig()
    reg: RegularizerConfig = RegularizerConfig()
    unet: UNetSpec = UNetSpec()
    stages: int = 2
    log_every: int = 10
    fold_every: int = 100

    def __post_init__(self):
        lam = default_lambda(self.sim.kind) if self.lam is None else float(self.lam)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "reg", replace(self.reg, lam=lam))
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.iters_per_stage < 1:
            raise ValueError("iters_per_stage must be at least 1")
        if self.batch < 1:
            raise ValueError("batch must be at least 1")
        if self.stages not in (1, 2):
            raise ValueError("stages must be 1 or 2")
        if self.log_every < 1 or self.fold_every < 1:
            raise ValueError("log_every and fold_every must be at least 1")


def desk_config(**overrides) -> TrainConfig:
    """64x64 CPU setting: small UNets, lr 5e-4, 2000 iterations per stage, batch 2."""
    base = dict(
        lr=5e-4,
        iters_per_stage=2000,
        batch=2,
        unet=UNetSpec(levels=3, base_channels=8),
    )
    base.update(overrides)
    return TrainConfig(**base)


class ImageCorpus:
    """Random ordered pairs of distinct images from one collection (inter-subject)."""

    def __init__(self, images):
        self.images = np.asarray(images, dtype=np.float64)
        if self.images.ndim < 3:
            raise ValueError("images must be (M, *S) or (M, 1, *S)")
        if self.images.ndim == 3:
            self.images = self.images[:, None]
        if len(self.images) < 2:
            raise ValueError("need at least two images to form pairs")

    @property
    def shape(self) -> tuple:
        return self.images.shape[2:]

    def __len__(self) -> int:
        return len(self.images)

    def sample(self, rng, batch: int) -> tuple:
        m = len(self.images)
        i = rng.integers(0, m, size=batch)
        j = (i + rng.integers(1, m, size=batch)) % m
        return self.images[i], self.images[j]


class PairList:
    """Fixed (source, target) pairs, drawn uniformly with replacement."""

    def __init__(self, sources, targets):
        self.sources = np.asarray(sources, dtype=np.float64)
        self.targets = np.asarray(targets, dtype=np.float64)
        if self.sources.ndim == 3:
            self.sources = self.sources[:, None]
            self.targets = self.targets[:, None]
        if self.sources.shape != self.targets.shape or len(self.sources) == 0:
            raise ValueError("sources and targets must be nonempty and equally shaped")

    @property
    def shape(self) -> tuple:
        return self.sources.shape[2:]

    def __len__(self) -> int:
        return len(self.sources)

    def sample(self, rng, batch: int) -> tuple:
        idx = rng.integers(0, len(self.sources), size=batch)
        return self.sources[idx], self.targets[idx]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; ``snapshot`` holds the last finite parameters."""

    def __init__(self, message: str, iteration: int, snapshot: list):
        super().__init__(message)
        self.iteration = iteration
        self.snapshot = snapshot


@dataclass
class TrainResult:
    model: RegistrationModel
    rows: list = field(default_factory=list)
    stage1: RegistrationModel | None = None

    def curve_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CURVE_COLUMNS)
        writer.writerows(self.rows)
        return buf.getvalue()

    def write_curves(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.curve_csv())

    def column(self, name: str) -> np.ndarray:
        k = CURVE_COLUMNS.index(name)
        return np.array([float(r[k]) if r[k] != "" else np.nan for r in self.rows])


def make_stage1(spec: UNetSpec, seed: int) -> RegistrationModel:
    """Stage1 from three independently initialized UNets seeded from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(3)
    return build_stage1(*(UNet(spec, seed=int(s)) for s in seeds))


def predict_pair(model: RegistrationModel, a, b) -> TransformMap:
    """Evaluate ``model`` on the stacked batch ``[(A, B); (B, A)]``."""
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=np.float64))
    b = b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=np.float64))
    return model(concat([a, b], axis=0), concat([b, a], axis=0))


def _run_stage(model, dataset, cfg, rng, start_iter, rows, timing, fold_grid) -> None:
    params = model.parameters()
    opt = Adam(params, cfg.lr)
    last = start_iter + cfg.iters_per_stage - 1
    for it in range(start_iter, start_iter + cfg.iters_per_stage):
        t0 = time.perf_counter()
        a, b = dataset.sample(rng, cfg.batch)
        if cfg.augment:
            a, b = augment_pair(a, b, rng, cfg.augment_cfg)
        opt.zero_grad()
        phi = predict_pair(model, a, b)
        # sample points come from their own per-iteration stream, so the
        # regularizer kind never shifts the data sampling
        loss, report = total_loss(a, b, phi, cfg.sim, cfg.reg, rng=np.random.default_rng([cfg.seed, 1, it]))
        if not np.isfinite(report.total):
            raise TrainingDiverged(
                f"total loss became {report.total} at iteration {it}", it, [p.data.copy() for p in params]
            )
        log = it % cfg.log_every == 0 or it == last
        fold = None
        if log and (it % cfg.fold_every == 0 or it == last):
            fold = fold_fraction(phi, fold_grid, batch=2 * cfg.batch).fraction_negative
        backward(loss)
        try:
            opt.step()
        except NonFiniteError as exc:
            raise TrainingDiverged(str(exc), it, [p.data.copy() for p in params]) from exc
        if log:
            wall = f"{(time.perf_counter() - t0) * 1e3:.3f}" if timing else "0"
            rows.append(report.row(it, fold) + [wall])


def train(model: RegistrationModel, dataset, cfg: TrainConfig, timing: bool = False) -> TrainResult:
    """Train ``model`` as Stage1, then (``cfg.stages == 2``) Stage2 with a fresh full-resolution atom.

    Each iteration draws ``cfg.batch`` pairs, evaluates the symmetric loss at
    full resolution on both directions and takes one Adam step.  Every
    ``log_every`` iterations a curve row is recorded; ``fold_fraction`` is
    filled every ``fold_every`` iterations.  ``wall_ms`` is ``0`` unless
    ``timing`` is set, which keeps reruns byte-identical.
    """
    rng = np.random.default_rng(cfg.seed)
    rows: list = []
    grid = tuple(dataset.shape)
    _run_stage(model, dataset, cfg, rng, 0, rows, timing, grid)
    if cfg.stages == 1:
        return TrainResult(model, rows)
    psi4_seed = int(np.random.SeedSequence(cfg.seed).generate_state(4)[3])
    stage2 = build_stage2(model, UNet(cfg.unet, seed=psi4_seed))
    _run_stage(stage2, dataset, cfg, rng, cfg.iters_per_stage, rows, timing, grid)
    return TrainResult(stage2, rows, stage1=model)


# ---------------------------------------------------------------------------
# instance optimization
# ---------------------------------------------------------------------------


@dataclass
class InstanceResult:
    phi_ab: TransformMap
    phi_ba: TransformMap
    initial: LossReport
    final: LossReport
    accepted: bool

    @property
    def report(self) -> LossReport:
        return self.final if self.accepted else self.initial


def _maps_of(init, a, b):
    if isinstance(init, RegistrationModel):
        with no_grad():
            phi = predict_pair(init, a, b)
        n = a.shape[0]
        return phi, n
    phi_ab, phi_ba = init
    return Stacked([phi_ab, phi_ba], [a.shape[0], a.shape[0]]), a.shape[0]


def instance_optimize(
    init,
    a,
    b,
    sim: SimilarityConfig = SimilarityConfig(),
    reg: RegularizerConfig = RegularizerConfig(),
    iters: int = 50,
    lr: float = 5e-4,
    seed: int = 0,
) -> InstanceResult:
    """Refine a registration by Adam on dense displacement fields.

    ``init`` is either a model (evaluated on ``(a, b)`` and ``(b, a)``) or a
    pair ``(phi_ab, phi_ba)``.  Both directions are exported to fields at
    pixel centres and optimized jointly under the training loss for
    ``iters`` steps, drawing fresh sample points each step.  The refined
    maps are kept only if their total loss on a fixed evaluation point set
    does not exceed that of the initial maps.
    """
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    phi0, n = _maps_of(init, a, b)
    shape = a.shape[2:]
    eval_rng = np.random.default_rng([seed, 1])
    eval_pts = sample_points(2 * n, shape, reg.sample_count(shape), reg.dx, eval_rng)
    with no_grad():
        _, initial = total_loss(a, b, phi0, sim, reg, points=eval_pts)
    if iters <= 0:
        return InstanceResult(_half(phi0, n, 0), _half(phi0, n, 1), initial, initial, False)
    disp = Tensor(export_field(phi0, shape, 2 * n), requires_grad=True)
    opt = Adam([disp], lr)
    rng = np.random.default_rng([seed, 2])
    for _ in range(iters):
        opt.zero_grad()
        loss, _ = total_loss(a, b, FieldMap(disp), sim, reg, rng=rng)
        backward(loss)
        opt.step()
    refined = FieldMap(Tensor(disp.data.copy()))
    with no_grad():
        _, final = total_loss(a, b, refined, sim, reg, points=eval_pts)
    if final.total <= initial.total:
        return InstanceResult(_half(refined, n, 0), _half(refined, n, 1), initial, final, True)
    return InstanceResult(_half(phi0, n, 0), _half(phi0, n, 1), initial, final, False)


class _Half(TransformMap):
    """Batch half ``k`` of a stacked 2N map, evaluated on N point sets."""

    def __init__(self, base: TransformMap, n: int, k: int):
        self.base, self.n, self.k = base, n, k

    def __call__(self, points):
        pts = points if isinstance(points, Tensor) else Tensor(np.asarray(points, dtype=np.float64))
        other = pts  # the unused half sees the same points; its output is discarded
        stacked = concat([pts, other] if self.k == 0 else [other, pts], axis=0)
        out = self.base(stacked)
        return out[: self.n] if self.k == 0 else out[self.n :]


def split_pair(phi: TransformMap, n: int) -> tuple:
    """``(phi_ab, phi_ba)`` from a map over the stacked ``[(A, B); (B, A)]`` batch of size 2n."""
    return _half(phi, n, 0), _half(phi, n, 1)


def _half(phi: TransformMap, n: int, k: int) -> TransformMap:
    if isinstance(phi, Identity):
        return phi
    if isinstance(phi, Stacked) and phi.sizes == [n, n]:
        return phi.parts[k]
    if isinstance(phi, FieldMap):
        disp = phi.displacement
        return FieldMap(disp[:n] if k == 0 else disp[n:])
    return _Half(phi, n, k)
