"""Regularizer comparison drivers: lambda calibration, lambda sweep, convergence runs.

Each cell trains a fresh Stage1 model and is scored on a fixed set of
evaluation pairs: mean ``1 - LNCC`` over both directions, fold fraction
of both maps, and mean squared displacement magnitude.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..autodiff import NonFiniteError, no_grad
from ..geometry import export_field, fold_fraction, resample_image
from ..losses import REGULARIZERS, RegularizerConfig, dissimilarity
from ..training import TrainConfig, TrainingDiverged, make_stage1, predict_pair, train

__all__ = [
    "EvalSet",
    "CellResult",
    "SweepResult",
    "Calibration",
    "ConvergenceResult",
    "lambda_grid",
    "evaluate_model",
    "train_cell",
    "calibrate_lambda0",
    "lambda_sweep",
    "select_matched_lambdas",
    "convergence_compare",
]

SWEEP_COLUMNS = ("reg", "seed", "i", "lam", "dissimilarity", "fold_fraction", "magnitude", "diverged")
CONVERGENCE_COLUMNS = ("reg", "seed", "lam", "iter", "sim_ab", "sim_ba", "reg_value", "total", "fold_fraction")


@dataclass
class EvalSet:
    """Fixed evaluation pairs, (M, 1, *S) each."""

    a: np.ndarray
    b: np.ndarray

    @classmethod
    def from_images(cls, images, count: int, seed: int) -> "EvalSet":
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[:, None]
        rng = np.random.default_rng(seed)
        m = len(images)
        i = rng.integers(0, m, size=count)
        j = (i + rng.integers(1, m, size=count)) % m
        return cls(images[i], images[j])


def lambda_grid(lam0: float, span: int = 6) -> list:
    """``[(i, lam0 * 2**i) for i in -span..span]``."""
    return [(i, lam0 * 2.0**i) for i in range(-span, span + 1)]


def evaluate_model(model, evalset: EvalSet, sim) -> tuple:
    """``(mean 1-LNCC over both directions, fold fraction, mean |phi(x) - x|^2)``."""
    n = len(evalset.a)
    shape = evalset.a.shape[2:]
    with no_grad():
        phi = predict_pair(model, evalset.a, evalset.b)
        warped = resample_image(np.concatenate([evalset.a, evalset.b]), phi)
        d_ab = dissimilarity(warped[:n], evalset.b, sim).item()
        d_ba = dissimilarity(warped[n:], evalset.a, sim).item()
    folds = fold_fraction(phi, shape, batch=2 * n).fraction_negative
    disp = export_field(phi, shape, 2 * n)
    magnitude = float(np.mean(np.sum(disp * disp, axis=1)))
    return 0.5 * (d_ab + d_ba), folds, magnitude


@dataclass
class CellResult:
    reg: str
    seed: int
    i: int | None
    lam: float
    dissimilarity: float
    fold_fraction: float
    magnitude: float
    diverged: bool = False

    def row(self) -> list:
        return [
            self.reg,
            self.seed,
            "" if self.i is None else self.i,
            repr(self.lam),
            repr(self.dissimilarity),
            repr(self.fold_fraction),
            repr(self.magnitude),
            int(self.diverged),
        ]


def train_cell(dataset, evalset: EvalSet, base: TrainConfig, reg: str, lam: float, seed: int, iters: int, i=None):
    """One Stage1 training run; divergence is recorded, never raised."""
    cfg = replace(
        base,
        lam=lam,
        reg=RegularizerConfig(kind=reg, dx=base.reg.dx),
        seed=seed,
        iters_per_stage=iters,
        stages=1,
    )
    model = make_stage1(cfg.unet, seed)
    try:
        result = train(model, dataset, cfg)
    except (TrainingDiverged, NonFiniteError):
        return CellResult(reg, seed, i, lam, math.nan, math.nan, math.nan, True), None
    dis, folds, mag = evaluate_model(result.model, evalset, cfg.sim)
    return CellResult(reg, seed, i, lam, dis, folds, mag), result


@dataclass
class Calibration:
    reg: str
    lam0: float
    target: float
    probes: list = field(default_factory=list)  # (lam, fold_fraction)
    in_band: bool = False


def _log_gap(fold: float, target: float, floor: float) -> float:
    return abs(math.log(max(fold, floor)) - math.log(target))


def calibrate_lambda0(
    dataset,
    evalset: EvalSet,
    base: TrainConfig,
    reg: str,
    target: float = 1e-4,
    probe_iters: int = 200,
    bracket: tuple = (1e-3, 1e3),
    max_probes: int = 6,
    seed: int = 0,
) -> Calibration:
    """Geometric bisection of lambda until the probe fold fraction is in ``[target/2, 2 target]``.

    Larger lambda must lower the fold fraction.  If the band is never hit
    the probe whose fold fraction is closest to the target on a log scale
    is returned (zero folds count as one half folded point); ties go to the
    later, more refined probe.
    """
    lo, hi = bracket
    n_points = 2 * len(evalset.a) * int(np.prod([max(s - 4, 1) for s in evalset.a.shape[2:]]))
    floor = 0.5 / n_points
    probes = []
    for _ in range(max_probes):
        lam = math.sqrt(lo * hi)
        cell, _ = train_cell(dataset, evalset, base, reg, lam, seed, probe_iters)
        fold = math.inf if cell.diverged else cell.fold_fraction
        probes.append((lam, fold))
        if 0.5 * target <= fold <= 2.0 * target:
            return Calibration(reg, lam, target, probes, True)
        if fold > 2.0 * target:
            lo = lam
        else:
            hi = lam
    finite = [(lam, f) for lam, f in probes if math.isfinite(f)]
    if not finite:
        return Calibration(reg, probes[-1][0], target, probes, False)
    best = min(reversed(finite), key=lambda p: _log_gap(p[1], target, floor))
    return Calibration(reg, best[0], target, probes, False)


@dataclass
class SweepResult:
    cells: list
    lam0: dict
    span: int = 6

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for c in self.cells:
            w.writerow(c.row())
        return buf.getvalue()

    def series(self, reg: str, attr: str, seed: int | None = None) -> np.ndarray:
        """Values of ``attr`` ordered by ``i`` for one regularizer (and seed)."""
        cells = [c for c in self.cells if c.reg == reg and (seed is None or c.seed == seed)]
        cells.sort(key=lambda c: (c.i, c.seed))
        return np.array([getattr(c, attr) for c in cells])

    def cell(self, reg: str, i: int, seed: int) -> CellResult:
        for c in self.cells:
            if c.reg == reg and c.i == i and c.seed == seed:
                return c
        raise KeyError((reg, i, seed))


def lambda_sweep(
    dataset,
    evalset: EvalSet,
    base: TrainConfig,
    lam0: dict,
    regularizers=REGULARIZERS,
    seeds=(0,),
    iters: int = 500,
    span: int = 6,
    keep_curves: bool = False,
):
    """Train one Stage1 per (regularizer, seed, lambda0 * 2**i); optional training curves."""
    cells, curves = [], {}
    for reg in regularizers:
        for seed in seeds:
            for i, lam in lambda_grid(lam0[reg], span):
                cell, result = train_cell(dataset, evalset, base, reg, lam, seed, iters, i)
                cells.append(cell)
                if keep_curves and result is not None:
                    curves[(reg, seed, i)] = result.rows
    sweep = SweepResult(cells, dict(lam0), span)
    return (sweep, curves) if keep_curves else sweep


def select_matched_lambdas(sweep: SweepResult, target: float = 1e-4, regularizers=("icon", "gradicon"), seed=None) -> dict:
    """Per regularizer, the sweep lambda whose fold fraction is nearest ``target`` (log scale).

    Ties go to the larger lambda.  Diverged cells are skipped.
    """
    out = {}
    for reg in regularizers:
        cells = [c for c in sweep.cells if c.reg == reg and not c.diverged and (seed is None or c.seed == seed)]
        if not cells:
            raise ValueError(f"no usable sweep cells for {reg}")
        best = min(cells, key=lambda c: (_log_gap(c.fold_fraction, target, 1e-7), -c.lam))
        out[reg] = best.lam
    return out


@dataclass
class ConvergenceResult:
    rows: list
    final: dict  # (reg, seed) -> (dissimilarity, fold_fraction, magnitude)

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CONVERGENCE_COLUMNS)
        w.writerows(self.rows)
        return buf.getvalue()

    def final_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("reg", "seed", "dissimilarity", "fold_fraction", "magnitude"))
        for (reg, seed), (dis, fold, mag) in sorted(self.final.items()):
            w.writerow([reg, seed, repr(dis), repr(fold), repr(mag)])
        return buf.getvalue()

    def wins(self, better: str = "gradicon", worse: str = "icon") -> int:
        seeds = sorted({s for (_, s) in self.final})
        return sum(self.final[(better, s)][0] < self.final[(worse, s)][0] for s in seeds)


def convergence_compare(dataset, evalset: EvalSet, base: TrainConfig, lam_icon: float, lam_gradicon: float, iters: int, seeds=(0, 1, 2)):
    """Train ICON and GradICON Stage1 models with identical seeds; keep their curves and final scores."""
    rows, final = [], {}
    for reg, lam in (("icon", lam_icon), ("gradicon", lam_gradicon)):
        for seed in seeds:
            cell, result = train_cell(dataset, evalset, base, reg, lam, seed, iters)
            final[(reg, seed)] = (cell.dissimilarity, cell.fold_fraction, cell.magnitude)
            if result is not None:
                for r in result.rows:
                    rows.append([reg, seed, repr(lam)] + list(r[:6]))
    return ConvergenceResult(rows, final)
