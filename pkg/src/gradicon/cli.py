"""Command line entry point: ``gradicon <command> [flags]``.

Commands
--------
gen-data   write the shape corpus and elastic evaluation pairs as PGM/CSV/raw
train      train Stage1 (+ Stage2) and write curves, checkpoint and held-out metrics
register   register one PGM pair, optionally from a checkpoint, with test-time refinement
eval       DICE / mTRE / folds of a checkpoint on elastic pairs with known warps
sweep      calibrate lambda0 per regularizer and run the lambda grid
converge   ICON vs GradICON training curves at matched lambdas
check      run the invariant suite; nonzero exit on failure

Every command writes into ``--out`` (created if needed) and echoes the
resolved configuration to ``config.echo``.  ``--iters`` sets the
iteration count that matters for the command: training iterations
per stage for ``train``, refinement steps for ``register``/``eval``,
iterations per cell for ``sweep`` and per run for ``converge``.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, echo, load_config, set_values
from .autodiff import no_grad
from .geometry import export_field, fold_fraction, resample_image, resample_nearest
from .harness import checks
from .harness.experiments import (
    CONVERGENCE_COLUMNS,
    EvalSet,
    SweepResult,
    CellResult,
    calibrate_lambda0,
    convergence_compare,
    evaluate_model,
    lambda_sweep,
    select_matched_lambdas,
)
from .harness.metrics import dice, mtre
from .harness.noise import InverseNotConverged, noise_hypothesis
from .io import FormatError, load_pgm, save_field_csv, save_field_raw, save_landmarks, save_pgm
from .losses import RegularizerConfig, SimilarityConfig
from .models import IdentityPredictor, load_checkpoint, save_checkpoint
from .synthdata import WarpGenerationError, gen_elastic_pairs, gen_shapes
from .training import ImageCorpus, TrainingDiverged, instance_optimize, make_stage1, predict_pair, split_pair, train

__all__ = ["main", "CommandError", "load_corpus", "elastic_eval_pairs"]

COMMANDS = ("gen-data", "train", "register", "eval", "sweep", "converge", "check")


class CommandError(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CommandError(f"{message} (see '{self.prog} --help')")


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gradicon", description="Gradient inverse consistency registration toolkit.")
    parser.add_argument("--version", action="version", version=f"gradicon {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, help=_HELP[name])
        p.add_argument("--config", metavar="PATH", help="flat key = value configuration file")
        p.add_argument("--seed", type=int, help="training / refinement seed")
        p.add_argument("--out", metavar="DIR", default=f"runs/{name}", help="run directory (default runs/%(prog)s)")
        p.add_argument("--iters", type=int, help="iteration count for this command")
        p.add_argument("--lambda", dest="lam", type=float, metavar="FLOAT", help="regularization weight")
        p.add_argument("--reg", choices=("icon", "gradicon", "bending", "diffusion"))
        p.add_argument("--sim", choices=("mse", "lncc"))
        if name in ("register", "eval"):
            p.add_argument("--checkpoint", metavar="PATH", help="model checkpoint written by 'train'")
        if name == "register":
            p.add_argument("--pair", nargs=2, metavar=("A", "B"), required=True, help="source and target PGM")
        if name == "converge":
            p.add_argument("--sweep", metavar="CSV", help="sweep.csv used to pick matched lambdas")
        if name == "check":
            p.add_argument("--full", action="store_true", help="three gradient-check seeds instead of one")
    return parser


_HELP = {
    "gen-data": "write the synthetic shape corpus and elastic pairs",
    "train": "train a two-stage registration model",
    "register": "register one image pair",
    "eval": "evaluate a checkpoint on elastic pairs",
    "sweep": "lambda0 calibration and lambda sweep",
    "converge": "ICON vs GradICON convergence comparison",
    "check": "run the invariant suite",
}

_ITERS_KEY = {
    "gen-data": None,
    "train": "iters",
    "register": "instance_iters",
    "eval": "instance_iters",
    "sweep": "sweep_iters",
    "converge": "converge_iters",
    "check": None,
}


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.lam is not None:
        overrides["lam"] = args.lam
    if args.reg is not None:
        overrides["reg"] = args.reg
    if args.sim is not None:
        overrides["sim"] = args.sim
    if args.iters is not None:
        key = _ITERS_KEY[args.command]
        if key is None:
            raise CommandError(f"--iters has no meaning for '{args.command}'")
        overrides[key] = args.iters
    return set_values(cfg, overrides, "command line") if overrides else cfg


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def load_corpus(cfg: RunConfig) -> tuple:
    """``(train_images, holdout_images, holdout_masks)``, each (M, 1, S, S).

    Generated from ``data_seed`` unless ``cfg.data`` names a directory
    written by ``gen-data`` (``images/shape_*.pgm`` and ``images/mask_*.pgm``).
    """
    if cfg.data:
        root = Path(cfg.data) / "images"
        files = sorted(root.glob("shape_*.pgm"))
        if not files:
            raise CommandError(f"no images/shape_*.pgm under {cfg.data}; run 'gradicon gen-data --out {cfg.data}' first")
        images = np.stack([load_pgm(f, (cfg.size, cfg.size)) for f in files])
        masks = []
        for f in files:
            m = root / f.name.replace("shape_", "mask_")
            if not m.is_file():
                raise CommandError(f"missing mask {m} for {f.name}")
            masks.append(np.round(load_pgm(m, (cfg.size, cfg.size))))
        masks = np.stack(masks)
    else:
        shapes = gen_shapes(cfg.images, cfg.size, seed=cfg.data_seed)
        images = np.stack([s[0] for s in shapes])
        masks = np.stack([s[1] for s in shapes])
    if cfg.holdout >= len(images):
        raise CommandError(f"holdout={cfg.holdout} leaves no training images out of {len(images)}")
    split = len(images) - cfg.holdout
    return images[:split, None], images[split:, None], masks[split:, None]


def elastic_eval_pairs(cfg: RunConfig, holdout_images, holdout_masks, count: int) -> list:
    """``count`` elastic pairs built from the first held-out shapes (pairs_per_image each)."""
    pairs = []
    spec = cfg.warp_spec()
    k = 0
    while len(pairs) < count:
        idx = k % len(holdout_images)
        pairs.extend(
            gen_elastic_pairs(
                holdout_masks[idx, 0],
                cfg.pairs_per_image,
                spec,
                seed=cfg.data_seed * 100003 + k,
                image=holdout_images[idx, 0],
            )
        )
        k += 1
    return pairs[:count]


def _evalset(cfg: RunConfig, holdout) -> EvalSet:
    return EvalSet.from_images(holdout, cfg.eval_pairs, seed=cfg.data_seed + 1)


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _prepare(out: Path, cfg: RunConfig) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    (out / "fields").mkdir(exist_ok=True)
    (out / "images").mkdir(exist_ok=True)
    (out / "config.echo").write_text(echo(cfg))
    return out


def _dump_pair(out: Path, a, b, phi_ab, phi_ba, tag: str = "") -> None:
    """Fields (raw + CSV), warped images and difference images of one registered pair."""
    shape = a.shape[2:]
    for name, phi, src, tgt in (("ab", phi_ab, a, b), ("ba", phi_ba, b, a)):
        disp = export_field(phi, shape)[0]
        save_field_raw(out / "fields" / f"{tag}phi_{name}.raw", disp)
        save_field_csv(out / "fields" / f"{tag}phi_{name}.csv", disp)
        warped = resample_image(src, phi).data
        save_pgm(out / "images" / f"{tag}warped_{name}.pgm", warped)
        save_pgm(out / "images" / f"{tag}diff_{name}.pgm", 0.5 + 0.5 * (warped - tgt))
        mag = np.sqrt(np.sum(disp * disp, axis=0))
        save_pgm(out / "images" / f"{tag}magnitude_{name}.pgm", mag / max(float(mag.max()), 1e-12))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, cfg: RunConfig) -> int:
    if cfg.data:
        raise CommandError("gen-data generates shapes; leave 'data' unset in the config")
    out = _prepare(Path(args.out), cfg)
    shapes = gen_shapes(cfg.images, cfg.size, seed=cfg.data_seed)
    split = cfg.images - cfg.holdout
    rows = []
    for k, (image, mask, spec) in enumerate(shapes):
        save_pgm(out / "images" / f"shape_{k:04d}.pgm", image)
        save_pgm(out / "images" / f"mask_{k:04d}.pgm", mask)
        rows.append([k, spec.kind, repr(spec.center[0]), repr(spec.center[1]), repr(spec.radius), repr(spec.rotation),
                     "train" if k < split else "holdout"])
    _write_csv(out / "shapes.csv", ("index", "kind", "cx", "cy", "radius", "rotation", "split"), rows)
    images = np.stack([s[0] for s in shapes])[split:, None]
    masks = np.stack([s[1] for s in shapes])[split:, None]
    pairs = elastic_eval_pairs(cfg, images, masks, cfg.eval_pairs)
    pair_dir = out / "pairs"
    pair_dir.mkdir(exist_ok=True)
    for k, p in enumerate(pairs):
        save_pgm(pair_dir / f"pair_{k:04d}_source.pgm", p.source)
        save_pgm(pair_dir / f"pair_{k:04d}_target.pgm", p.target)
        save_pgm(pair_dir / f"pair_{k:04d}_source_mask.pgm", p.source_mask)
        save_pgm(pair_dir / f"pair_{k:04d}_target_mask.pgm", p.target_mask)
        save_landmarks(pair_dir / f"pair_{k:04d}_landmarks.csv", p.landmarks)
        save_field_raw(out / "fields" / f"truth_{k:04d}.raw", export_field(p.truth, p.source.shape[2:])[0])
    print(f"wrote {len(shapes)} shapes ({split} train, {cfg.holdout} holdout) and {len(pairs)} elastic pairs to {out}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    out = _prepare(Path(args.out), cfg)
    train_imgs, holdout, _ = load_corpus(cfg)
    tcfg = cfg.train_config()
    model = make_stage1(tcfg.unet, tcfg.seed)
    try:
        result = train(model, ImageCorpus(train_imgs), tcfg)
    except TrainingDiverged as exc:
        raise CommandError(f"training diverged at iteration {exc.iteration}: {exc}; lower lr or lambda") from None
    result.write_curves(out / "curves.csv")
    meta = {"seed": tcfg.seed, "reg": tcfg.reg.kind, "lam": tcfg.lam, "sim": tcfg.sim.kind, "stages": tcfg.stages}
    save_checkpoint(result.model, out / "model.ckpt", meta)
    evalset = _evalset(cfg, holdout)
    dis, folds, mag = evaluate_model(result.model, evalset, tcfg.sim)
    _write_csv(out / "metrics.csv", ("split", "pairs", "dissimilarity", "fold_fraction", "magnitude"),
               [["holdout", len(evalset.a), repr(dis), repr(folds), repr(mag)]])
    with no_grad():
        phi = predict_pair(result.model, evalset.a[:1], evalset.b[:1])
    _dump_pair(out, evalset.a[:1], evalset.b[:1], *split_pair(phi, 1))
    print(f"trained {tcfg.stages} stage(s) x {tcfg.iters_per_stage} iterations; "
          f"holdout 1-LNCC {dis:.4f}, folds {100 * folds:.4f}%  -> {out}")
    return 0


def _load_model(path):
    if path is None:
        return IdentityPredictor(), {}
    if not Path(path).is_file():
        raise CommandError(f"checkpoint {path} not found; train one with 'gradicon train --out DIR'")
    try:
        return load_checkpoint(path)
    except (ValueError, KeyError) as exc:
        raise CommandError(f"cannot read checkpoint {path}: {exc}") from None


def _losses(cfg: RunConfig, lam: float | None = None):
    sim = SimilarityConfig(cfg.sim)
    lam = cfg.train_config().lam if lam is None else lam
    return sim, RegularizerConfig(kind=cfg.reg, lam=lam, dx=cfg.dx)


def cmd_register(args, cfg: RunConfig) -> int:
    model, meta = _load_model(args.checkpoint)
    for path in args.pair:
        if not Path(path).is_file():
            raise CommandError(f"image {path} not found")
    a = load_pgm(args.pair[0])
    b = load_pgm(args.pair[1], expected_shape=a.shape)
    out = _prepare(Path(args.out), cfg)
    a, b = a[None, None], b[None, None]
    sim, reg = _losses(cfg)
    res = instance_optimize(model, a, b, sim, reg, iters=cfg.instance_iters, lr=cfg.instance_lr, seed=cfg.seed)
    _dump_pair(out, a, b, res.phi_ab, res.phi_ba)
    rows = [["initial"] + res.initial.row(0)[1:5], ["final"] + res.final.row(cfg.instance_iters)[1:5]]
    shape = a.shape[2:]
    folds = [fold_fraction(p, shape).fraction_negative for p in (res.phi_ab, res.phi_ba)]
    _write_csv(out / "metrics.csv", ("stage", "sim_ab", "sim_ba", "reg", "total"), rows)
    _write_csv(out / "summary.csv", ("accepted", "iters", "fold_fraction_ab", "fold_fraction_ba"),
               [[int(res.accepted), cfg.instance_iters, repr(folds[0]), repr(folds[1])]])
    r = res.report
    print(f"sim_ab={r.sim_ab:.6g} sim_ba={r.sim_ba:.6g} reg={r.reg:.6g} total={r.total:.6g} "
          f"(initial total {res.initial.total:.6g}, refinement {'kept' if res.accepted else 'rejected'})  -> {out}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    model, meta = _load_model(args.checkpoint)
    out = _prepare(Path(args.out), cfg)
    _, holdout, masks = load_corpus(cfg)
    pairs = elastic_eval_pairs(cfg, holdout, masks, cfg.eval_pairs)
    sim, reg = _losses(cfg, meta.get("lam"))
    header = ("pair", "dice_initial", "dice", "mtre_initial", "mtre", "mtre_px", "fold_fraction",
              "total_initial", "total_final", "accepted")
    rows, noise_rows = [], []
    for k, p in enumerate(pairs):
        shape = p.source.shape[2:]
        res = instance_optimize(model, p.source, p.target, sim, reg, iters=cfg.instance_iters, lr=cfg.instance_lr, seed=cfg.seed + k)
        ident = IdentityPredictor()(None, None)
        d0 = dice(p.source_mask, p.target_mask)
        d1 = dice(resample_nearest(p.source_mask, res.phi_ab), p.target_mask)
        m0 = mtre(p.landmarks, ident, shape)
        m1 = mtre(p.landmarks, res.phi_ab, shape)
        folds = fold_fraction(res.phi_ab, shape).fraction_negative
        rows.append([k, repr(d0), repr(d1), repr(m0.normalized), repr(m1.normalized), repr(m1.pixels), repr(folds),
                     repr(res.initial.total), repr(res.report.total), int(res.accepted)])
        if k < cfg.noise_pairs:
            try:
                est = noise_hypothesis(res.phi_ab, res.phi_ba, shape)
                noise_rows.append([k, repr(est.n_norm), repr(est.grad_n_norm), "" if est.ratio is None else repr(est.ratio),
                                   int(est.degenerate)])
            except InverseNotConverged as exc:
                noise_rows.append([k, "", "", "", f"inverse failed: {exc}"])
    _write_csv(out / "metrics.csv", header, rows)
    if noise_rows:
        _write_csv(out / "noise.csv", ("pair", "n_norm", "grad_n_norm", "ratio", "degenerate"), noise_rows)
    mean = lambda col: math.fsum(float(r[col]) for r in rows) / len(rows)  # noqa: E731
    print(f"{len(rows)} pairs: DICE {mean(1):.4f} -> {mean(2):.4f}, mTRE {mean(3):.5f} -> {mean(4):.5f} "
          f"({mean(5):.3f} px), folds {100 * mean(6):.4f}%  -> {out}")
    return 0


def cmd_sweep(args, cfg: RunConfig) -> int:
    out = _prepare(Path(args.out), cfg)
    train_imgs, holdout, _ = load_corpus(cfg)
    dataset, evalset = ImageCorpus(train_imgs), _evalset(cfg, holdout)
    base = cfg.train_config(stages=1, fold_every=10**9)
    lam0 = cfg.lam0()
    cal_rows = []
    for reg in cfg.regularizer_list():
        if reg in lam0:
            cal_rows.append([reg, repr(lam0[reg]), "", "", "given"])
            continue
        cal = calibrate_lambda0(dataset, evalset, base, reg, target=cfg.fold_target, probe_iters=cfg.probe_iters,
                                bracket=(cfg.probe_lo, cfg.probe_hi), max_probes=cfg.probe_max, seed=cfg.seed)
        for k, (lam, fold) in enumerate(cal.probes):
            cal_rows.append([reg, repr(lam), k, repr(fold), "selected" if lam == cal.lam0 else ""])
        lam0[reg] = cal.lam0
        print(f"{reg}: lambda0 = {cal.lam0:.6g} ({'in band' if cal.in_band else 'nearest probe'})")
    _write_csv(out / "calibration.csv", ("reg", "lam", "probe", "fold_fraction", "status"), cal_rows)
    sweep = lambda_sweep(dataset, evalset, base, lam0, cfg.regularizer_list(), cfg.seed_list("sweep_seeds"),
                         cfg.sweep_iters, cfg.sweep_span)
    (out / "sweep.csv").write_text(sweep.csv())
    print(f"{len(sweep.cells)} sweep cells -> {out / 'sweep.csv'}")
    return 0


def read_sweep_csv(path) -> SweepResult:
    path = Path(path)
    if not path.is_file():
        raise CommandError(f"sweep file {path} not found; run 'gradicon sweep' first")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        cells = [
            CellResult(r["reg"], int(r["seed"]), int(r["i"]) if r["i"] else None, float(r["lam"]),
                       float(r["dissimilarity"]), float(r["fold_fraction"]), float(r["magnitude"]), bool(int(r["diverged"])))
            for r in rows
        ]
    except (KeyError, ValueError) as exc:
        raise CommandError(f"{path} is not a sweep.csv ({exc})") from None
    return SweepResult(cells, {})


def cmd_converge(args, cfg: RunConfig) -> int:
    lam = {"icon": cfg.lam_icon, "gradicon": cfg.lam_gradicon}
    source = "config"
    if args.sweep:
        picked = select_matched_lambdas(read_sweep_csv(args.sweep), cfg.fold_target)
        lam = {k: lam[k] if lam[k] is not None else v for k, v in picked.items()}
        source = args.sweep
    if lam["icon"] is None or lam["gradicon"] is None:
        raise CommandError("converge needs matched lambdas: pass --sweep sweep.csv or set lam_icon and lam_gradicon")
    out = _prepare(Path(args.out), cfg)
    train_imgs, holdout, _ = load_corpus(cfg)
    base = cfg.train_config(stages=1)
    res = convergence_compare(ImageCorpus(train_imgs), _evalset(cfg, holdout), base, lam["icon"], lam["gradicon"],
                              cfg.converge_iters, cfg.seed_list("converge_seeds"))
    _write_csv(out / "curves.csv", CONVERGENCE_COLUMNS, res.rows)
    (out / "metrics.csv").write_text(res.final_csv())
    _write_csv(out / "lambdas.csv", ("reg", "lam", "source"), [[k, repr(v), source] for k, v in sorted(lam.items())])
    seeds = cfg.seed_list("converge_seeds")
    print(f"GradICON final 1-LNCC below ICON in {res.wins()} of {len(seeds)} seeds  -> {out}")
    return 0


def cmd_check(args, cfg: RunConfig) -> int:
    out = _prepare(Path(args.out), cfg)
    results = checks.run_all(quick=not args.full)
    table = checks.summary_table(results)
    (out / "metrics.csv").write_text(
        "check,value,threshold,passed,gating\n"
        + "".join(f"\"{r.name}\",{r.value!r},{r.threshold!r},{int(r.passed)},{int(r.gating)}\n" for r in results)
    )
    print(table)
    return 0 if checks.all_passed(results) else 1


_DISPATCH = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "register": cmd_register,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "converge": cmd_converge,
    "check": cmd_check,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if extra:
            where = f"gradicon {args.command}" if args.command else "gradicon"
            raise CommandError(f"unrecognized arguments: {' '.join(extra)} (see '{where} --help')")
        if args.command is None:
            parser.print_help()
            return 2
        cfg = _resolve(args)
        return _DISPATCH[args.command](args, cfg)
    except (CommandError, ConfigError, FormatError, WarpGenerationError) as exc:
        print(f"gradicon: error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"gradicon: error: file not found: {exc.filename}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
