"""Flat ``key = value`` run configuration for the command line tools.

Lines are ``key = value``; ``#`` starts a comment; blank lines are
ignored.  Every key must be one of the fields of :class:`RunConfig`.
Unknown keys, malformed lines and out-of-range values raise
:class:`ConfigError` with the line number and a suggested fix.
"""

from __future__ import annotations

import difflib
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .losses import REGULARIZERS, RegularizerConfig, SimilarityConfig
from .models import UNetSpec
from .synthdata import ElasticWarpSpec
from .training import AugmentConfig, TrainConfig

__all__ = ["ConfigError", "RunConfig", "parse_config", "load_config", "echo"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Every setting a command can read; defaults are the desk-scale protocol."""

    # data
    data: str = ""  # directory of PGM images; empty means generate shapes
    size: int = 64
    images: int = 200
    holdout: int = 40
    data_seed: int = 0
    pairs_per_image: int = 1
    elastic_control: int = 5
    elastic_std: float = 0.03
    landmarks: int = 100
    # training
    seed: int = 0
    iters: int = 2000
    stages: int = 2
    batch: int = 2
    lr: float = 5e-4
    lam: float | None = None
    reg: str = "gradicon"
    sim: str = "lncc"
    dx: float = 1e-3
    levels: int = 3
    base_channels: int = 8
    augment: bool = False
    gamma: float = 0.05
    log_every: int = 10
    fold_every: int = 100
    # evaluation and test-time refinement
    eval_pairs: int = 8
    instance_iters: int = 50
    instance_lr: float = 5e-4
    noise_pairs: int = 0
    # lambda sweep and convergence comparison
    regularizers: str = ",".join(REGULARIZERS)
    sweep_iters: int = 500
    sweep_span: int = 6
    sweep_seeds: str = "0"
    probe_iters: int = 200
    probe_max: int = 6
    probe_lo: float = 1e-3
    probe_hi: float = 1e5
    fold_target: float = 1e-4
    lam0_icon: float | None = None
    lam0_gradicon: float | None = None
    lam0_bending: float | None = None
    lam0_diffusion: float | None = None
    converge_iters: int = 2000
    converge_seeds: str = "0,1,2"
    lam_icon: float | None = None
    lam_gradicon: float | None = None

    def __post_init__(self):
        positive = ("size", "images", "iters", "batch", "levels", "base_channels", "log_every", "fold_every",
                    "eval_pairs", "sweep_iters", "probe_iters", "probe_max", "converge_iters", "pairs_per_image",
                    "elastic_control", "landmarks")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1, got {getattr(self, name)}")
        for name in ("holdout", "instance_iters", "noise_pairs", "sweep_span"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.stages not in (1, 2):
            raise ConfigError(f"stages must be 1 or 2, got {self.stages}")
        if self.reg not in REGULARIZERS:
            raise ConfigError(f"reg must be one of {', '.join(REGULARIZERS)}, got {self.reg!r}")
        if self.sim not in ("mse", "lncc"):
            raise ConfigError(f"sim must be mse or lncc, got {self.sim!r}")
        bad = [r for r in self.regularizer_list() if r not in REGULARIZERS]
        if bad:
            raise ConfigError(f"regularizers: unknown {', '.join(bad)}; choose from {', '.join(REGULARIZERS)}")
        for name in ("lr", "dx", "instance_lr", "fold_target", "probe_lo"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.gamma < 0 or self.elastic_std < 0:
            raise ConfigError("gamma and elastic_std must be non-negative")
        for name in ("lam", "lam0_icon", "lam0_gradicon", "lam0_bending", "lam0_diffusion", "lam_icon", "lam_gradicon"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ConfigError(f"{name} must be non-negative, got {value}")
        if not self.probe_hi > self.probe_lo:
            raise ConfigError(f"probe_hi ({self.probe_hi}) must exceed probe_lo ({self.probe_lo})")
        # the coarsest atom sees size / 4 and pools levels - 1 more times
        step = 2 ** (self.levels + 1)
        if self.size % step:
            raise ConfigError(f"size {self.size} must be divisible by {step} for {self.levels} UNet levels")
        if self.holdout >= self.images:
            raise ConfigError(f"holdout ({self.holdout}) must be smaller than images ({self.images})")
        for name in ("sweep_seeds", "converge_seeds"):
            _int_list(name, getattr(self, name))

    def regularizer_list(self) -> list:
        return [r.strip() for r in self.regularizers.split(",") if r.strip()]

    def seed_list(self, name: str) -> list:
        return _int_list(name, getattr(self, name))

    def lam0(self) -> dict:
        """Per-regularizer lambda0 overrides (missing ones are calibrated)."""
        out = {}
        for reg in REGULARIZERS:
            value = getattr(self, f"lam0_{reg}")
            if value is not None:
                out[reg] = value
        return out

    def train_config(self, **overrides) -> TrainConfig:
        base = dict(
            lam=self.lam,
            lr=self.lr,
            iters_per_stage=self.iters,
            batch=self.batch,
            seed=self.seed,
            augment=self.augment,
            augment_cfg=AugmentConfig(gamma=self.gamma),
            sim=SimilarityConfig(self.sim),
            reg=RegularizerConfig(kind=self.reg, dx=self.dx),
            unet=UNetSpec(levels=self.levels, base_channels=self.base_channels),
            stages=self.stages,
            log_every=self.log_every,
            fold_every=self.fold_every,
        )
        base.update(overrides)
        return TrainConfig(**base)

    def warp_spec(self) -> ElasticWarpSpec:
        return ElasticWarpSpec(control=self.elastic_control, std=self.elastic_std, landmarks=self.landmarks)


def _int_list(name: str, text: str) -> list:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{name} must be a comma separated list of integers, got {text!r}") from None
    if not values:
        raise ConfigError(f"{name} must list at least one seed")
    return values


_FIELDS = {f.name: f for f in fields(RunConfig)}
_ALIASES = {"lambda": "lam"}
_TYPES = {f.name: type(RunConfig.__dataclass_fields__[f.name].default) for f in fields(RunConfig)}
_OPTIONAL_FLOATS = {"lam", "lam0_icon", "lam0_gradicon", "lam0_bending", "lam0_diffusion", "lam_icon", "lam_gradicon"}


def _convert(key: str, text: str):
    if key in _OPTIONAL_FLOATS:
        if text.lower() in ("", "none", "auto"):
            return None
        return float(text)
    kind = _TYPES[key]
    if kind is bool:
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected true or false, got {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def _canonical(key: str) -> str:
    return _ALIASES.get(key, key)


def _parse_value(raw_key: str, value, where: str) -> tuple:
    key = _canonical(raw_key)
    if key not in _FIELDS:
        hint = difflib.get_close_matches(raw_key, list(_FIELDS) + list(_ALIASES), n=1)
        more = f"; did you mean {hint[0]!r}?" if hint else ""
        raise ConfigError(f"{where}: unknown key {raw_key!r}{more}")
    if isinstance(value, str):
        try:
            value = _convert(key, value.strip())
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {raw_key}: {exc}") from None
    return key, value


def set_values(cfg: RunConfig, values: dict, where: str = "override") -> RunConfig:
    """Apply ``{key: text-or-value}`` to ``cfg`` with the same checks as the file parser."""
    changes = dict(_parse_value(k, v, where) for k, v in values.items())
    try:
        return replace(cfg, **changes)
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    changes, seen = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {body!r}")
        raw_key, text_value = (s.strip() for s in body.split("=", 1))
        key, value = _parse_value(raw_key, text_value, f"{source}:{lineno}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: {raw_key!r} already set on line {seen[key]}")
        seen[key] = lineno
        changes[key] = value
    return set_values(RunConfig(), changes, source)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found; pass an existing file to --config")
    return parse_config(path.read_text(), str(path))


def _format(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def echo(cfg: RunConfig) -> str:
    """Resolved configuration, one ``key = value`` per field; parses back to ``cfg``."""
    lines = []
    for f in fields(cfg):
        key = "lambda" if f.name == "lam" else f.name
        lines.append(f"{key} = {_format(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"
