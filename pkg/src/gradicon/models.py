"""Registration predictors and the operators that combine them.

A predictor is called as ``model(source, target)`` on batched images and
returns a :class:`~gradicon.geometry.TransformMap`.  Displacements are kept
in normalized domain coordinates at every resolution, so a map predicted
from pooled images applies unchanged to the full-resolution domain.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autodiff import ShapeError, Tensor, as_tensor, avg_pool2, concat, conv2d, leaky_relu, upsample2
from .geometry import FieldMap, Identity, TransformMap, compose, resample_image

__all__ = [
    "UNetSpec",
    "RegistrationModel",
    "IdentityPredictor",
    "DirectField",
    "UNet",
    "Down",
    "TwoStep",
    "build_stage1",
    "build_stage2",
    "stage_atoms",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class UNetSpec:
    """Small 2D UNet: ``levels`` resolutions, channels doubling per level."""

    levels: int = 3
    base_channels: int = 16
    slope: float = 0.2
    dim: int = 2

    def __post_init__(self):
        if self.levels < 1 or self.base_channels < 1:
            raise ValueError("UNetSpec needs levels >= 1 and base_channels >= 1")
        if self.dim != 2:
            raise ValueError("only 2D networks are implemented")


class RegistrationModel:
    kind = "base"

    def __call__(self, source, target) -> TransformMap:
        raise NotImplementedError

    def parameters(self) -> list:
        return []

    def children(self) -> list:
        return []

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def spec(self) -> dict:
        return {"kind": self.kind}


def _unique(params) -> list:
    seen, out = set(), []
    for p in params:
        if id(p) not in seen:
            seen.add(id(p))
            out.append(p)
    return out


def _check_pair(source: Tensor, target: Tensor) -> None:
    if source.shape != target.shape:
        raise ShapeError(f"source {source.shape} and target {target.shape} differ")


class IdentityPredictor(RegistrationModel):
    kind = "identity"

    def __call__(self, source, target) -> TransformMap:
        _check_pair(as_tensor(source), as_tensor(target))
        return Identity()


class DirectField(RegistrationModel):
    """A displacement field held as a parameter; inputs only fix the batch.

    ``displacement`` has shape (N, d, *S).  Inside the symmetric loss the
    first half of the batch plays the A->B maps and the second half B->A.
    """

    kind = "direct_field"

    def __init__(self, displacement):
        self.displacement = Tensor(np.array(displacement, dtype=np.float64), requires_grad=True)

    def __call__(self, source, target) -> TransformMap:
        source, target = as_tensor(source), as_tensor(target)
        _check_pair(source, target)
        if source.shape[0] != self.displacement.shape[0]:
            raise ShapeError(
                f"direct field holds {self.displacement.shape[0]} maps, got a batch of {source.shape[0]}"
            )
        return FieldMap(self.displacement)

    def parameters(self) -> list:
        return [self.displacement]

    def spec(self) -> dict:
        return {"kind": self.kind, "shape": list(self.displacement.shape)}


class _Conv:
    def __init__(self, cin: int, cout: int, rng, zero: bool = False):
        if zero:
            w = np.zeros((cout, cin, 3, 3))
        else:
            w = rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / (cin * 9))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros((1, cout, 1, 1)), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, pad=1) + self.bias

    def parameters(self) -> list:
        return [self.weight, self.bias]


class UNet(RegistrationModel):
    """Atomic predictor: UNet on the channel-concatenated pair, output a displacement.

    Encoder level ``l`` applies two 3x3 convolutions with
    ``base_channels * 2**l`` channels; 2x2 average pooling between levels,
    nearest-neighbour upsampling with concatenated skips on the way back.
    The final 3x3 convolution is zero-initialized, so a fresh network
    predicts the identity map.

    ``shape_log``, when set to a list, records the spatial shape of every
    call; used to check at which resolution each atom runs.
    """

    kind = "unet"

    def __init__(self, spec: UNetSpec = UNetSpec(), seed: int = 0):
        self.unet_spec = spec
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        ch = [spec.base_channels * 2**l for l in range(spec.levels)]
        self.enc = []
        cin = 2
        for c in ch:
            self.enc.append((_Conv(cin, c, rng), _Conv(c, c, rng)))
            cin = c
        self.dec = []
        for l in range(spec.levels - 2, -1, -1):
            self.dec.append(_Conv(ch[l + 1] + ch[l], ch[l], rng))
        self.head = _Conv(ch[0], spec.dim, rng, zero=True)
        self.shape_log: list | None = None

    def _layers(self) -> list:
        layers = [conv for pair in self.enc for conv in pair]
        return layers + self.dec + [self.head]

    def parameters(self) -> list:
        return [p for layer in self._layers() for p in layer.parameters()]

    def displacement(self, source, target) -> Tensor:
        source, target = as_tensor(source), as_tensor(target)
        _check_pair(source, target)
        spatial = source.shape[2:]
        factor = 2 ** (self.unet_spec.levels - 1)
        if any(s % factor for s in spatial):
            raise ShapeError(f"UNet with {self.unet_spec.levels} levels needs extents divisible by {factor}, got {spatial}")
        if self.shape_log is not None:
            self.shape_log.append(tuple(spatial))
        slope = self.unet_spec.slope
        x = concat([source, target], axis=1)
        skips = []
        for l, (c1, c2) in enumerate(self.enc):
            if l:
                x = avg_pool2(x)
            x = leaky_relu(c2(leaky_relu(c1(x), slope)), slope)
            skips.append(x)
        for conv, skip in zip(self.dec, reversed(skips[:-1])):
            x = leaky_relu(conv(concat([upsample2(x), skip], axis=1)), slope)
        return self.head(x)

    def __call__(self, source, target) -> TransformMap:
        return FieldMap(self.displacement(source, target))

    def spec(self) -> dict:
        return {"kind": self.kind, "unet": asdict(self.unet_spec), "seed": self.seed}


class Down(RegistrationModel):
    """Run ``inner`` on 2x average-pooled inputs; its map acts on the full domain."""

    kind = "down"

    def __init__(self, inner: RegistrationModel):
        self.inner = inner

    def __call__(self, source, target) -> TransformMap:
        source, target = as_tensor(source), as_tensor(target)
        _check_pair(source, target)
        if any(s % 2 for s in source.shape[2:]):
            raise ShapeError(f"Down needs even extents, got {source.shape[2:]}")
        return self.inner(avg_pool2(source), avg_pool2(target))

    def parameters(self) -> list:
        return self.inner.parameters()

    def children(self) -> list:
        return [self.inner]

    def spec(self) -> dict:
        return {"kind": self.kind, "inner": self.inner.spec()}


class TwoStep(RegistrationModel):
    """``first`` captures the coarse map, ``second`` the residual on the warped source.

    Returns ``phi o psi`` where ``phi = first(A, B)`` and
    ``psi = second(A o phi, B)``.
    """

    kind = "twostep"

    def __init__(self, first: RegistrationModel, second: RegistrationModel):
        self.first = first
        self.second = second

    def __call__(self, source, target) -> TransformMap:
        source, target = as_tensor(source), as_tensor(target)
        phi = self.first(source, target)
        warped = source if isinstance(phi, Identity) else resample_image(source, phi)
        psi = self.second(warped, target)
        return compose(phi, psi)

    def parameters(self) -> list:
        return _unique(self.first.parameters() + self.second.parameters())

    def children(self) -> list:
        return [self.first, self.second]

    def spec(self) -> dict:
        return {"kind": self.kind, "first": self.first.spec(), "second": self.second.spec()}


def build_stage1(psi1: RegistrationModel, psi2: RegistrationModel, psi3: RegistrationModel) -> TwoStep:
    """``TS{Down{TS{Down{psi1}, psi2}}, psi3}``: psi1 at 1/4, psi2 at 1/2, psi3 at full resolution."""
    return TwoStep(Down(TwoStep(Down(psi1), psi2)), psi3)


def build_stage2(stage1: RegistrationModel, psi4: RegistrationModel) -> TwoStep:
    """``TS{stage1, psi4}``; training it updates stage1 and psi4 jointly."""
    return TwoStep(stage1, psi4)


def stage_atoms(model: RegistrationModel) -> list:
    """Atomic predictors in evaluation order."""
    kids = model.children()
    if not kids:
        return [model]
    return [atom for k in kids for atom in stage_atoms(k)]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"GICKPT01"


def _from_spec(spec: dict) -> RegistrationModel:
    kind = spec["kind"]
    if kind == "identity":
        return IdentityPredictor()
    if kind == "direct_field":
        return DirectField(np.zeros(spec["shape"]))
    if kind == "unet":
        return UNet(UNetSpec(**spec["unet"]), seed=spec["seed"])
    if kind == "down":
        return Down(_from_spec(spec["inner"]))
    if kind == "twostep":
        return TwoStep(_from_spec(spec["first"]), _from_spec(spec["second"]))
    raise ValueError(f"unknown model kind {kind!r} in checkpoint")


def save_checkpoint(model: RegistrationModel, path, meta: dict | None = None) -> None:
    """Write a JSON header (model tree, parameter shapes, ``meta``) and a float64 blob."""
    params = model.parameters()
    header = {
        "model": model.spec(),
        "shapes": [list(p.shape) for p in params],
        "meta": meta or {},
    }
    blob = io.BytesIO()
    for p in params:
        blob.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(blob.getvalue())


def load_checkpoint(path) -> tuple:
    """Return ``(model, meta)``; parameters come back bit-identical."""
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    model = _from_spec(header["model"])
    params = model.parameters()
    shapes = [tuple(s) for s in header["shapes"]]
    if [p.shape for p in params] != shapes:
        raise ValueError(f"{path}: parameter shapes do not match the model tree")
    offset = 16 + hlen
    for p, shape in zip(params, shapes):
        count = int(np.prod(shape))
        p.data = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        p.zero_grad()
        offset += 8 * count
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes after parameter blob")
    return model, header["meta"]
