"""File formats: 16-bit PGM images, landmark CSV, displacement fields as CSV or raw."""

from __future__ import annotations

import csv
import re
import struct
from pathlib import Path

import numpy as np

from .synthdata import LandmarkSet

__all__ = [
    "FormatError",
    "save_pgm",
    "load_pgm",
    "save_landmarks",
    "load_landmarks",
    "save_field_csv",
    "load_field_csv",
    "save_field_raw",
    "load_field_raw",
]

_RAW_MAGIC = b"GDF1"
_RAW_AXES = 5


class FormatError(ValueError):
    pass


def _plane(image) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    arr = arr.reshape(arr.shape[-2:]) if arr.ndim > 2 and int(np.prod(arr.shape[:-2])) == 1 else arr
    if arr.ndim != 2:
        raise FormatError(f"PGM holds a single 2D plane, got shape {np.shape(image)}")
    return arr


def save_pgm(path, image) -> None:
    """Binary P5 with maxval 65535; values are clipped to [0, 1] and rounded."""
    arr = _plane(image)
    q = np.round(np.clip(arr, 0.0, 1.0) * 65535.0).astype(">u2")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(q.tobytes())


_PGM_HEADER = re.compile(rb"P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def load_pgm(path, expected_shape=None) -> np.ndarray:
    """Read a P5 PGM (8- or 16-bit) as floats in [0, 1], shape (H, W)."""
    raw = Path(path).read_bytes()
    m = _PGM_HEADER.match(raw)
    if not m:
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(g) for g in m.groups())
    if not 0 < maxval < 65536:
        raise FormatError(f"{path}: maxval {maxval} out of range")
    dtype = ">u2" if maxval > 255 else "u1"
    count = w * h
    body = raw[m.end() :]
    if len(body) != count * np.dtype(dtype).itemsize:
        raise FormatError(f"{path}: expected {count} pixels for {w}x{h}, file holds {len(body)} bytes")
    arr = np.frombuffer(body, dtype=dtype).reshape(h, w).astype(np.float64) / maxval
    if expected_shape is not None and tuple(expected_shape) != arr.shape:
        raise FormatError(f"{path}: image is {arr.shape}, expected {tuple(expected_shape)}")
    return arr


def save_landmarks(path, landmarks: LandmarkSet) -> None:
    """CSV with header ``xA,yA,xB,yB`` and 17 significant digits."""
    if landmarks.points_a.shape[1] != 2:
        raise FormatError("landmark CSV stores 2D points")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["xA", "yA", "xB", "yB"])
        for pa, pb in zip(landmarks.points_a, landmarks.points_b):
            writer.writerow([f"{v:.17g}" for v in (*pa, *pb)])


def load_landmarks(path) -> LandmarkSet:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["xA", "yA", "xB", "yB"]:
        raise FormatError(f"{path}: missing landmark header xA,yA,xB,yB")
    try:
        vals = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if vals.size == 0 or vals.shape[1] != 4:
        raise FormatError(f"{path}: landmark rows must have 4 values")
    return LandmarkSet(vals[:, :2], vals[:, 2:])


def _field_array(field) -> np.ndarray:
    arr = np.asarray(field, dtype=np.float64)
    if arr.ndim >= 3 and arr.shape[0] == 1 and arr.shape[1] == arr.ndim - 2:
        arr = arr[0]
    if arr.ndim < 2 or arr.shape[0] != arr.ndim - 1:
        raise FormatError(f"field must be (d, *S) with d spatial axes, got {np.shape(field)}")
    return arr


def save_field_csv(path, field) -> None:
    """First line ``shape,d,n0,...``; then one row of ``d`` components per pixel, row-major."""
    arr = _field_array(field)
    d = arr.shape[0]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["shape", *arr.shape])
        for row in arr.reshape(d, -1).T:
            writer.writerow([f"{v:.17g}" for v in row])


def load_field_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "shape":
        raise FormatError(f"{path}: first line must be 'shape,d,n0,...'")
    shape = tuple(int(v) for v in rows[0][1:])
    body = rows[1:]
    if len(body) != int(np.prod(shape[1:])) or any(len(r) != shape[0] for r in body):
        raise FormatError(f"{path}: body does not match declared shape {shape}")
    return np.array(body, dtype=np.float64).T.reshape(shape)


def save_field_raw(path, field) -> None:
    """16-byte header (magic, uint16 d, 5 uint16 extents) then little-endian float64."""
    arr = _field_array(field)
    d = arr.shape[0]
    extents = list(arr.shape[1:])
    if d > _RAW_AXES or max(extents) > 65535:
        raise FormatError("raw field supports at most 5 axes of extent <= 65535")
    header = _RAW_MAGIC + struct.pack("<6H", d, *(extents + [0] * (_RAW_AXES - d)))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_field_raw(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != _RAW_MAGIC:
        raise FormatError(f"{path}: not a raw field file (bad magic)")
    vals = struct.unpack("<6H", raw[4:16])
    d, extents = vals[0], vals[1 : 1 + vals[0]]
    if d < 1 or any(e == 0 for e in extents):
        raise FormatError(f"{path}: malformed header")
    shape = (d,) + tuple(extents)
    count = int(np.prod(shape))
    if len(raw) - 16 != 8 * count:
        raise FormatError(f"{path}: expected {count} values for shape {shape}")
    return np.frombuffer(raw, dtype="<f8", offset=16).reshape(shape).astype(np.float64)
