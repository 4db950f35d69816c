"""Raster readers (IDX, PGM) and the CSV artifact formats."""

from __future__ import annotations

import csv
import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .measures import EmpiricalMeasure, GridMeasure, GridSpec
from .signals import ControlSignal, Partition

_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Read an IDX file (MNIST layout: 0x0000, type byte, ndim byte, big-endian dims)."""
    with _open(path) as fh:
        header = fh.read(4)
        if len(header) != 4 or header[:2] != b"\x00\x00":
            raise ValidationError(f"{path}: not an IDX file")
        dtype = _IDX_TYPES.get(header[2])
        if dtype is None:
            raise ValidationError(f"{path}: unknown IDX element type 0x{header[2]:02x}")
        ndim = header[3]
        dims = struct.unpack(f">{ndim}I", fh.read(4 * ndim))
        data = np.frombuffer(fh.read(), dtype=dtype)
    if data.size != int(np.prod(dims)):
        raise ValidationError(f"{path}: expected {int(np.prod(dims))} values, found {data.size}")
    return data.reshape(dims)


def write_idx(path, array) -> None:
    """Write a uint8 array as IDX (``idx3-ubyte`` for a stack of images)."""
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise ValidationError("write_idx only writes unsigned bytes")
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, 0x08, arr.ndim]))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary 8-bit PGM (P5) image as a uint8 array."""
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValidationError(f"{path}: truncated PGM header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace byte before the raster
    if fields[0] != b"P5":
        raise ValidationError(f"{path}: only binary P5 PGM is supported")
    width, height, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValidationError(f"{path}: only 8-bit PGM (maxval 255) is supported")
    data = np.frombuffer(raw[pos:pos + width * height], dtype=np.uint8)
    if data.size != width * height:
        raise ValidationError(f"{path}: raster is truncated")
    return data.reshape(height, width)


def write_pgm(path, image) -> None:
    img = np.asarray(image, dtype=np.uint8)
    height, width = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode())
        fh.write(img.tobytes())


def load_raster(path, index: int = 0) -> np.ndarray:
    """Grayscale raster with intensities in [0, 1]; ``index`` picks an image from an IDX stack."""
    name = str(path).lower()
    if name.endswith(".pgm"):
        img = read_pgm(path)
    else:
        data = read_idx(path)
        if data.ndim == 3:
            if not 0 <= index < data.shape[0]:
                raise ValidationError(f"{path}: image index {index} out of range 0..{data.shape[0] - 1}")
            img = data[index]
        elif data.ndim == 2:
            img = data
        else:
            raise ValidationError(f"{path}: expected 2-D or 3-D IDX data, got {data.ndim}-D")
    return np.asarray(img, dtype=float) / 255.0


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def write_rows(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, (int, np.integer)) and not isinstance(v, bool) else _fmt(v)
                        for v in row])
    return path


def write_grid_csv(path, spec: GridSpec, values) -> Path:
    """``a,b,value`` rows over cell centers, row-major (``a`` outer, ``b`` inner)."""
    vals = np.asarray(values.density if isinstance(values, GridMeasure) else values, dtype=float)
    pts = spec.center_points
    return write_rows(path, ["a", "b", "value"], zip(pts[:, 0], pts[:, 1], vals.ravel()))


def read_grid_csv(path, spec: GridSpec) -> GridMeasure:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape != (spec.shape[0] * spec.shape[1], 3):
        raise ValidationError(f"{path}: expected {spec.shape[0] * spec.shape[1]} rows of a,b,value")
    if not np.allclose(data[:, :2], spec.center_points, rtol=0, atol=1e-9 * (1 + np.abs(spec.h).max())):
        raise ValidationError(f"{path}: cell centers do not match the scenario grid")
    return GridMeasure(spec, data[:, 2].reshape(spec.shape))


def write_empirical_csv(path, m: EmpiricalMeasure) -> Path:
    header = [f"x{k + 1}" for k in range(m.dim)] + ["weight"]
    return write_rows(path, header, (list(p) + [w] for p, w in zip(m.points, m.weights)))


def read_empirical_csv(path) -> EmpiricalMeasure:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] < 2:
        raise ValidationError(f"{path}: expected columns x1..xn,weight")
    w = data[:, -1]
    if np.any(w < 0) or w.sum() <= 0:
        raise ValidationError(f"{path}: weights must be nonnegative with positive sum")
    return EmpiricalMeasure(data[:, :-1], w / w.sum())


def write_control_csv(path, signal: ControlSignal) -> Path:
    header = ["t_start", "t_end"] + [f"u{k + 1}" for k in range(signal.m)]
    return write_rows(path, header, signal.rows())


def read_control_csv(path) -> ControlSignal:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] < 3:
        raise ValidationError(f"{path}: expected columns t_start,t_end,u1..um")
    starts, ends = data[:, 0], data[:, 1]
    if not np.allclose(starts[1:], ends[:-1], rtol=0, atol=1e-12):
        raise ValidationError(f"{path}: control cells are not contiguous")
    return ControlSignal(Partition(np.append(starts, ends[-1])), data[:, 2:])
