"""Point cloud file I/O.

Two formats, selected by extension:

* ``.xyz``   text, one point per line, three reals separated by single
             spaces, newline terminated, no header.
* ``.pcb``   binary, magic ``PCC1``, then the point count as unsigned
             32-bit little-endian, then count*3 IEEE-754 float32
             little-endian values in x,y,z order. A count of 0 is invalid.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CloudFormatError

MAGIC = b"PCC1"


def _check_cloud(points: np.ndarray, where: str) -> np.ndarray:
    points = np.asarray(points)
    if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] < 1:
        raise ValueError(f"{where}: expected a nonempty (n, 3) cloud, got shape {points.shape}")
    if not np.all(np.isfinite(points)):
        raise ValueError(f"{where}: cloud contains non-finite coordinates")
    return points


def write_xyz(points: np.ndarray, path) -> None:
    points = _check_cloud(points, "write_xyz")
    with open(path, "w", encoding="ascii") as fh:
        for x, y, z in points:
            fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")


def read_xyz(path) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            parts = stripped.split()
            if len(parts) != 3:
                raise CloudFormatError(
                    f"{path}: line {lineno}: expected 3 values, got {len(parts)}")
            try:
                row = [float(v) for v in parts]
            except ValueError:
                raise CloudFormatError(
                    f"{path}: line {lineno}: unparseable coordinate") from None
            if not all(np.isfinite(row)):
                raise CloudFormatError(f"{path}: line {lineno}: non-finite coordinate")
            rows.append(row)
    if not rows:
        raise CloudFormatError(f"{path}: empty cloud")
    return np.asarray(rows, dtype=np.float64)


def write_pcb(points: np.ndarray, path) -> None:
    points = _check_cloud(points, "write_pcb")
    payload = np.ascontiguousarray(points, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", points.shape[0]))
        fh.write(payload.tobytes())


def read_pcb(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise CloudFormatError(f"{path}: truncated header ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise CloudFormatError(f"{path}: bad magic {blob[:4]!r} at byte 0")
    (count,) = struct.unpack_from("<I", blob, 4)
    if count == 0:
        raise CloudFormatError(f"{path}: point count 0 at byte 4 is invalid")
    expected = 8 + count * 12
    if len(blob) != expected:
        raise CloudFormatError(
            f"{path}: payload is {len(blob) - 8} bytes at byte 8, expected {count * 12}")
    pts = np.frombuffer(blob, dtype="<f4", offset=8).reshape(count, 3)
    if not np.all(np.isfinite(pts)):
        raise CloudFormatError(f"{path}: non-finite coordinate in payload")
    return np.array(pts, dtype=np.float32)


def read_cloud(path) -> np.ndarray:
    """Read a cloud, dispatching on the file extension."""
    suffix = Path(path).suffix.lower()
    if suffix == ".xyz":
        return read_xyz(path)
    if suffix == ".pcb":
        return read_pcb(path)
    raise CloudFormatError(f"{path}: unknown cloud extension {suffix!r} (use .xyz or .pcb)")


def write_cloud(points: np.ndarray, path) -> None:
    """Write a cloud, dispatching on the file extension."""
    suffix = Path(path).suffix.lower()
    if suffix == ".xyz":
        write_xyz(points, path)
    elif suffix == ".pcb":
        write_pcb(points, path)
    else:
        raise CloudFormatError(f"{path}: unknown cloud extension {suffix!r} (use .xyz or .pcb)")
