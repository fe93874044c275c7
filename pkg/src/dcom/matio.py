"""Matrix file formats: binary ``DCM1`` and plain CSV."""
from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .linalg import as_matrix

MAGIC = b"DCM1"
_HEADER = struct.Struct("<4sII")


def write_dcm(path, a) -> None:
    a = as_matrix(a)
    rows, cols = a.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, rows, cols))
        fh.write(a.astype("<f4", copy=False).tobytes(order="C"))


def read_dcm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size or raw[:4] != MAGIC:
        raise ValidationError(f"{path}: not a DCM1 file")
    _, rows, cols = _HEADER.unpack_from(raw)
    payload = raw[_HEADER.size:]
    if len(payload) != 4 * rows * cols:
        raise ValidationError(
            f"{path}: expected {rows}x{cols} payload of {4 * rows * cols} bytes, got {len(payload)}"
        )
    a = np.frombuffer(payload, dtype="<f4").reshape(rows, cols)
    return as_matrix(a, name=str(path))


def read_csv_matrix(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [[float(x) for x in row] for row in csv.reader(fh) if row]
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise ValidationError(f"{path}: ragged rows (widths {sorted(widths)})")
    if not rows:
        raise ValidationError(f"{path}: empty matrix file")
    return as_matrix(rows, name=str(path))


def write_csv_matrix(path, a) -> None:
    a = as_matrix(a)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in a:
            w.writerow([repr(float(x)) for x in row])


def load_matrix(path) -> np.ndarray:
    """Read a matrix, dispatching on the DCM1 magic bytes and falling back to CSV."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == MAGIC:
        return read_dcm(path)
    return read_csv_matrix(path)


def save_matrix(path, a) -> None:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        write_csv_matrix(path, a)
    else:
        write_dcm(path, a)
