"""Fixed binary container for 2-D float matrices.

Layout: magic ``NATLMAT1``, then rows and cols as unsigned 64-bit
little-endian, then row-major float32 little-endian payload.  Small,
endian-pinned, and byte-deterministic, which keeps manifest checksums
meaningful.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError, InvalidGeometryError, TruncatedFileError

MAGIC = b"NATLMAT1"
_HEADER = struct.Struct("<8sQQ")


def write_matrix(path: str | Path, matrix: np.ndarray) -> None:
    m = np.asarray(matrix, dtype=np.float32)
    if m.ndim != 2:
        raise InvalidGeometryError(f"matrix blob wants a 2-D array, got shape {m.shape}")
    if np.isnan(m).any():
        raise InvalidGeometryError("matrix contains NaN entries")
    payload = np.ascontiguousarray(m, dtype="<f4").tobytes()
    Path(path).write_bytes(_HEADER.pack(MAGIC, m.shape[0], m.shape[1]) + payload)


def read_matrix(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedFileError("file shorter than the matrix blob header")
    magic, rows, cols = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad matrix blob magic {magic!r}")
    if rows > (1 << 40) or cols > (1 << 40):
        raise FormatError(f"implausible matrix shape ({rows}, {cols})")
    need = _HEADER.size + rows * cols * 4
    if len(raw) < need:
        raise TruncatedFileError(f"payload needs {need} bytes, file has {len(raw)}")
    if len(raw) > need:
        raise FormatError(f"trailing bytes after payload ({len(raw) - need})")
    flat = np.frombuffer(raw, dtype="<f4", count=rows * cols, offset=_HEADER.size)
    return flat.reshape(rows, cols).astype(np.float32)
