"""MRtrix track file (TCK) reader and writer.

Layout: a text header starting with the magic line ``mrtrix tracks``,
``key: value`` lines, a ``file: . <offset>`` pointer to the binary payload,
and an ``END`` line.  The payload is little-endian float32 triplets; an
all-NaN triplet ends a streamline and an all-Inf triplet ends the stream.

Writing is canonical (sorted header keys, fixed datatype) so identical
tractograms always produce identical bytes.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..core import DEGENERATE_LENGTH_MM, Space, Streamline, Tractogram
from ..errors import (
    FormatError,
    TruncatedFileError,
    UnsupportedDatatypeError,
    UnsupportedVariantError,
)

MAGIC_LINE = "mrtrix tracks"
_DATATYPE = "Float32LE"
_MAX_HEADER_BYTES = 1 << 20


@dataclass(frozen=True)
class TckHeader:
    """Parsed TCK header: raw entries plus the fields the reader needs."""

    entries: dict[str, str]
    datatype: str
    file_offset: int
    declared_count: int | None


def _parse_header(raw: bytes, file_size: int) -> TckHeader:
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"header is not valid UTF-8: {exc}") from None
    lines = text.split("\n")
    if not lines or lines[0].strip() != MAGIC_LINE:
        raise FormatError("missing 'mrtrix tracks' magic line")
    entries: dict[str, str] = {}
    for line in lines[1:]:
        line = line.strip()
        if not line:
            continue
        if line == "END":
            break
        if ":" not in line:
            raise FormatError(f"malformed header line: {line!r}")
        key, value = line.split(":", 1)
        entries[key.strip()] = value.strip()
    else:
        raise FormatError("header has no END line")

    datatype = entries.get("datatype")
    if datatype is None:
        raise FormatError("header lacks a datatype field")
    if datatype != _DATATYPE:
        raise UnsupportedDatatypeError(f"unsupported TCK datatype {datatype!r}")

    file_field = entries.get("file")
    if file_field is None:
        raise FormatError("header lacks a file field")
    parts = file_field.split()
    if len(parts) != 2:
        raise FormatError(f"malformed file field: {file_field!r}")
    if parts[0] != ".":
        raise UnsupportedVariantError("multi-file TCK payloads are not supported")
    try:
        offset = int(parts[1])
    except ValueError:
        raise FormatError(f"non-integer payload offset: {parts[1]!r}") from None
    if offset < 0 or offset > file_size:
        raise FormatError(f"payload offset {offset} outside the file (size {file_size})")

    declared = None
    if "count" in entries:
        try:
            declared = int(entries["count"])
        except ValueError:
            raise FormatError(f"non-integer count field: {entries['count']!r}") from None
        if declared < 0:
            raise FormatError(f"negative count field: {declared}")

    return TckHeader(entries=entries, datatype=datatype, file_offset=offset, declared_count=declared)


def read_tck_header(path: str | Path) -> TckHeader:
    """Parse just the header of a TCK file."""
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as f:
        raw = f.read(min(size, _MAX_HEADER_BYTES))
    end = raw.find(b"END")
    if end < 0:
        raise FormatError("header has no END line")
    # include through the END line's newline when present
    stop = raw.find(b"\n", end)
    stop = len(raw) if stop < 0 else stop + 1
    return _parse_header(raw[:stop], size)


def read_tck(path: str | Path, subject_id: str | None = None, space: Space = Space.SUBJECT) -> Tractogram:
    """Read a TCK file into a tractogram.

    Streamlines shorter than two points or below the degenerate length
    threshold are dropped.  Ids are assigned sequentially in file order.
    """
    path = Path(path)
    header = read_tck_header(path)
    with open(path, "rb") as f:
        f.seek(header.file_offset)
        payload = f.read()

    n_floats = len(payload) // 4
    floats = np.frombuffer(payload[: n_floats * 4], dtype="<f4")
    n_triplets = n_floats // 3
    with np.errstate(invalid="ignore"):
        triplets = floats[: n_triplets * 3].reshape(-1, 3).astype(np.float64)

    nan_rows = np.isnan(triplets).all(axis=1)
    inf_rows = np.isinf(triplets).all(axis=1)
    finite_rows = np.isfinite(triplets).all(axis=1)
    if not np.all(nan_rows | inf_rows | finite_rows):
        raise FormatError("payload triplet mixes finite and sentinel components")

    terminators = np.flatnonzero(inf_rows)
    if len(terminators) == 0:
        raise TruncatedFileError("payload ends before the Inf stream terminator")
    stream_end = terminators[0]

    fibers: list[Streamline] = []
    start = 0
    next_id = 0
    for row in range(stream_end + 1):
        if not (nan_rows[row] or row == stream_end):
            continue
        segment = triplets[start:row]
        start = row + 1
        if len(segment) < 2:
            continue  # empty or degenerate fragment, drop at ingest
        length = np.linalg.norm(np.diff(segment, axis=0), axis=1).sum()
        if length < DEGENERATE_LENGTH_MM:
            continue
        fibers.append(Streamline(segment, id=next_id))
        next_id += 1

    if subject_id is None:
        subject_id = path.stem
    return Tractogram(tuple(fibers), subject_id=subject_id, space=space)


def write_tck(t: Tractogram, path: str | Path) -> None:
    """Write a tractogram canonically; identical input gives identical bytes."""
    path = Path(path)
    prefix = f"{MAGIC_LINE}\ncount: {len(t)}\ndatatype: {_DATATYPE}\n"
    # The offset names a byte position that depends on its own digit count;
    # iterate until the value is consistent.
    offset = len(prefix) + len("file: . \nEND\n") + 1
    while True:
        tail = f"file: . {offset}\nEND\n"
        if len(prefix) + len(tail) == offset:
            break
        offset = len(prefix) + len(tail)

    buf = io.BytesIO()
    buf.write(prefix.encode("ascii"))
    buf.write(f"file: . {offset}\nEND\n".encode("ascii"))
    nan_row = np.full((1, 3), np.nan, dtype="<f4")
    for s in t:
        buf.write(np.ascontiguousarray(s.points, dtype="<f4").tobytes())
        buf.write(nan_row.tobytes())
    buf.write(np.full((1, 3), np.inf, dtype="<f4").tobytes())
    path.write_bytes(buf.getvalue())
