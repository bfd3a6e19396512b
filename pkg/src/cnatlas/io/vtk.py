"""Legacy ASCII VTK polydata reader and writer (POINTS and LINES only).

This covers the interchange flavour used by tractography cluster tooling:
one POINTS block, one LINES block, nothing else.  Binary VTK and the XML
formats are rejected, not parsed.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..core import DEGENERATE_LENGTH_MM, Space, Streamline, Tractogram
from ..errors import FormatError, TruncatedFileError, UnsupportedVariantError


def _tokens(text: str, start_line: int):
    for line in text.split("\n")[start_line:]:
        for tok in line.split():
            yield tok


def read_vtk_polydata(
    path: str | Path, subject_id: str | None = None, space: Space = Space.SUBJECT
) -> Tractogram:
    path = Path(path)
    try:
        text = path.read_bytes().decode("ascii")
    except UnicodeDecodeError:
        raise UnsupportedVariantError("file is not ASCII; binary VTK is not supported") from None

    lines = text.split("\n")
    if len(lines) < 4:
        raise TruncatedFileError("file ends inside the VTK preamble")
    if not lines[0].startswith("# vtk DataFile Version"):
        raise FormatError("missing VTK version line")
    mode = lines[2].strip().upper()
    if mode == "BINARY":
        raise UnsupportedVariantError("binary VTK is not supported")
    if mode != "ASCII":
        raise FormatError(f"unknown VTK mode {lines[2].strip()!r}")
    if lines[3].split() != ["DATASET", "POLYDATA"]:
        raise FormatError("expected DATASET POLYDATA")

    toks = _tokens(text, 4)

    def take(what: str) -> str:
        try:
            return next(toks)
        except StopIteration:
            raise TruncatedFileError(f"file ends before {what}") from None

    def take_int(what: str) -> int:
        tok = take(what)
        try:
            return int(tok)
        except ValueError:
            raise FormatError(f"expected integer for {what}, got {tok!r}") from None

    def take_float(what: str) -> float:
        tok = take(what)
        try:
            return float(tok)
        except ValueError:
            raise FormatError(f"expected number for {what}, got {tok!r}") from None

    key = take("POINTS section")
    if key != "POINTS":
        raise FormatError(f"expected POINTS section, got {key!r}")
    n_points = take_int("point count")
    if n_points < 0:
        raise FormatError("negative point count")
    dtype = take("point datatype")
    if dtype not in ("float", "double"):
        raise UnsupportedVariantError(f"unsupported POINTS datatype {dtype!r}")
    pts = np.empty((n_points, 3), dtype=np.float64)
    for i in range(n_points):
        for k in range(3):
            pts[i, k] = take_float("point coordinate")
    if not np.isfinite(pts).all():
        raise FormatError("points contain non-finite coordinates")

    key = take("LINES section")
    if key != "LINES":
        raise FormatError(f"expected LINES section, got {key!r}")
    n_lines = take_int("line count")
    n_ints = take_int("connectivity size")
    if n_lines < 0 or n_ints < 0:
        raise FormatError("negative LINES counts")

    fibers: list[Streamline] = []
    consumed = 0
    next_id = 0
    for _ in range(n_lines):
        count = take_int("polyline length")
        consumed += 1
        if count < 0:
            raise FormatError("negative polyline length")
        idx = np.empty(count, dtype=np.int64)
        for j in range(count):
            idx[j] = take_int("polyline index")
        consumed += count
        if np.any(idx < 0) or np.any(idx >= n_points):
            raise FormatError("polyline index out of range")
        if count < 2:
            continue
        segment = pts[idx]
        if np.linalg.norm(np.diff(segment, axis=0), axis=1).sum() < DEGENERATE_LENGTH_MM:
            continue
        fibers.append(Streamline(segment, id=next_id))
        next_id += 1
    if consumed != n_ints:
        raise FormatError(f"LINES declared {n_ints} integers, found {consumed}")

    if subject_id is None:
        subject_id = path.stem
    return Tractogram(tuple(fibers), subject_id=subject_id, space=space)


def write_vtk_polydata(t: Tractogram, path: str | Path) -> None:
    """Write ASCII polydata with 9 significant digits per coordinate."""
    path = Path(path)
    out = ["# vtk DataFile Version 3.0", "streamlines", "ASCII", "DATASET POLYDATA"]
    total_points = sum(len(s) for s in t)
    out.append(f"POINTS {total_points} float")
    for s in t:
        for p in s.points:
            out.append(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}")
    total_ints = sum(len(s) + 1 for s in t)
    out.append(f"LINES {len(t)} {total_ints}")
    base = 0
    for s in t:
        out.append(" ".join([str(len(s))] + [str(base + i) for i in range(len(s))]))
        base += len(s)
    path.write_text("\n".join(out) + "\n", encoding="ascii")
