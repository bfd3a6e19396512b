"""Minimal NIfTI-1 mask volume reader and writer (uncompressed).

Only what binary ROI/ROA masks need: the 348-byte header, uint8/int16/
float32 data, sform or qform affines.  Values are thresholded at nonzero.

Index convention: NIfTI affines map integer voxel indices at voxel
centres.  :class:`~cnatlas.core.MaskVolume` treats voxel (i,j,k) as the
half-open cube [i,i+1)^3, centre at i+0.5, so the translation column is
shifted by half a voxel on read and shifted back on write.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..core import AffineTransform, MaskVolume
from ..errors import (
    FormatError,
    MissingAffineError,
    TruncatedFileError,
    UnsupportedDatatypeError,
    UnsupportedVariantError,
)

_HEADER_SIZE = 348
_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32}
_DTYPE_CODES = {np.dtype(np.uint8): (2, 8)}


def _quaternion_affine(b: float, c: float, d: float, qfac: float, pixdim, offsets) -> np.ndarray:
    a_sq = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(max(0.0, a_sq))
    r = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    lin = r * np.asarray(pixdim, dtype=np.float64)
    lin[:, 2] *= qfac
    out = np.hstack([lin, np.asarray(offsets, dtype=np.float64).reshape(3, 1)])
    return out


def read_nifti_mask(path: str | Path) -> MaskVolume:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER_SIZE:
        raise TruncatedFileError(f"file is {len(raw)} bytes, NIfTI-1 header needs {_HEADER_SIZE}")

    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise FormatError(f"bad NIfTI magic {magic!r}")

    # Endianness from sizeof_hdr.
    order = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != _HEADER_SIZE:
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != _HEADER_SIZE:
            raise FormatError("sizeof_hdr is not 348 in either byte order")
        order = ">"

    dim = struct.unpack_from(order + "8h", raw, 40)
    (datatype_code,) = struct.unpack_from(order + "h", raw, 70)
    pixdim = struct.unpack_from(order + "8f", raw, 76)
    (vox_offset_f,) = struct.unpack_from(order + "f", raw, 108)
    (qform_code,) = struct.unpack_from(order + "h", raw, 252)
    (sform_code,) = struct.unpack_from(order + "h", raw, 254)
    quatern = struct.unpack_from(order + "3f", raw, 256)
    qoffsets = struct.unpack_from(order + "3f", raw, 268)
    srow = np.array(struct.unpack_from(order + "12f", raw, 280), dtype=np.float64).reshape(3, 4)

    ndim = dim[0]
    if ndim < 3 or ndim > 7:
        raise FormatError(f"unsupported dim[0]={ndim}")
    shape = tuple(int(d) for d in dim[1:4])
    if any(d < 1 for d in shape):
        raise FormatError(f"non-positive spatial dims {shape}")
    trailing = [int(d) for d in dim[4 : 1 + ndim]]
    if any(d > 1 for d in trailing):
        raise UnsupportedVariantError("multi-volume NIfTI is not supported for masks")

    if datatype_code not in _DTYPES:
        raise UnsupportedDatatypeError(f"unsupported NIfTI datatype code {datatype_code}")
    dtype = np.dtype(_DTYPES[datatype_code]).newbyteorder(order)

    if not np.isfinite(vox_offset_f) or vox_offset_f < 0:
        raise FormatError(f"bad vox_offset {vox_offset_f}")
    vox_offset = int(vox_offset_f)

    if magic == b"n+1\x00":
        data_bytes = raw
        if vox_offset < _HEADER_SIZE:
            raise FormatError(f"vox_offset {vox_offset} overlaps the header")
    else:
        img = path.with_suffix(".img")
        if not img.exists():
            raise TruncatedFileError(f"companion image file {img.name} not found")
        data_bytes = img.read_bytes()

    count = int(np.prod(shape))
    need = vox_offset + count * dtype.itemsize
    if len(data_bytes) < need:
        raise TruncatedFileError(f"data needs {need} bytes, file has {len(data_bytes)}")
    flat = np.frombuffer(data_bytes, dtype=dtype, count=count, offset=vox_offset)
    data = flat.reshape(shape, order="F")

    if sform_code > 0:
        affine = srow.copy()
    elif qform_code > 0:
        qfac = float(pixdim[0])
        if qfac == 0.0:
            qfac = 1.0
        affine = _quaternion_affine(*quatern, qfac, pixdim[1:4], qoffsets)
    else:
        raise MissingAffineError("neither sform nor qform is set")
    if abs(np.linalg.det(affine[:, :3])) <= 1e-8:
        raise FormatError("volume affine is singular")

    # centre-at-integer-index to corner-at-integer-index shift
    affine[:, 3] -= affine[:, :3] @ np.full(3, 0.5)
    return MaskVolume(data != 0, AffineTransform(affine))


def write_nifti_mask(m: MaskVolume, path: str | Path) -> None:
    """Write a mask as uncompressed uint8 NIfTI-1 with an sform affine."""
    path = Path(path)
    shape = m.dims
    affine = np.array(m.voxel_to_world.matrix, dtype=np.float64)
    affine = affine.copy()
    affine[:, 3] += affine[:, :3] @ np.full(3, 0.5)

    hdr = bytearray(_HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, _HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, shape[0], shape[1], shape[2], 1, 1, 1, 1)
    code, bitpix = _DTYPE_CODES[np.dtype(np.uint8)]
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, bitpix)
    edges = np.linalg.norm(affine[:, :3], axis=0)
    struct.pack_into("<8f", hdr, 76, 1.0, *edges, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<h", hdr, 252, 0)
    struct.pack_into("<h", hdr, 254, 1)
    struct.pack_into("<12f", hdr, 280, *affine.reshape(-1))
    hdr[344:348] = b"n+1\x00"

    body = np.asarray(m.data, dtype=np.uint8).reshape(-1, order="F").tobytes()
    path.write_bytes(bytes(hdr) + b"\x00" * 4 + body)
