"""Bit-exact single-file NIfTI-1 reader and writer.

Only the 348-byte NIfTI-1 header with magic ``n+1`` is supported (optionally
gzip-compressed, detected by the 0x1f8b prefix).  Two-file ``.hdr``/``.img``
pairs (magic ``ni1``) and NIfTI-2 are rejected with a clear error.  Header
extensions are skipped on read and never written.

Supported on-disk datatypes: uint8 (2), int16 (4), int32 (8), float32 (16).
Byte order is detected from ``sizeof_hdr``.  ``scl_slope``/``scl_inter`` are
applied on read when the slope is non-zero; float32 payloads written by
:func:`write_nifti` round-trip bit-exactly.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .volume import LabelMap, Volume

__all__ = [
    "NiftiError",
    "BadMagicError",
    "UnsupportedDatatypeError",
    "TruncatedFileError",
    "read_nifti",
    "write_nifti",
]

HEADER_SIZE = 348
_HDR_FMT = "i10s18sihcc8h3fhhhh8ffffhccffffii80s24shh6f12f16s4s"

_DTYPES = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32}
_DTYPE_CODES = {"uint8": (2, 8), "int16": (4, 16), "int32": (8, 32), "float32": (16, 32)}


class NiftiError(ValueError):
    """Base class for malformed or unsupported NIfTI input."""


class BadMagicError(NiftiError):
    """The magic bytes do not identify a single-file NIfTI-1 volume."""


class UnsupportedDatatypeError(NiftiError):
    """The on-disk datatype code is outside the supported set."""


class TruncatedFileError(NiftiError):
    """The payload is shorter than the header promises."""


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _quaternion_affine(b: float, c: float, d: float, qfac: float,
                       pixdim, offset) -> np.ndarray:
    a_sq = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(max(a_sq, 0.0))
    r = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ])
    m = np.eye(4)
    m[:3, :3] = r * np.asarray(pixdim) * np.array([1.0, 1.0, qfac])
    m[:3, 3] = offset
    return m


def read_nifti(path, labels: bool = False):
    """Decode a single-file NIfTI-1 volume as a :class:`Volume` or :class:`LabelMap`."""
    raw = _read_bytes(path)
    if len(raw) < HEADER_SIZE:
        raise TruncatedFileError(f"{path}: file shorter than the {HEADER_SIZE}-byte header")

    sizeof_hdr_le = struct.unpack("<i", raw[:4])[0]
    if sizeof_hdr_le == HEADER_SIZE:
        bo = "<"
    elif struct.unpack(">i", raw[:4])[0] == HEADER_SIZE:
        bo = ">"
    else:
        raise NiftiError(f"{path}: sizeof_hdr is {sizeof_hdr_le}, not a NIfTI-1 header")

    fields = struct.unpack(bo + _HDR_FMT, raw[:HEADER_SIZE])
    dim = fields[7:15]
    datatype = fields[19]
    pixdim = fields[22:30]
    vox_offset = int(fields[30])
    scl_slope, scl_inter = fields[31], fields[32]
    qform_code, sform_code = fields[43], fields[44]
    quat = fields[45:51]
    srow = fields[51:63]
    magic = fields[64]

    if magic[:3] == b"ni1":
        raise BadMagicError(f"{path}: two-file .hdr/.img pairs are not supported")
    if magic[:3] != b"n+1":
        raise BadMagicError(f"{path}: magic {magic!r} is not a NIfTI-1 volume")
    if dim[0] != 3:
        raise NiftiError(f"{path}: only 3D volumes are supported, dim[0]={dim[0]}")
    if datatype not in _DTYPES:
        raise UnsupportedDatatypeError(f"{path}: datatype code {datatype} not supported")

    nx, ny, nz = (int(d) for d in dim[1:4])
    if min(nx, ny, nz) < 1:
        raise NiftiError(f"{path}: non-positive dimensions {(nx, ny, nz)}")
    voxel_size = tuple(float(p) for p in pixdim[1:4])
    if any(v <= 0 for v in voxel_size):
        raise NiftiError(f"{path}: non-positive pixdim {voxel_size}")

    dtype = np.dtype(_DTYPES[datatype]).newbyteorder(bo)
    count = nx * ny * nz
    need = vox_offset + count * dtype.itemsize
    if len(raw) < need:
        raise TruncatedFileError(
            f"{path}: payload needs {need} bytes, file has {len(raw)}"
        )
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset)
    data = data.astype(dtype.newbyteorder("="), copy=True).reshape((nx, ny, nz), order="F")

    if sform_code > 0:
        affine = np.eye(4)
        affine[0, :] = srow[0:4]
        affine[1, :] = srow[4:8]
        affine[2, :] = srow[8:12]
    elif qform_code > 0:
        qfac = -1.0 if pixdim[0] == -1.0 else 1.0
        affine = _quaternion_affine(quat[0], quat[1], quat[2], qfac,
                                    voxel_size, quat[3:6])
    else:
        affine = np.diag([*voxel_size, 1.0])

    if labels:
        if not np.issubdtype(data.dtype, np.integer):
            raise NiftiError(f"{path}: label volumes require an integer datatype")
        if scl_slope not in (0.0, 1.0) or (scl_slope == 1.0 and scl_inter != 0.0):
            raise NiftiError(f"{path}: label volumes must not carry intensity scaling")
        return LabelMap(data.astype(np.int32), voxel_size, affine)

    values = data.astype(np.float32)
    if scl_slope != 0.0 and not (scl_slope == 1.0 and scl_inter == 0.0):
        values = (values.astype(np.float64) * scl_slope + scl_inter).astype(np.float32)
    return Volume(values, voxel_size, affine)


def write_nifti(v, path, datatype: str = "float32") -> None:
    """Write a single-file NIfTI-1 volume (gzip when the path ends in .gz).

    The sform carries the voxel-to-world affine; ``vox_offset`` is 352 and
    the payload is stored x-fastest in native byte order.
    """
    if datatype not in _DTYPE_CODES:
        raise UnsupportedDatatypeError(
            f"datatype {datatype!r} not in {sorted(_DTYPE_CODES)}"
        )
    code, bitpix = _DTYPE_CODES[datatype]
    out_dtype = np.dtype(_DTYPES[code])

    data = v.data
    if np.issubdtype(data.dtype, np.integer) and datatype != "float32":
        info = np.iinfo(out_dtype)
        if data.min() < info.min or data.max() > info.max:
            raise ValueError(f"label values do not fit in {datatype}")
    payload = np.asfortranarray(data.astype(out_dtype, copy=False)).tobytes(order="F")

    nx, ny, nz = v.dims
    affine = np.asarray(v.affine, dtype=np.float32)
    header = struct.pack(
        "=" + _HDR_FMT,
        HEADER_SIZE,
        b"", b"", 0, 0, b"\0", b"\0",
        3, nx, ny, nz, 1, 1, 1, 1,
        0.0, 0.0, 0.0,
        0, code, bitpix, 0,
        1.0, *(float(s) for s in v.voxel_size), 1.0, 1.0, 1.0, 1.0,
        352.0,
        1.0, 0.0,
        0, b"\0", b"\n",  # xyzt units: mm | sec
        0.0, 0.0, 0.0, 0.0, 0, 0,
        b"synthvol", b"",
        0, 1,
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        *affine[0, :].tolist(), *affine[1, :].tolist(), *affine[2, :].tolist(),
        b"", b"n+1\0",
    )
    blob = header + b"\x00\x00\x00\x00" + payload

    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "wb", compresslevel=6, mtime=0) as f:
            f.write(blob)
    else:
        path.write_bytes(blob)
