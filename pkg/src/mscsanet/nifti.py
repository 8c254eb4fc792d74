"""Dependency-free NIfTI-1 single-file (.nii) reader and writer.

Supports uncompressed files with magic "n+1", little- or big-endian headers
(detected from sizeof_hdr == 348), datatypes uint8/int16/float32/float64,
and scl_slope/scl_inter intensity scaling. Writing emits little-endian
float32 for volumes and uint8 for masks, with vox_offset 352.
"""

from __future__ import annotations

import struct

import numpy as np

from .data import LabelMask, Volume

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

DT_UINT8 = 2
DT_INT16 = 4
DT_FLOAT32 = 16
DT_FLOAT64 = 64

_DTYPES = {
    DT_UINT8: ("u1", 8),
    DT_INT16: ("i2", 16),
    DT_FLOAT32: ("f4", 32),
    DT_FLOAT64: ("f8", 64),
}


class NiftiError(RuntimeError):
    """Base class for NIfTI I/O failures."""


class BadMagicError(NiftiError):
    pass


class UnsupportedDatatypeError(NiftiError):
    pass


class TruncatedDataError(NiftiError):
    pass


def _pack_header(shape, datatype, bitpix, spacing):
    """Little-endian NIfTI-1 header with the fields this project uses."""
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)  # sizeof_hdr
    dim = [3, *shape, 1, 1, 1, 1, 1][:8]
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 70, datatype)
    struct.pack_into("<h", hdr, 72, bitpix)
    pixdim = [1.0, *spacing, 1.0, 1.0, 1.0, 1.0, 1.0][:8]
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))  # vox_offset
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)  # scl_inter
    struct.pack_into("<4s", hdr, 344, MAGIC)
    return bytes(hdr)


def nifti_write(obj, path):
    """Write a Volume (float32) or LabelMask (uint8) as single-file NIfTI-1."""
    if isinstance(obj, LabelMask):
        data = obj.voxels.astype("<u1")
        datatype, bitpix = DT_UINT8, 8
        spacing = (1.0, 1.0, 1.0)
    else:
        data = obj.voxels.astype("<f4")
        datatype, bitpix = DT_FLOAT32, 32
        spacing = obj.spacing
    hdr = _pack_header(data.shape, datatype, bitpix, spacing)
    with open(path, "wb") as f:
        f.write(hdr)
        f.write(b"\x00" * (VOX_OFFSET - HEADER_SIZE))  # extension flag bytes
        f.write(np.asfortranarray(data).tobytes(order="F"))


def nifti_read(path, as_mask=False):
    """Read a single-file NIfTI-1 volume; returns Volume or LabelMask."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < HEADER_SIZE:
        raise TruncatedDataError(f"{path}: shorter than a NIfTI-1 header")
    (sizeof_hdr_le,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr_le == HEADER_SIZE:
        end = "<"
    else:
        (sizeof_hdr_be,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr_be != HEADER_SIZE:
            raise BadMagicError(f"{path}: sizeof_hdr is not 348 in either endianness")
        end = ">"
    magic = struct.unpack_from("4s", raw, 344)[0]
    if magic != MAGIC:
        raise BadMagicError(f"{path}: magic {magic!r} is not 'n+1'")
    dim = struct.unpack_from(end + "8h", raw, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiError(f"{path}: invalid dim[0]={ndim}")
    shape = tuple(dim[1 : 1 + ndim])
    if len(shape) > 3 and all(s == 1 for s in shape[3:]):
        shape = shape[:3]
    if len(shape) != 3:
        raise NiftiError(f"{path}: expected a 3D volume, got shape {shape}")
    (datatype,) = struct.unpack_from(end + "h", raw, 70)
    if datatype not in _DTYPES:
        raise UnsupportedDatatypeError(f"{path}: datatype code {datatype}")
    dtype_code, _bits = _DTYPES[datatype]
    pixdim = struct.unpack_from(end + "8f", raw, 76)
    spacing = tuple(abs(p) if p else 1.0 for p in pixdim[1:4])
    (vox_offset,) = struct.unpack_from(end + "f", raw, 108)
    offset = int(vox_offset) if vox_offset else VOX_OFFSET
    slope, inter = struct.unpack_from(end + "2f", raw, 112)
    count = int(np.prod(shape))
    nbytes = count * np.dtype(dtype_code).itemsize
    if len(raw) < offset + nbytes:
        raise TruncatedDataError(
            f"{path}: need {offset + nbytes} bytes, file has {len(raw)}"
        )
    data = np.frombuffer(raw, dtype=end + dtype_code, count=count, offset=offset)
    data = data.reshape(shape, order="F")
    if slope != 0.0 and (slope != 1.0 or inter != 0.0):
        data = data * slope + inter
    if as_mask:
        return LabelMask((np.asarray(data) > 0.5).astype(np.uint8))
    return Volume(np.asarray(data, dtype=np.float64), spacing=spacing)
