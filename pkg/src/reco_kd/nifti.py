"""Strict single-file uncompressed NIfTI-1 reader/writer.

Supported subset: 348-byte header + 4-byte extender, magic "n+1\\0",
dim[0] in {3, 4}, datatypes uint8 (2), int16 (4), float32 (16), float64 (64).
Byte order is detected from sizeof_hdr on read; files are always written
little-endian. Data is read from vox_offset (>= 352 accepted, 352 written).

Axis mapping: the file's fastest-varying axis i maps to W, then j -> H,
k -> D, and the optional 4th dimension -> modalities / label grids. spacing
(D, H, W) therefore corresponds to (pixdim[3], pixdim[2], pixdim[1]).

Integer datatypes load as LabelVolume (3-d exclusive IDs, 4-d one binary
grid per foreground class); float datatypes load as ImageVolume. Writing
emits float32 for images and uint8 for labels, with a canonical header
(sform = diag(spacing), everything else zeroed) so write -> read -> write
is byte-identical.

Header fields used (offset: name):
      0: sizeof_hdr (i)    40: dim (8h)        70: datatype (h)
     72: bitpix (h)        76: pixdim (8f)    108: vox_offset (f)
    344: magic (4s)        38: regular (c, written 'r')
    252..254: qform/sform codes (h,h)  280..328: srow_x/y/z (4f each)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import NiftiError
from .volumes import ImageVolume, LabelVolume

_HEADER_BYTES = 348
_DATA_OFFSET = 352
_MAX_DIM = 32766

_DTYPE_CODES = {2: "u1", 4: "i2", 16: "f4", 64: "f8"}
_BITPIX = {2: 8, 4: 16, 16: 32, 64: 64}


def read_nifti1(path):
    """Parse a NIfTI-1 file into an ImageVolume or LabelVolume."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER_BYTES:
        raise NiftiError(
            f"truncated file: {len(raw)} bytes is shorter than the {_HEADER_BYTES}-byte header",
            field="sizeof_hdr",
        )
    if struct.unpack_from("<i", raw, 0)[0] == _HEADER_BYTES:
        bo = "<"
    elif struct.unpack_from(">i", raw, 0)[0] == _HEADER_BYTES:
        bo = ">"
    else:
        raise NiftiError(
            f"sizeof_hdr is {struct.unpack_from('<i', raw, 0)[0]} "
            f"(not 348 in either byte order)",
            field="sizeof_hdr",
        )
    magic = raw[344:348]
    if magic == b"ni1\x00":
        raise NiftiError("two-file 'ni1' layout is unsupported; need 'n+1'", field="magic")
    if magic != b"n+1\x00":
        raise NiftiError(f"bad magic {magic!r}", field="magic")

    dim = struct.unpack_from(bo + "8h", raw, 40)
    ndim = dim[0]
    if ndim not in (3, 4):
        raise NiftiError(f"dim[0] must be 3 or 4, got {ndim}", field="dim")
    dims = dim[1 : 1 + ndim]
    for i, d in enumerate(dims, start=1):
        if not 1 <= d <= _MAX_DIM:
            raise NiftiError(f"dim[{i}] = {d} outside [1, {_MAX_DIM}]", field=f"dim[{i}]")

    datatype = struct.unpack_from(bo + "h", raw, 70)[0]
    if datatype not in _DTYPE_CODES:
        raise NiftiError(f"unsupported datatype code {datatype}", field="datatype")
    bitpix = struct.unpack_from(bo + "h", raw, 72)[0]
    if bitpix != _BITPIX[datatype]:
        raise NiftiError(
            f"bitpix {bitpix} inconsistent with datatype {datatype} "
            f"(expected {_BITPIX[datatype]})",
            field="bitpix",
        )

    pixdim = struct.unpack_from(bo + "8f", raw, 76)
    spacing = (pixdim[3], pixdim[2], pixdim[1])
    if min(spacing) <= 0:
        raise NiftiError(f"non-positive voxel spacing {spacing}", field="pixdim")

    vox_offset_f = struct.unpack_from(bo + "f", raw, 108)[0]
    if vox_offset_f < _DATA_OFFSET or not float(vox_offset_f).is_integer():
        raise NiftiError(f"vox_offset {vox_offset_f} invalid (need integer >= 352)", field="vox_offset")
    vox_offset = int(vox_offset_f)

    count = int(np.prod(dims, dtype=np.int64))
    itemsize = _BITPIX[datatype] // 8
    if len(raw) < vox_offset + count * itemsize:
        raise NiftiError(
            f"file truncated: need {vox_offset + count * itemsize} bytes, have {len(raw)}",
            field="vox_offset",
        )
    arr = np.frombuffer(raw, dtype=bo + _DTYPE_CODES[datatype], count=count, offset=vox_offset)
    arr = arr.reshape(tuple(reversed(dims)))  # (M?, D, H, W), W fastest in the file

    if datatype in (2, 4):
        if ndim == 3:
            if arr.size and arr.min() < 0:
                raise NiftiError("negative exclusive label value", field="datatype")
            return LabelVolume.exclusive(arr, spacing=spacing)
        if not np.isin(arr, (0, 1)).all():
            raise NiftiError(
                "4-d integer volume must hold binary per-class grids", field="datatype"
            )
        return LabelVolume.multi(arr, spacing=spacing)
    return ImageVolume(np.asarray(arr, dtype=np.float64), spacing=spacing)


def write_nifti1(path, volume) -> None:
    """Write an ImageVolume (float32) or LabelVolume (uint8), little-endian."""
    if isinstance(volume, ImageVolume):
        data = volume.data
        ndim = 3 if data.shape[0] == 1 else 4
        payload = np.ascontiguousarray(data[0] if ndim == 3 else data).astype("<f4")
        datatype = 16
        spatial = volume.shape
        extra = data.shape[0]
    elif isinstance(volume, LabelVolume):
        data = volume.data
        if volume.multi_label:
            ndim, payload, extra = 4, np.ascontiguousarray(data).astype("<u1"), data.shape[0]
        else:
            if data.size and data.max() > 255:
                raise NiftiError(
                    f"exclusive label id {int(data.max())} does not fit uint8", field="datatype"
                )
            ndim, payload, extra = 3, np.ascontiguousarray(data).astype("<u1"), 1
        datatype = 2
        spatial = volume.shape
    else:
        raise TypeError(f"cannot write {type(volume).__name__} as NIfTI-1")

    d_, h_, w_ = spatial
    dims = [w_, h_, d_] + ([extra] if ndim == 4 else [])
    for i, d in enumerate(dims, start=1):
        if not 1 <= d <= _MAX_DIM:
            raise NiftiError(f"dim[{i}] = {d} outside [1, {_MAX_DIM}]", field=f"dim[{i}]")

    sd, sh, sw = volume.spacing
    header = bytearray(_DATA_OFFSET)  # 348-byte header + 4-byte zero extender
    struct.pack_into("<i", header, 0, _HEADER_BYTES)
    struct.pack_into("c", header, 38, b"r")
    dim8 = [ndim] + dims + [1] * (7 - len(dims))
    struct.pack_into("<8h", header, 40, *dim8)
    struct.pack_into("<h", header, 70, datatype)
    struct.pack_into("<h", header, 72, _BITPIX[datatype])
    pixdim8 = [1.0, sw, sh, sd, 0.0, 0.0, 0.0, 0.0]
    struct.pack_into("<8f", header, 76, *pixdim8)
    struct.pack_into("<f", header, 108, float(_DATA_OFFSET))
    struct.pack_into("B", header, 123, 2)  # xyzt_units (one byte): millimetres
    struct.pack_into("<2h", header, 252, 0, 1)  # qform off, sform scaled-identity
    struct.pack_into("<4f", header, 280, sw, 0.0, 0.0, 0.0)
    struct.pack_into("<4f", header, 296, 0.0, sh, 0.0, 0.0)
    struct.pack_into("<4f", header, 312, 0.0, 0.0, sd, 0.0)
    header[344:348] = b"n+1\x00"

    with open(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(payload.tobytes(order="C"))
