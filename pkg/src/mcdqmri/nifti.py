"""Minimal NIfTI-1 (single-file ``.nii``) reader and writer.

Supported payloads: float32 (code 16), uint8 (code 2) and int16 (code 4),
little-endian, uncompressed.  float32 files load as :class:`Volume`;
uint8 files load as :class:`TissueLabels` when ``intent_code`` is
NIFTI_INTENT_LABEL and as :class:`Mask` otherwise; int16 files load as
float32 volumes.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Union

import numpy as np

from .volume import Mask, TissueLabels, Volume

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"
INTENT_LABEL = 1002
XYZT_MM = 2

DT_UINT8 = 2
DT_INT16 = 4
DT_FLOAT32 = 16
_DTYPES = {DT_UINT8: np.dtype("<u1"), DT_INT16: np.dtype("<i2"), DT_FLOAT32: np.dtype("<f4")}

# (name, offset, numpy type) in file order
HEADER_FIELDS = [
    ("sizeof_hdr", 0, "<i4"),
    ("data_type", 4, "S10"),
    ("db_name", 14, "S18"),
    ("extents", 32, "<i4"),
    ("session_error", 36, "<i2"),
    ("regular", 38, "S1"),
    ("dim_info", 39, "u1"),
    ("dim", 40, ("<i2", (8,))),
    ("intent_p1", 56, "<f4"),
    ("intent_p2", 60, "<f4"),
    ("intent_p3", 64, "<f4"),
    ("intent_code", 68, "<i2"),
    ("datatype", 70, "<i2"),
    ("bitpix", 72, "<i2"),
    ("slice_start", 74, "<i2"),
    ("pixdim", 76, ("<f4", (8,))),
    ("vox_offset", 108, "<f4"),
    ("scl_slope", 112, "<f4"),
    ("scl_inter", 116, "<f4"),
    ("slice_end", 120, "<i2"),
    ("slice_code", 122, "u1"),
    ("xyzt_units", 123, "u1"),
    ("cal_max", 124, "<f4"),
    ("cal_min", 128, "<f4"),
    ("slice_duration", 132, "<f4"),
    ("toffset", 136, "<f4"),
    ("glmax", 140, "<i4"),
    ("glmin", 144, "<i4"),
    ("descrip", 148, "S80"),
    ("aux_file", 228, "S24"),
    ("qform_code", 252, "<i2"),
    ("sform_code", 254, "<i2"),
    ("quatern_b", 256, "<f4"),
    ("quatern_c", 260, "<f4"),
    ("quatern_d", 264, "<f4"),
    ("qoffset_x", 268, "<f4"),
    ("qoffset_y", 272, "<f4"),
    ("qoffset_z", 276, "<f4"),
    ("srow_x", 280, ("<f4", (4,))),
    ("srow_y", 296, ("<f4", (4,))),
    ("srow_z", 312, ("<f4", (4,))),
    ("intent_name", 328, "S16"),
    ("magic", 344, "S4"),
]

HEADER_DTYPE = np.dtype({
    "names": [f[0] for f in HEADER_FIELDS],
    "formats": [f[2] for f in HEADER_FIELDS],
    "offsets": [f[1] for f in HEADER_FIELDS],
    "itemsize": HEADER_SIZE,
})

Image = Union[Volume, Mask, TissueLabels]


class NiftiError(ValueError):
    pass


class BadMagicError(NiftiError):
    pass


class UnsupportedDatatypeError(NiftiError):
    pass


class TruncatedPayloadError(NiftiError):
    pass


class EndiannessError(NiftiError):
    pass


class DimensionOverflowError(NiftiError):
    pass


@dataclass
class NiftiHeader:
    """Decoded subset of the header; ``raw`` holds every field."""

    datatype: int
    dim: tuple[int, ...]
    pixdim: tuple[float, ...]
    vox_offset: float
    scl_slope: float
    scl_inter: float
    intent_code: int
    raw: np.ndarray

    @property
    def sizeof_hdr(self) -> int:
        return int(self.raw["sizeof_hdr"])

    @property
    def magic(self) -> bytes:
        return bytes(self.raw["magic"])


def _empty_header() -> np.ndarray:
    hdr = np.zeros((), dtype=HEADER_DTYPE)
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    hdr["vox_offset"] = VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = XYZT_MM
    hdr["magic"] = MAGIC
    return hdr


def encode(img: Image, datatype: int | None = None) -> bytes:
    """Serialize an image to NIfTI-1 bytes (header, 4 zero bytes, payload)."""
    intent = 0
    if isinstance(img, Volume):
        arr = img.data
        spacing = img.voxel_size_mm
        datatype = DT_FLOAT32 if datatype is None else datatype
    elif isinstance(img, Mask):
        arr = img.bits[None].astype(np.uint8)
        spacing = (1.0, 1.0, 1.0)
        datatype = DT_UINT8 if datatype is None else datatype
    elif isinstance(img, TissueLabels):
        arr = img.labels[None]
        spacing = (1.0, 1.0, 1.0)
        datatype = DT_UINT8 if datatype is None else datatype
        intent = INTENT_LABEL
    else:
        raise TypeError(f"cannot encode {type(img).__name__}")
    if datatype not in _DTYPES:
        raise UnsupportedDatatypeError(f"unsupported datatype code {datatype}")
    dtype = _DTYPES[datatype]
    if dtype.kind in "iu":
        info = np.iinfo(dtype)
        if arr.size and (arr.min() < info.min or arr.max() > info.max or not np.all(arr == np.round(arr))):
            raise ValueError(f"values do not fit datatype code {datatype} exactly")

    channels, nx, ny, nz = arr.shape
    if max(arr.shape) > np.iinfo(np.int16).max:
        raise DimensionOverflowError(f"shape {arr.shape} does not fit 16-bit dim fields")
    ndim = 3 if (channels == 1 and not isinstance(img, Volume)) else 4
    hdr = _empty_header()
    hdr["dim"] = [ndim, nx, ny, nz, channels, 1, 1, 1]
    hdr["datatype"] = datatype
    hdr["bitpix"] = dtype.itemsize * 8
    hdr["intent_code"] = intent
    hdr["pixdim"] = [1.0, *spacing, 1.0, 1.0, 1.0, 1.0]
    hdr["sform_code"] = 1
    hdr["srow_x"] = [spacing[0], 0, 0, 0]
    hdr["srow_y"] = [0, spacing[1], 0, 0]
    hdr["srow_z"] = [0, 0, spacing[2], 0]
    # x fastest on disk, channel slowest
    payload = np.ascontiguousarray(arr.transpose(0, 3, 2, 1)).astype(dtype)
    return hdr.tobytes() + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + payload.tobytes()


def decode(buf: bytes) -> tuple[Image, NiftiHeader]:
    """Parse NIfTI-1 bytes into a Volume, Mask or TissueLabels."""
    if len(buf) < VOX_OFFSET:
        raise TruncatedPayloadError(f"need at least {VOX_OFFSET} bytes, got {len(buf)}")
    size_le = int(np.frombuffer(buf, "<i4", 1)[0])
    if size_le != HEADER_SIZE:
        if int(np.frombuffer(buf, ">i4", 1)[0]) == HEADER_SIZE:
            raise EndiannessError("big-endian NIfTI files are not supported")
        raise NiftiError(f"sizeof_hdr is {size_le}, expected {HEADER_SIZE}")
    raw = np.frombuffer(buf, HEADER_DTYPE, 1)[0].copy()
    if bytes(raw["magic"]).ljust(4, b"\x00") != MAGIC:
        raise BadMagicError(f"bad magic {bytes(raw['magic'])!r}; only single-file n+1 is supported")
    datatype = int(raw["datatype"])
    if datatype not in _DTYPES:
        raise UnsupportedDatatypeError(f"unsupported datatype code {datatype}")
    dim = tuple(int(v) for v in raw["dim"])
    if dim[0] not in (3, 4) or any(d < 1 for d in dim[1:dim[0] + 1]):
        raise NiftiError(f"unsupported dim field {dim}")
    nx, ny, nz = dim[1:4]
    channels = dim[4] if dim[0] == 4 else 1
    offset = int(raw["vox_offset"])
    dtype = _DTYPES[datatype]
    nbytes = channels * nx * ny * nz * dtype.itemsize
    if len(buf) < offset + nbytes:
        raise TruncatedPayloadError(f"payload needs {nbytes} bytes after offset {offset}, "
                                    f"file has {len(buf) - offset}")
    arr = np.frombuffer(buf, dtype, channels * nx * ny * nz, offset)
    arr = arr.reshape(channels, nz, ny, nx).transpose(0, 3, 2, 1)
    slope, inter = float(raw["scl_slope"]), float(raw["scl_inter"])
    header = NiftiHeader(datatype, dim, tuple(float(v) for v in raw["pixdim"]), float(raw["vox_offset"]),
                         slope, inter, int(raw["intent_code"]), raw)
    spacing = tuple(float(v) if v > 0 else 1.0 for v in raw["pixdim"][1:4])

    if datatype == DT_UINT8:
        if header.intent_code == INTENT_LABEL:
            return TissueLabels(arr[0]), header
        return Mask(arr[0] != 0), header
    data = arr.astype(np.float32)
    if slope != 0 and (slope != 1 or inter != 0):
        data = data * np.float32(slope) + np.float32(inter)
    return Volume(data, spacing), header


def read_nifti(source: bytes | str | os.PathLike) -> tuple[Image, NiftiHeader]:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return decode(bytes(source))
    with open(source, "rb") as fh:
        return decode(fh.read())


def write_nifti(img: Image, path: str | os.PathLike, datatype: int | None = None) -> int:
    """Write ``img`` to ``path``; returns the number of bytes written."""
    buf = encode(img, datatype)
    with open(path, "wb") as fh:
        fh.write(buf)
    return len(buf)


def load(path: str | os.PathLike) -> Image:
    return read_nifti(path)[0]
