"""Single-file NIfTI-1 reader/writer (uncompressed ``.nii`` only).

Only what the pipeline needs: 3-D float32/float64 images, either byte
order on read, little-endian on write. qform/sform are kept on the header
but never applied; everything downstream works in voxel space.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .volume import Volume

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"
DATATYPES = {16: "f4", 64: "f8"}
BITPIX = {16: 32, 64: 64}


class NiftiError(ValueError):
    code = "nifti-error"


class BadMagicError(NiftiError):
    code = "bad-magic"


class UnsupportedFormError(NiftiError):
    code = "unsupported-form"


class UnsupportedDatatypeError(NiftiError):
    code = "unsupported-datatype"


class TruncatedError(NiftiError):
    code = "truncated"


class BadHeaderError(NiftiError):
    code = "bad-header"


@dataclass
class NiftiHeader:
    dim: tuple
    datatype: int
    pixdim: tuple
    vox_offset: float
    scl_slope: float
    scl_inter: float
    endian: str  # "<" or ">"
    qform_code: int = 0
    sform_code: int = 0
    quatern: tuple = (0.0,) * 6  # b, c, d, qoffset x, y, z
    srow: tuple = field(default_factory=lambda: ((0.0,) * 4,) * 3)
    descrip: str = ""

    @property
    def shape(self):
        return tuple(self.dim[1:1 + self.dim[0]])


def parse_header(raw: bytes) -> NiftiHeader:
    if len(raw) < HEADER_SIZE:
        raise TruncatedError(f"header holds {len(raw)} bytes, need {HEADER_SIZE}")
    endian = None
    for e in "<>":
        if struct.unpack(e + "i", raw[:4])[0] == HEADER_SIZE:
            endian = e
            break
    if endian is None:
        raise BadHeaderError("sizeof_hdr is not 348 in either byte order")
    magic = raw[344:348]
    if magic == MAGIC_PAIR:
        raise UnsupportedFormError("two-file NIfTI (.hdr/.img, magic 'ni1') is not supported")
    if magic != MAGIC_SINGLE:
        raise BadMagicError(f"bad NIfTI magic {magic!r}")
    u = lambda fmt, off: struct.unpack_from(endian + fmt, raw, off)
    dim = u("8h", 40)
    datatype, bitpix = u("2h", 70)
    pixdim = u("8f", 76)
    vox_offset, slope, inter = u("3f", 108)
    qform_code, sform_code = u("2h", 252)
    quatern = u("6f", 256)
    srow = (u("4f", 280), u("4f", 296), u("4f", 312))
    descrip = raw[148:228].split(b"\x00", 1)[0].decode("latin-1")
    if not 1 <= dim[0] <= 7:
        raise BadHeaderError(f"dim[0] = {dim[0]} out of range")
    if dim[0] < 3 or any(d != 1 for d in dim[4:1 + dim[0]]):
        raise BadHeaderError(f"only 3-D volumes are supported, got dim {dim[:1 + dim[0]]}")
    if any(d < 1 for d in dim[1:4]):
        raise BadHeaderError(f"non-positive dimensions {dim[1:4]}")
    if datatype not in DATATYPES:
        raise UnsupportedDatatypeError(f"datatype code {datatype} unsupported (only 16 and 64)")
    if bitpix != BITPIX[datatype]:
        raise BadHeaderError(f"bitpix {bitpix} inconsistent with datatype {datatype}")
    if not vox_offset >= VOX_OFFSET or vox_offset != int(vox_offset):
        raise BadHeaderError(f"vox_offset {vox_offset} must be an integer >= {VOX_OFFSET}")
    return NiftiHeader((3,) + tuple(dim[1:4]) + (1,) * 4, datatype, tuple(pixdim), vox_offset,
                       slope, inter, endian, qform_code, sform_code, tuple(quatern),
                       tuple(tuple(r) for r in srow), descrip)


def _spacing(pixdim):
    # zero or missing pixdim in the wild: fall back to unit spacing
    return tuple(abs(p) if np.isfinite(p) and p != 0 else 1.0 for p in pixdim[1:4])


def read_header(path) -> NiftiHeader:
    with open(path, "rb") as fh:
        return parse_header(fh.read(HEADER_SIZE))


def decode(raw: bytes):
    """Header and float64 array from the bytes of a whole ``.nii`` file."""
    hdr = parse_header(raw)
    shape = hdr.shape
    dtype = np.dtype(hdr.endian + DATATYPES[hdr.datatype])
    n = int(np.prod(shape))
    start = int(hdr.vox_offset)
    end = start + n * dtype.itemsize
    if len(raw) < end:
        raise TruncatedError(f"data needs bytes {start}..{end}, file has {len(raw)}")
    a = np.frombuffer(raw, dtype=dtype, count=n, offset=start).astype(np.float64)
    a = a.reshape(shape, order="F")
    if hdr.scl_slope != 0 and np.isfinite(hdr.scl_slope):
        a = a * float(hdr.scl_slope) + float(hdr.scl_inter if np.isfinite(hdr.scl_inter) else 0.0)
    if not np.isfinite(a).all():
        raise NiftiError("image contains non-finite values")
    return hdr, a


def read_nifti(path) -> Volume:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise NiftiError(f"cannot read {path}: {exc}") from exc
    hdr, a = decode(raw)
    return Volume(a, _spacing(hdr.pixdim))


def encode(v, datatype=16, descrip="kspaceqc"):
    """Bytes of a little-endian single-file NIfTI-1 image."""
    if datatype not in DATATYPES:
        raise UnsupportedDatatypeError(f"cannot write datatype {datatype}")
    if isinstance(v, Volume):
        data, spacing = v.data, v.spacing
    else:
        data, spacing = np.asarray(v, dtype=np.float64), (1.0, 1.0, 1.0)
    if data.ndim != 3:
        raise NiftiError(f"expected a 3-D volume, got shape {data.shape}")
    hdr = bytearray(VOX_OFFSET)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, datatype, BITPIX[datatype])
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<3f", hdr, 108, float(VOX_OFFSET), 1.0, 0.0)
    hdr[123] = 2  # xyzt_units: millimetres
    d = descrip.encode("latin-1")[:79]
    hdr[148:148 + len(d)] = d
    hdr[344:348] = MAGIC_SINGLE
    body = np.asarray(data, dtype="<" + DATATYPES[datatype]).tobytes(order="F")
    return bytes(hdr) + body


def write_nifti(v, path, datatype=16):
    raw = encode(v, datatype)
    try:
        tmp = f"{path}.tmp{os.getpid()}"
        with open(tmp, "wb") as fh:
            fh.write(raw)
        os.replace(tmp, path)
    except OSError as exc:
        raise NiftiError(f"cannot write {path}: {exc}") from exc
