"""Readers and writers for a NIfTI-1 subset and the native UAF1 container.

NIfTI-1 subset: single-file ``.nii``, little-endian, 348-byte header followed
by a zeroed 4-byte extension block, ``vox_offset`` 352, datatypes uint8,
int16 and float32, no intensity rescaling, axis-aligned sform.

UAF1 layout (little-endian)::

    magic    4s   b"UAF1"
    dims     3 x uint32
    spacing  3 x float32
    origin   3 x float32
    channels uint32
    dtype    uint8   (0 float32, 1 uint16, 2 uint8)
    payload  channels x prod(dims) values, channel slowest, x fastest

A :class:`MeanStdField` is stored as 7 float32 channels: 3 mean, 3 std and
the 0/1 mask.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .grid import Grid, LabelVolume, Mask, MeanStdField, flatten_x_fastest, unflatten_x_fastest


class VolumeIOError(ValueError):
    pass


class BadMagicError(VolumeIOError):
    pass


class UnsupportedDatatypeError(VolumeIOError):
    pass


class ObliqueAffineError(VolumeIOError):
    pass


class RescaleError(VolumeIOError):
    pass


class BigEndianError(VolumeIOError):
    pass


class TruncatedPayloadError(VolumeIOError):
    pass


class LengthMismatchError(VolumeIOError):
    pass


# ---------------------------------------------------------------------------
# NIfTI-1
# ---------------------------------------------------------------------------

NIFTI_DTYPES = {2: np.dtype("<u1"), 4: np.dtype("<i2"), 16: np.dtype("<f4")}
_NIFTI_CODES = {np.dtype(v).str: k for k, v in NIFTI_DTYPES.items()}
HEADER_SIZE = 348
VOX_OFFSET = 352


class NiftiVolume(NamedTuple):
    grid: Grid
    data: np.ndarray  # (channels, *dims), float64
    channels: int
    datatype: int


def _dtype_code(dtype) -> int:
    if isinstance(dtype, (int, np.integer)):
        code = int(dtype)
    else:
        code = _NIFTI_CODES.get(np.dtype(dtype).newbyteorder("<").str)
    if code not in NIFTI_DTYPES:
        raise UnsupportedDatatypeError(f"unsupported datatype {dtype}")
    return code


def _payload_array(grid: Grid, payload, channels: int) -> np.ndarray:
    arr = np.asarray(payload)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim == 1:
        if arr.size != channels * grid.size:
            raise LengthMismatchError(f"payload has {arr.size} values, expected {channels * grid.size}")
        return arr
    if arr.shape != (channels,) + grid.dims:
        raise LengthMismatchError(f"payload shape {arr.shape} != {(channels,) + grid.dims}")
    return flatten_x_fastest(arr).reshape(-1)


def _check_representable(flat: np.ndarray, dtype: np.dtype) -> None:
    if dtype.kind in "iu":
        if not np.all(np.isfinite(flat)) or np.any(flat != np.round(flat)):
            raise VolumeIOError(f"payload is not integer-valued for {dtype}")
        info = np.iinfo(dtype)
        if flat.size and (flat.min() < info.min or flat.max() > info.max):
            raise VolumeIOError(f"payload out of range for {dtype}")


def write_nifti(path, grid: Grid, payload, channels: int = 1, dtype=np.float32) -> None:
    """Write a volume or multi-channel volume as NIfTI-1.

    Args:
        path: Output ``.nii`` path.
        grid: Lattice geometry.
        payload: ``(channels, *dims)`` array, ``dims`` array for one channel,
            or a flat x-fastest, channel-slowest sequence.
        channels: Number of channels (4th dimension when > 1).
        dtype: One of uint8, int16, float32 or the matching NIfTI code.
    """
    code = _dtype_code(dtype)
    npdt = NIFTI_DTYPES[code]
    flat = _payload_array(grid, payload, channels)
    _check_representable(flat, npdt)
    data = flat.astype(npdt)

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    ndim = 4 if channels > 1 else 3
    dim = [ndim, *grid.dims, channels if channels > 1 else 1, 1, 1, 1]
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<hh", hdr, 70, code, npdt.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *grid.spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<fff", hdr, 108, float(VOX_OFFSET), 1.0, 0.0)
    struct.pack_into("<B", hdr, 123, 2)  # xyzt_units: mm
    struct.pack_into("<hh", hdr, 252, 0, 2)  # qform_code, sform_code (aligned)
    sx, sy, sz = grid.spacing
    ox, oy, oz = grid.origin
    struct.pack_into("<12f", hdr, 280, sx, 0, 0, ox, 0, sy, 0, oy, 0, 0, sz, oz)
    hdr[344:348] = b"n+1\x00"
    with open(path, "wb") as f:
        f.write(bytes(hdr))
        f.write(b"\x00\x00\x00\x00")
        f.write(data.tobytes())


def read_nifti(path) -> NiftiVolume:
    """Read a NIfTI-1 file from the supported subset."""
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise TruncatedPayloadError(f"{path}: file shorter than a NIfTI-1 header")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    dim = struct.unpack_from("<8h", raw, 40)
    if sizeof_hdr != HEADER_SIZE or not 1 <= dim[0] <= 7:
        if struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
            raise BigEndianError(f"{path}: big-endian NIfTI files are not supported")
        raise BadMagicError(f"{path}: not a NIfTI-1 header")
    if raw[344:348] != b"n+1\x00":
        raise BadMagicError(f"{path}: bad magic {raw[344:348]!r}")
    code, _bitpix = struct.unpack_from("<hh", raw, 70)
    if code not in NIFTI_DTYPES:
        raise UnsupportedDatatypeError(f"{path}: unsupported datatype {code}")
    pixdim = struct.unpack_from("<8f", raw, 76)
    vox_offset, slope, inter = struct.unpack_from("<fff", raw, 108)
    if vox_offset < VOX_OFFSET:
        raise VolumeIOError(f"{path}: vox_offset {vox_offset} < {VOX_OFFSET}")
    if slope not in (0.0, 1.0) or inter != 0.0:
        raise RescaleError(f"{path}: intensity rescaling (scl_slope={slope}, scl_inter={inter}) is not supported")
    _qcode, scode = struct.unpack_from("<hh", raw, 252)
    srow = np.array(struct.unpack_from("<12f", raw, 280), dtype=np.float64).reshape(3, 4)
    lin = srow[:, :3]
    if scode <= 0 or np.any(lin[~np.eye(3, dtype=bool)] != 0) or np.any(np.diag(lin) <= 0):
        raise ObliqueAffineError(f"{path}: sform must be present and axis-aligned with positive scales")

    ndim = dim[0]
    if ndim < 3 and ndim >= 1:
        dims = tuple(list(dim[1:ndim + 1]) + [1] * (3 - ndim))
    else:
        dims = tuple(dim[1:4])
    channels = int(np.prod(dim[4:ndim + 1])) if ndim > 3 else 1
    grid = Grid(dims, tuple(float(p) for p in pixdim[1:4]), tuple(srow[:, 3]))
    npdt = NIFTI_DTYPES[code]
    nbytes = channels * grid.size * npdt.itemsize
    start = int(vox_offset)
    if len(raw) < start + nbytes:
        raise TruncatedPayloadError(f"{path}: truncated payload")
    flat = np.frombuffer(raw, dtype=npdt, count=channels * grid.size, offset=start)
    data = unflatten_x_fastest(flat.astype(np.float64).reshape(channels, grid.size), dims)
    return NiftiVolume(grid, data, channels, code)


# ---------------------------------------------------------------------------
# UAF1
# ---------------------------------------------------------------------------

UAF_MAGIC = b"UAF1"
UAF_HEADER = struct.Struct("<4s3I3f3fIB")
UAF_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<u2"), 2: np.dtype("<u1")}
FLOAT32, UINT16, UINT8 = 0, 1, 2


class RawVolume(NamedTuple):
    grid: Grid
    data: np.ndarray  # (channels, *dims) in the stored dtype
    dtype_code: int

    @property
    def channels(self) -> int:
        return self.data.shape[0]


def uaf_payload_size(dims, channels: int, dtype_code: int) -> int:
    return int(channels) * int(np.prod(dims)) * UAF_DTYPES[dtype_code].itemsize


def encode_uaf(grid: Grid, payload, channels: int, dtype_code: int = FLOAT32) -> bytes:
    if dtype_code not in UAF_DTYPES:
        raise UnsupportedDatatypeError(f"unsupported UAF1 dtype code {dtype_code}")
    npdt = UAF_DTYPES[dtype_code]
    flat = _payload_array(grid, payload, channels)
    _check_representable(flat, npdt)
    head = UAF_HEADER.pack(UAF_MAGIC, *grid.dims, *grid.spacing, *grid.origin, channels, dtype_code)
    return head + flat.astype(npdt).tobytes()


def decode_uaf(raw: bytes, source="<bytes>") -> RawVolume:
    if len(raw) < UAF_HEADER.size or raw[:4] != UAF_MAGIC:
        raise BadMagicError(f"{source}: bad magic")
    fields = UAF_HEADER.unpack_from(raw, 0)
    dims, spacing, origin = fields[1:4], fields[4:7], fields[7:10]
    channels, code = fields[10], fields[11]
    if code not in UAF_DTYPES:
        raise UnsupportedDatatypeError(f"{source}: unsupported dtype code {code}")
    size = uaf_payload_size(dims, channels, code)
    body = len(raw) - UAF_HEADER.size
    if body < size:
        raise TruncatedPayloadError(f"{source}: truncated payload")
    if body > size:
        raise LengthMismatchError(f"{source}: {body - size} trailing bytes after payload")
    grid = Grid(dims, spacing, origin)
    flat = np.frombuffer(raw, dtype=UAF_DTYPES[code], offset=UAF_HEADER.size)
    data = unflatten_x_fastest(flat.reshape(channels, grid.size).astype(UAF_DTYPES[code].newbyteorder("=")), dims)
    return RawVolume(grid, data, code)


def write_uaf(path, grid: Grid, payload, channels: int, dtype_code: int = FLOAT32) -> None:
    Path(path).write_bytes(encode_uaf(grid, payload, channels, dtype_code))


def read_uaf(path) -> RawVolume:
    return decode_uaf(Path(path).read_bytes(), source=path)


def write_raw_field(path, obj) -> None:
    """Write a :class:`MeanStdField`, :class:`LabelVolume` or :class:`Mask` as UAF1."""
    if isinstance(obj, MeanStdField):
        payload = np.concatenate([obj.mean, obj.std, obj.mask.values[None].astype(float)])
        write_uaf(path, obj.grid, payload, 7, FLOAT32)
    elif isinstance(obj, LabelVolume):
        write_uaf(path, obj.grid, obj.labels[None], 1, UINT16)
    elif isinstance(obj, Mask):
        write_uaf(path, obj.grid, obj.values[None].astype(np.uint8), 1, UINT8)
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__} as a raw field")


def read_raw_field(path):
    """Read a UAF1 file back into the typed object it encodes.

    7 float32 channels -> MeanStdField, 1 uint16 channel -> LabelVolume,
    1 uint8 channel -> Mask. Anything else is returned as a RawVolume.
    """
    vol = read_uaf(path)
    if vol.dtype_code == FLOAT32 and vol.channels == 7:
        data = vol.data.astype(np.float64)
        mask = data[6]
        if not np.all((mask == 0) | (mask == 1)):
            raise VolumeIOError(f"{path}: mask channel is not binary")
        return MeanStdField(vol.grid, data[:3], data[3:6], Mask(vol.grid, mask.astype(bool)))
    if vol.dtype_code == UINT16 and vol.channels == 1:
        return LabelVolume(vol.grid, vol.data[0])
    if vol.dtype_code == UINT8 and vol.channels == 1:
        return Mask(vol.grid, vol.data[0])
    return vol
