"""Volume container plus VOL1 and minimal NIfTI-1 I/O.

VOL1 layout (little-endian)::

    b"VOL1" | u32 dim0 | u32 dim1 | u32 dim2 | f32 sp0 | f32 sp1 | f32 sp2 | f32 payload (row-major)

NIfTI-1 support is read-only and limited to single-file (``n+1``),
uncompressed, 3D volumes stored as float32 or int16.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

VOL1_MAGIC = b"VOL1"
_VOL1_HEADER = struct.Struct("<4s3I3f")

NIFTI_HEADER_SIZE = 348
NIFTI_MAGIC_OFFSET = 344
_NIFTI_DTYPES = {16: "f4", 4: "i2"}  # datatype code -> numpy kind

PathLike = Union[str, os.PathLike]


class VolumeFormatError(ValueError):
    """Bad magic, truncated payload or malformed header."""


class UnsupportedFormatError(VolumeFormatError):
    """A well-formed file using a feature outside the supported subset."""


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple = (1.5, 1.5, 1.5)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"Volume data must be 3D with positive dims, got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Volume)
            and self.spacing == other.spacing
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


def vol1_bytes(vol: Volume) -> bytes:
    header = _VOL1_HEADER.pack(VOL1_MAGIC, *vol.shape, *vol.spacing)
    return header + vol.data.astype("<f4").tobytes(order="C")


def write_vol1(vol: Volume, path: PathLike) -> None:
    Path(path).write_bytes(vol1_bytes(vol))


def parse_vol1(buf: bytes) -> Volume:
    if len(buf) < _VOL1_HEADER.size or buf[:4] != VOL1_MAGIC:
        raise VolumeFormatError("not a VOL1 file (bad magic)")
    _, d0, d1, d2, s0, s1, s2 = _VOL1_HEADER.unpack_from(buf)
    n = d0 * d1 * d2
    payload = buf[_VOL1_HEADER.size:]
    if len(payload) != 4 * n:
        raise VolumeFormatError(f"VOL1 payload has {len(payload)} bytes, expected {4 * n}")
    data = np.frombuffer(payload, dtype="<f4").reshape(d0, d1, d2)
    return Volume(data.astype(np.float32), (s0, s1, s2))


def parse_nifti1(buf: bytes) -> Volume:
    if len(buf) < NIFTI_HEADER_SIZE:
        raise VolumeFormatError("truncated NIfTI-1 header")
    if struct.unpack_from("<i", buf, 0)[0] == NIFTI_HEADER_SIZE:
        endian = "<"
    elif struct.unpack_from(">i", buf, 0)[0] == NIFTI_HEADER_SIZE:
        endian = ">"
    else:
        raise VolumeFormatError("sizeof_hdr is not 348")
    magic = buf[NIFTI_MAGIC_OFFSET:NIFTI_MAGIC_OFFSET + 4]
    if magic != b"n+1\x00":
        if magic == b"ni1\x00":
            raise UnsupportedFormatError("two-file NIfTI (.hdr/.img) is not supported")
        raise VolumeFormatError(f"bad NIfTI-1 magic {magic!r}")

    dim = struct.unpack_from(endian + "8h", buf, 40)
    datatype = struct.unpack_from(endian + "h", buf, 70)[0]
    pixdim = struct.unpack_from(endian + "8f", buf, 76)
    vox_offset = int(struct.unpack_from(endian + "f", buf, 108)[0])
    slope, inter = struct.unpack_from(endian + "2f", buf, 112)

    ndim = dim[0]
    if ndim < 3 or any(d != 1 for d in dim[4:ndim + 1]):
        raise UnsupportedFormatError(f"only 3D volumes are supported (dim={dim})")
    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedFormatError(f"unsupported NIfTI datatype code {datatype}")
    shape = tuple(int(d) for d in dim[1:4])
    dtype = np.dtype(endian + _NIFTI_DTYPES[datatype])
    nbytes = int(np.prod(shape)) * dtype.itemsize
    if vox_offset < NIFTI_HEADER_SIZE or len(buf) < vox_offset + nbytes:
        raise VolumeFormatError("truncated NIfTI-1 payload")
    # NIfTI stores the first axis fastest.
    raw = np.frombuffer(buf, dtype=dtype, count=int(np.prod(shape)), offset=vox_offset)
    data = raw.reshape(shape, order="F").astype(np.float32)
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = data * (slope or 1.0) + inter
    spacing = tuple(abs(p) if p else 1.0 for p in pixdim[1:4])
    return Volume(data, spacing)


def read_volume(locator: PathLike) -> Volume:
    path = Path(locator)
    buf = path.read_bytes()
    if buf[:4] == VOL1_MAGIC:
        return parse_vol1(buf)
    if path.suffix == ".gz":
        raise UnsupportedFormatError("compressed NIfTI is not supported")
    return parse_nifti1(buf)
