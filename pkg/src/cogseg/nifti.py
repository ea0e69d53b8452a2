"""Minimal single-file NIfTI-1 reader/writer.

Supports the subset of the format this project needs: 3D volumes stored
in one `.nii` or `.nii.gz` file, scalar datatypes, voxel spacing from
pixdim. Arrays are exchanged in (z, y, x) index order with spacing given
as (z, y, x) in mm; on disk the data follows the NIfTI convention of x
varying fastest.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
VOX_OFFSET = 352

_CODE_TO_DTYPE = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}
_DTYPE_TO_CODE = {np.dtype(t): c for c, t in _CODE_TO_DTYPE.items()}


def read_volume(path: str | Path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Read a NIfTI-1 volume. Returns (voxels in (z, y, x) order, spacing)."""
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < VOX_OFFSET:
        raise ValueError(f"{path}: too short to be a NIfTI-1 file")

    end = "<"
    if struct.unpack("<i", raw[:4])[0] != HEADER_SIZE:
        if struct.unpack(">i", raw[:4])[0] != HEADER_SIZE:
            raise ValueError(f"{path}: bad sizeof_hdr, not a NIfTI-1 file")
        end = ">"
    magic = raw[344:348]
    if magic != b"n+1\x00":
        if magic[:3] == b"ni1":
            raise ValueError(f"{path}: two-file NIfTI (.hdr/.img) is not supported")
        raise ValueError(f"{path}: bad magic {magic!r}")

    dim = struct.unpack(end + "8h", raw[40:56])
    if dim[0] < 3 or any(d > 1 for d in dim[4 : dim[0] + 1]):
        raise ValueError(f"{path}: only 3D volumes are supported (dim={dim})")
    nx, ny, nz = dim[1], dim[2], dim[3]

    datatype = struct.unpack(end + "h", raw[70:72])[0]
    if datatype not in _CODE_TO_DTYPE:
        raise ValueError(f"{path}: unsupported datatype code {datatype}")
    pixdim = struct.unpack(end + "8f", raw[76:108])
    vox_offset = int(struct.unpack(end + "f", raw[108:112])[0])
    scl_slope, scl_inter = struct.unpack(end + "2f", raw[112:120])

    dtype = np.dtype(_CODE_TO_DTYPE[datatype]).newbyteorder(end)
    count = nx * ny * nz
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset)
    # Disk layout is Fortran order over (x, y, z); we hand out (z, y, x).
    voxels = data.reshape((nx, ny, nz), order="F").transpose(2, 1, 0)
    if scl_slope not in (0.0, 1.0) and np.isfinite(scl_slope):
        voxels = voxels * scl_slope + scl_inter
    elif scl_slope == 1.0 and scl_inter != 0.0:
        voxels = voxels + scl_inter
    spacing = (float(pixdim[3]), float(pixdim[2]), float(pixdim[1]))
    return np.ascontiguousarray(voxels), spacing


def write_volume(path: str | Path, voxels: np.ndarray, spacing) -> None:
    """Write a 3D array in (z, y, x) order with (z, y, x) spacing in mm.

    Gzip output is written with mtime=0 so identical volumes produce
    byte-identical files.
    """
    voxels = np.asarray(voxels)
    if voxels.ndim != 3:
        raise ValueError(f"expected a 3D array, got shape {voxels.shape}")
    if voxels.dtype not in _DTYPE_TO_CODE:
        voxels = voxels.astype(np.float32)
    code = _DTYPE_TO_CODE[voxels.dtype]
    nz, ny, nx = voxels.shape
    dz, dy, dx = (float(s) for s in spacing)

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, voxels.dtype.itemsize * 8)  # bitpix
    struct.pack_into("<8f", hdr, 76, 1.0, dx, dy, dz, 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    hdr[123] = 2  # xyzt_units: mm
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform_code=0, sform_code=1
    struct.pack_into("<4f", hdr, 280, dx, 0, 0, 0)
    struct.pack_into("<4f", hdr, 296, 0, dy, 0, 0)
    struct.pack_into("<4f", hdr, 312, 0, 0, dz, 0)
    hdr[344:348] = b"n+1\x00"

    body = voxels.transpose(2, 1, 0).tobytes(order="F")
    blob = bytes(hdr) + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + body
    path = Path(path)
    if path.suffix == ".gz":
        blob = gzip.compress(blob, mtime=0)
    path.write_bytes(blob)
