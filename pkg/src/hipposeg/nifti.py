"""Minimal NIfTI-1 single-file (.nii / .nii.gz) reader and writer.

Supports the subset of the format this package needs: 3D scalar images,
common datatypes, orientation from the sform or qform affine. Files are
written with an sform affine and deterministic bytes (gzip mtime pinned
to zero so identical volumes produce identical .nii.gz files).
"""
from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
MAGIC_SINGLE = b"n+1\x00"

# NIfTI datatype code -> numpy dtype (little-endian applied at read time)
_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}
_DTYPE_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


class NiftiError(ValueError):
    """Raised for unreadable or unsupported NIfTI files."""


def _open(path: Path, mode: str):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def _write_bytes(path: Path, payload: bytes) -> None:
    if str(path).endswith(".gz"):
        import io

        buf = io.BytesIO()
        # mtime=0 keeps output bytes independent of wall-clock time
        with gzip.GzipFile(filename="", mode="wb", fileobj=buf, mtime=0) as gz:
            gz.write(payload)
        payload = buf.getvalue()
    path.write_bytes(payload)


def _quaternion_to_rotation(b: float, c: float, d: float) -> np.ndarray:
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(max(a2, 0.0))
    return np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )


def read(
    path, allow_missing_orientation: bool = False
) -> tuple[np.ndarray, np.ndarray | None, tuple[float, float, float]]:
    """Read a NIfTI-1 file.

    Returns (data, affine, spacing) where data is a 3D array in file axis
    order, affine the 4x4 voxel-to-world matrix, spacing the per-axis voxel
    size in mm. Raises NiftiError when the file has no usable orientation
    (neither sform nor qform set), unless allow_missing_orientation is set,
    in which case affine is None.
    """
    path = Path(path)
    if not path.exists():
        raise NiftiError(f"no such file: {path}")
    with _open(path, "rb") as f:
        hdr = f.read(HEADER_SIZE)
        if len(hdr) < HEADER_SIZE:
            raise NiftiError(f"truncated NIfTI header in {path}")
        (sizeof_hdr,) = struct.unpack("<i", hdr[0:4])
        if sizeof_hdr == 348:
            end = "<"
        elif struct.unpack(">i", hdr[0:4])[0] == 348:
            end = ">"
        else:
            raise NiftiError(f"not a NIfTI-1 file: {path}")

        dim = struct.unpack(end + "8h", hdr[40:56])
        datatype, _bitpix = struct.unpack(end + "2h", hdr[70:74])
        pixdim = struct.unpack(end + "8f", hdr[76:108])
        (vox_offset,) = struct.unpack(end + "f", hdr[108:112])
        scl_slope, scl_inter = struct.unpack(end + "2f", hdr[112:120])
        qform_code, sform_code = struct.unpack(end + "2h", hdr[252:256])
        quat = struct.unpack(end + "6f", hdr[256:280])
        srow = np.array(struct.unpack(end + "12f", hdr[280:328])).reshape(3, 4)
        magic = hdr[344:348]
        if magic not in (MAGIC_SINGLE, b"ni1\x00"):
            raise NiftiError(f"bad NIfTI magic in {path}")

        ndim = dim[0]
        if ndim < 3:
            raise NiftiError(f"{path}: expected a 3D volume, header says {ndim}D")
        shape = tuple(dim[1 : 1 + ndim])
        if any(n > 1 for n in shape[3:]):
            raise NiftiError(f"{path}: expected a 3D volume, got shape {shape}")
        shape = shape[:3]

        if datatype not in _DTYPES:
            raise NiftiError(f"{path}: unsupported NIfTI datatype code {datatype}")
        dtype = np.dtype(_DTYPES[datatype]).newbyteorder(end)

        f.seek(int(vox_offset))
        count = int(np.prod(shape))
        raw = f.read(count * dtype.itemsize)
        if len(raw) < count * dtype.itemsize:
            raise NiftiError(f"{path}: truncated data section")
        data = np.frombuffer(raw, dtype=dtype, count=count).reshape(shape, order="F")

    if sform_code > 0:
        affine = np.vstack([srow, [0.0, 0.0, 0.0, 1.0]])
    elif qform_code > 0:
        rot = _quaternion_to_rotation(quat[0], quat[1], quat[2])
        qfac = -1.0 if pixdim[0] == -1.0 else 1.0
        zooms = np.array([pixdim[1], pixdim[2], pixdim[3] * qfac])
        affine = np.eye(4)
        affine[:3, :3] = rot * zooms
        affine[:3, 3] = quat[3:6]
    elif allow_missing_orientation:
        affine = None
    else:
        raise NiftiError(
            f"{path}: no orientation metadata (both sform_code and qform_code are 0)"
        )

    spacing = tuple(float(abs(p)) if p != 0 else 1.0 for p in pixdim[1:4])
    data = np.asarray(data)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = data.astype(np.float32) * slope + scl_inter
    return data, affine, spacing


def write(path, data: np.ndarray, affine: np.ndarray, spacing=None) -> None:
    """Write a 3D array as a single-file NIfTI-1 with an sform affine."""
    path = Path(path)
    data = np.asarray(data)
    if data.ndim != 3:
        raise NiftiError(f"write expects a 3D array, got shape {data.shape}")
    affine = np.asarray(affine, dtype=np.float64)
    if affine.shape != (4, 4):
        raise NiftiError(f"affine must be 4x4, got {affine.shape}")
    if data.dtype == np.bool_:
        data = data.astype(np.uint8)
    if np.dtype(data.dtype.newbyteorder("=")) not in _DTYPE_CODES:
        data = data.astype(np.float32)
    data = data.astype(data.dtype.newbyteorder("<"), copy=False)
    code = _DTYPE_CODES[np.dtype(data.dtype.newbyteorder("="))]
    if spacing is None:
        spacing = tuple(float(np.linalg.norm(affine[:3, i])) for i in range(3))

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, code, data.dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, 352.0)  # vox_offset
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform_code=0, sform_code=1
    struct.pack_into("<12f", hdr, 280, *affine[:3, :].ravel())
    hdr[344:348] = MAGIC_SINGLE
    payload = bytes(hdr) + b"\x00" * 4 + np.asfortranarray(data).tobytes(order="F")
    _write_bytes(path, payload)
