"""Read-only NIfTI-1 loader for CT volumes.

Supports the 348-byte v1 header (optionally gzip-compressed, single-file
``n+1`` or ``.hdr``/``.img`` pair ``ni1``), scalar datatypes int16 /
float32 / float64, and qform/sform affines whose rotation part is an
axis-aligned permutation/flip.  The sform is preferred when both are set.
Stored values are mapped to Hounsfield units through scl_slope/scl_inter.

The header origin locates the CENTER of the first voxel; the in-memory
grid corner is therefore origin - direction @ (spacing / 2).
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import UnsupportedFormatError, VolumeDataError, VolumeFormatError
from .volume import CtVolume, HounsfieldScaling

HEADER_SIZE = 348

# (struct code, field name) for the v1 header, in file order.
_FIELDS = [
    ("i", "sizeof_hdr"),
    ("10s", "data_type"),
    ("18s", "db_name"),
    ("i", "extents"),
    ("h", "session_error"),
    ("b", "regular"),
    ("b", "dim_info"),
    ("8h", "dim"),
    ("f", "intent_p1"),
    ("f", "intent_p2"),
    ("f", "intent_p3"),
    ("h", "intent_code"),
    ("h", "datatype"),
    ("h", "bitpix"),
    ("h", "slice_start"),
    ("8f", "pixdim"),
    ("f", "vox_offset"),
    ("f", "scl_slope"),
    ("f", "scl_inter"),
    ("h", "slice_end"),
    ("b", "slice_code"),
    ("b", "xyzt_units"),
    ("f", "cal_max"),
    ("f", "cal_min"),
    ("f", "slice_duration"),
    ("f", "toffset"),
    ("i", "glmax"),
    ("i", "glmin"),
    ("80s", "descrip"),
    ("24s", "aux_file"),
    ("h", "qform_code"),
    ("h", "sform_code"),
    ("f", "quatern_b"),
    ("f", "quatern_c"),
    ("f", "quatern_d"),
    ("f", "qoffset_x"),
    ("f", "qoffset_y"),
    ("f", "qoffset_z"),
    ("4f", "srow_x"),
    ("4f", "srow_y"),
    ("4f", "srow_z"),
    ("16s", "intent_name"),
    ("4s", "magic"),
]
_STRUCT_FMT = "".join(code for code, _ in _FIELDS)
assert struct.calcsize("=" + _STRUCT_FMT) == HEADER_SIZE

_DATATYPES = {
    4: np.dtype(np.int16),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}


def _read_bytes(path: Path) -> bytes:
    try:
        raw = path.read_bytes()
        if raw[:2] == b"\x1f\x8b":
            return gzip.decompress(raw)
    except (OSError, gzip.BadGzipFile) as exc:
        raise VolumeFormatError(f"cannot read {path}: {exc}") from exc
    return raw


def _unpack_header(blob: bytes, path: Path) -> dict:
    if len(blob) < HEADER_SIZE:
        raise VolumeFormatError(
            f"{path}: file too short for a NIfTI-1 header ({len(blob)} bytes)"
        )
    magic = blob[344:348]
    if magic not in (b"n+1\0", b"ni1\0"):
        raise VolumeFormatError(f"{path}: bad magic field {magic!r}, not NIfTI-1")
    for order in ("<", ">"):
        if struct.unpack(order + "i", blob[:4])[0] == HEADER_SIZE:
            byte_order = order
            break
    else:
        raise VolumeFormatError(f"{path}: sizeof_hdr field is not 348 in either byte order")

    values = struct.unpack(byte_order + _STRUCT_FMT, blob[:HEADER_SIZE])
    hdr: dict = {"byte_order": byte_order}
    pos = 0
    for code, name in _FIELDS:
        n = int(code[:-1]) if len(code) > 1 else 1
        if code.endswith("s"):
            hdr[name] = values[pos]
            pos += 1
        elif n == 1:
            hdr[name] = values[pos]
            pos += 1
        else:
            hdr[name] = values[pos:pos + n]
            pos += n
    return hdr


def _quaternion_rotation(hdr: dict) -> np.ndarray:
    b, c, d = hdr["quatern_b"], hdr["quatern_c"], hdr["quatern_d"]
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(a2) if a2 > 0 else 0.0
    return np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * b * c - 2 * a * d, 2 * b * d + 2 * a * c],
            [2 * b * c + 2 * a * d, a * a + c * c - b * b - d * d, 2 * c * d - 2 * a * b],
            [2 * b * d - 2 * a * c, 2 * c * d + 2 * a * b, a * a + d * d - c * c - b * b],
        ]
    )


def _snap_direction(cols: np.ndarray, path: Path) -> np.ndarray:
    """Validate an axis-aligned rotation part and snap it to exact 0/±1."""
    snapped = np.zeros((3, 3))
    used = []
    for m in range(3):
        col = cols[:, m]
        a = int(np.argmax(np.abs(col)))
        if abs(abs(col[a]) - 1.0) > 1e-6 or np.abs(np.delete(col, a)).max() > 1e-6:
            raise UnsupportedFormatError(
                f"{path}: direction matrix is not an axis-aligned permutation/flip; "
                "oblique volumes must be resampled upstream"
            )
        snapped[a, m] = 1.0 if col[a] > 0 else -1.0
        used.append(a)
    if len(set(used)) != 3:
        raise UnsupportedFormatError(f"{path}: direction matrix does not permute the axes")
    return snapped


def _affine(hdr: dict, path: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(direction, spacing, origin) from sform, else qform, else pixdim."""
    if hdr["sform_code"] > 0:
        rows = np.array([hdr["srow_x"], hdr["srow_y"], hdr["srow_z"]], dtype=np.float64)
        rot = rows[:, :3]
        origin = rows[:, 3]
        spacing = np.sqrt((rot * rot).sum(axis=0))
        if np.any(spacing <= 0) or not np.isfinite(spacing).all():
            raise VolumeFormatError(f"{path}: sform columns give non-positive spacing")
        direction = _snap_direction(rot / spacing, path)
        return direction, spacing, origin

    pixdim = np.array(hdr["pixdim"], dtype=np.float64)
    spacing = pixdim[1:4]
    if np.any(spacing <= 0) or not np.isfinite(spacing).all():
        raise VolumeFormatError(f"{path}: pixdim grid spacings must be positive, got {spacing}")

    if hdr["qform_code"] > 0:
        rot = _quaternion_rotation(hdr)
        qfac = -1.0 if pixdim[0] == -1.0 else 1.0
        rot = rot @ np.diag([1.0, 1.0, qfac])
        origin = np.array([hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]], dtype=np.float64)
        return _snap_direction(rot, path), spacing, origin

    return np.eye(3), spacing, np.zeros(3)


def load_nifti(path: str | Path) -> CtVolume:
    """Load a NIfTI-1 volume into Hounsfield units.

    Trailing dimensions of size 1 are squeezed; a 4th or higher dimension
    larger than 1 is rejected.
    """
    path = Path(path)
    if not path.exists():
        raise VolumeFormatError(f"{path}: no such file")
    blob = _read_bytes(path)
    hdr = _unpack_header(blob, path)

    dim = hdr["dim"]
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise VolumeFormatError(f"{path}: dim[0] must be 1..7, got {ndim}")
    sizes = []
    for i in range(1, 8):
        if i <= ndim:
            if dim[i] < 1:
                raise VolumeFormatError(f"{path}: dim[{i}] must be positive, got {dim[i]}")
            sizes.append(int(dim[i]))
        else:
            sizes.append(1)
    if any(n != 1 for n in sizes[3:]):
        raise UnsupportedFormatError(
            f"{path}: 4th and higher dimensions must have size 1, got {sizes[3:]}"
        )
    nx, ny, nz = sizes[:3]

    if hdr["datatype"] not in _DATATYPES:
        raise UnsupportedFormatError(
            f"{path}: unsupported datatype code {hdr['datatype']} "
            "(supported: int16=4, float32=16, float64=64)"
        )
    dtype = _DATATYPES[hdr["datatype"]].newbyteorder(hdr["byte_order"])

    if hdr["magic"] == b"n+1\0":
        offset = int(hdr["vox_offset"])
        if offset < HEADER_SIZE:
            raise VolumeFormatError(f"{path}: vox_offset {offset} overlaps the header")
        data_blob = blob
    else:
        name = path.name
        if name.endswith(".hdr.gz"):
            stem = name[:-7]
        elif name.endswith(".hdr"):
            stem = name[:-4]
        else:
            stem = name
        candidates = [path.with_name(stem + ".img"), path.with_name(stem + ".img.gz")]
        for cand in candidates:
            if cand.exists():
                data_blob = _read_bytes(cand)
                break
        else:
            raise VolumeFormatError(f"{path}: ni1 header but no matching .img file")
        offset = int(hdr["vox_offset"])

    count = nx * ny * nz
    need = offset + count * dtype.itemsize
    if len(data_blob) < need:
        raise VolumeFormatError(
            f"{path}: truncated voxel data ({len(data_blob)} bytes, need {need})"
        )
    stored = np.frombuffer(data_blob, dtype=dtype, count=count, offset=offset)
    # disk order is x-fastest
    stored = stored.reshape((nz, ny, nx)).transpose(2, 1, 0)

    slope = float(hdr["scl_slope"])
    inter = float(hdr["scl_inter"])
    if slope == 0.0 or not np.isfinite(slope):
        # convention: zero slope means "no scaling stored"
        slope, inter = 1.0, 0.0
    if not np.isfinite(inter):
        inter = 0.0
    scaling = HounsfieldScaling(slope=slope, intercept=inter)
    hu = scaling.apply(stored)

    if not np.isfinite(hu).all():
        bad = tuple(int(x) for x in np.argwhere(~np.isfinite(hu))[0])
        raise VolumeDataError(f"{path}: non-finite HU value at voxel index {bad}")

    direction, spacing, origin = _affine(hdr, path)
    corner = origin - direction @ (spacing / 2.0)
    return CtVolume(
        dims=(nx, ny, nz),
        spacing=tuple(spacing),
        corner=tuple(corner),
        direction=direction,
        voxels=hu,
    )
