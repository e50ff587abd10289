"""In-memory CT volume model and the raw sidecar test-fixture format.

A volume is an axis-aligned voxel lattice in world (mm) coordinates.
Voxel ``(i, j, k)`` occupies the half-open box ``[corner + (i,j,k)*spacing,
corner + (i+1,j+1,k+1)*spacing)`` mapped through the direction matrix, so
lattice planes land exactly on voxel faces.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import UnsupportedFormatError, VolumeDataError, VolumeFormatError

# Tolerance for accepting a direction matrix as orthonormal.
ORTHO_TOL = 1e-6

RAW_MAGIC = "rawct 1"


@dataclass(frozen=True)
class HounsfieldScaling:
    """Affine map from stored voxel values to Hounsfield units."""

    slope: float = 1.0
    intercept: float = 0.0

    def __post_init__(self) -> None:
        if self.slope == 0.0 or not np.isfinite(self.slope):
            raise ValueError(f"scaling slope must be non-zero and finite, got {self.slope}")
        if not np.isfinite(self.intercept):
            raise ValueError(f"scaling intercept must be finite, got {self.intercept}")

    def apply(self, values: np.ndarray) -> np.ndarray:
        return self.slope * np.asarray(values, dtype=np.float64) + self.intercept


@dataclass(frozen=True)
class CtVolume:
    """Immutable voxel grid of Hounsfield units.

    Attributes:
        dims: voxel counts (Nx, Ny, Nz), each >= 1.
        spacing: voxel size in mm (dx, dy, dz), each > 0.
        corner: world position (mm) of the grid corner at continuous index
            (0, 0, 0); the first voxel's center sits half a voxel inward.
        direction: 3x3 orthonormal matrix mapping index axes to world axes.
        voxels: float64 array of shape dims, indexed as voxels[i, j, k].
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    corner: tuple[float, float, float]
    direction: np.ndarray
    voxels: np.ndarray

    def __post_init__(self) -> None:
        dims = tuple(int(n) for n in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        corner = tuple(float(c) for c in self.corner)
        direction = np.array(self.direction, dtype=np.float64)
        voxels = np.asarray(self.voxels, dtype=np.float64)

        if len(dims) != 3 or any(n < 1 for n in dims):
            raise ValueError(f"dims must be three positive counts, got {dims}")
        if voxels.shape != dims:
            raise ValueError(f"voxel array shape {voxels.shape} does not match dims {dims}")
        if any(s <= 0 or not np.isfinite(s) for s in spacing):
            raise ValueError(f"spacing must be strictly positive and finite, got {spacing}")
        if any(not np.isfinite(c) for c in corner):
            raise ValueError(f"corner must be finite, got {corner}")
        if direction.shape != (3, 3):
            raise ValueError("direction must be a 3x3 matrix")
        gram = direction.T @ direction
        if not np.allclose(gram, np.eye(3), atol=ORTHO_TOL):
            raise ValueError("direction matrix is not orthonormal within 1e-6")
        if not np.isfinite(voxels).all():
            bad = tuple(int(x) for x in np.argwhere(~np.isfinite(voxels))[0])
            raise VolumeDataError(f"non-finite HU value at voxel index {bad}")

        voxels.flags.writeable = False
        direction.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "corner", corner)
        object.__setattr__(self, "direction", direction)
        object.__setattr__(self, "voxels", voxels)

    # -- world-coordinate helpers ------------------------------------------

    def world_center(self) -> np.ndarray:
        """World position of the grid center (default rotation pivot)."""
        half = 0.5 * np.array(self.dims, dtype=np.float64) * np.array(self.spacing)
        return np.array(self.corner) + self.direction @ half

    def world_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """(lo, hi) corners of the world-space bounding box."""
        return self.grid.lo.copy(), self.grid.hi.copy()

    def voxel_center_world(self, i: int, j: int, k: int) -> np.ndarray:
        idx = (np.array((i, j, k), dtype=np.float64) + 0.5) * np.array(self.spacing)
        return np.array(self.corner) + self.direction @ idx

    @cached_property
    def grid(self) -> "GridFrame":
        return GridFrame(self)

    @cached_property
    def content_hash(self) -> str:
        """SHA-256 of the voxel payload (x-fastest float64 bytes) plus dims."""
        h = hashlib.sha256()
        h.update(np.array(self.dims, dtype="<i8").tobytes())
        h.update(self.voxels.astype("<f8", copy=False).ravel(order="F").tobytes())
        return h.hexdigest()


class GridFrame:
    """World-axis-aligned view of a volume's lattice.

    Valid only for direction matrices that are signed permutations: each
    world axis then corresponds to exactly one index axis, and voxel faces
    are planes perpendicular to the world axes.  ``voxels`` is transposed
    so array axis ``a`` runs along world axis ``a``; flips are absorbed
    into the signed ``step``.
    """

    __slots__ = ("base", "step", "nvox", "lo", "hi", "perm", "voxels")

    def __init__(self, volume: CtVolume) -> None:
        d = volume.direction
        perm = np.empty(3, dtype=np.int64)
        base = np.empty(3, dtype=np.float64)
        step = np.empty(3, dtype=np.float64)
        nvox = np.empty(3, dtype=np.int64)
        for a in range(3):
            m = int(np.argmax(np.abs(d[a])))
            if abs(abs(d[a, m]) - 1.0) > ORTHO_TOL:
                raise UnsupportedFormatError(
                    "direction matrix is not an axis-aligned permutation/flip; "
                    "oblique volumes are not supported"
                )
            off = [abs(d[a, n]) for n in range(3) if n != m]
            if max(off) > ORTHO_TOL:
                raise UnsupportedFormatError(
                    "direction matrix is not an axis-aligned permutation/flip; "
                    "oblique volumes are not supported"
                )
            perm[a] = m
            base[a] = volume.corner[a]
            step[a] = volume.spacing[m] if d[a, m] > 0 else -volume.spacing[m]
            nvox[a] = volume.dims[m]
        if len(set(perm.tolist())) != 3:
            raise UnsupportedFormatError("direction matrix does not permute the axes")

        far = base + step * nvox
        self.base = base
        self.step = step
        self.nvox = nvox
        self.lo = np.minimum(base, far)
        self.hi = np.maximum(base, far)
        self.perm = perm
        self.voxels = np.ascontiguousarray(np.transpose(volume.voxels, axes=tuple(perm)))

    def continuous_index(self, points: np.ndarray) -> np.ndarray:
        """Map world points (..., 3) to continuous grid coordinates.

        Component ``a`` of the result counts voxels along world axis ``a``;
        voxel centers sit at half-integers.
        """
        pts = np.asarray(points, dtype=np.float64)
        out = np.empty_like(pts)
        for a in range(3):
            out[..., a] = (pts[..., a] - self.base[a]) / self.step[a]
        return out

    def grid_to_volume_index(self, gidx: np.ndarray) -> np.ndarray:
        """Reorder grid-axis indices (..., 3) back to volume (i, j, k) order."""
        gidx = np.asarray(gidx)
        out = np.empty_like(gidx)
        for a in range(3):
            out[..., self.perm[a]] = gidx[..., a]
        return out


# -- raw sidecar format -----------------------------------------------------
#
# Byte-exact fixture format: an ASCII header terminated by an "end" line,
# followed by the voxel payload as little-endian float64 in x-fastest order.


def write_raw(volume: CtVolume, path: str | Path) -> None:
    """Write a volume in the raw sidecar format (lossless round trip)."""
    path = Path(path)
    lines = [
        RAW_MAGIC,
        "dims " + " ".join(str(n) for n in volume.dims),
        "spacing " + " ".join(repr(s) for s in volume.spacing),
        "corner " + " ".join(repr(c) for c in volume.corner),
        "direction " + " ".join(repr(float(x)) for x in volume.direction.ravel()),
        "end",
    ]
    try:
        with open(path, "wb") as fh:
            fh.write(("\n".join(lines) + "\n").encode("ascii"))
            fh.write(volume.voxels.astype("<f8", copy=False).ravel(order="F").tobytes())
    except OSError as exc:
        raise VolumeFormatError(f"cannot write raw volume to {path}: {exc}") from exc


def load_raw(path: str | Path) -> CtVolume:
    """Load a volume written by :func:`write_raw`."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise VolumeFormatError(f"cannot read raw volume from {path}: {exc}") from exc

    marker = b"\nend\n"
    pos = blob.find(marker)
    if not blob.startswith(RAW_MAGIC.encode("ascii")) or pos < 0:
        raise VolumeFormatError(f"{path}: not a raw sidecar volume (missing magic or end marker)")
    header = blob[:pos].decode("ascii").splitlines()
    payload = blob[pos + len(marker):]

    fields: dict[str, list[str]] = {}
    for line in header[1:]:
        key, *rest = line.split()
        fields[key] = rest
    for key, count in (("dims", 3), ("spacing", 3), ("corner", 3), ("direction", 9)):
        if key not in fields:
            raise VolumeFormatError(f"{path}: raw header missing field '{key}'")
        if len(fields[key]) != count:
            raise VolumeFormatError(f"{path}: raw header field '{key}' needs {count} values")

    try:
        dims = tuple(int(x) for x in fields["dims"])
        spacing = tuple(float(x) for x in fields["spacing"])
        corner = tuple(float(x) for x in fields["corner"])
        direction = np.array([float(x) for x in fields["direction"]]).reshape(3, 3)
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: unparseable raw header value: {exc}") from exc

    count = dims[0] * dims[1] * dims[2]
    if len(payload) != 8 * count:
        raise VolumeFormatError(
            f"{path}: truncated voxel payload ({len(payload)} bytes, expected {8 * count})"
        )
    voxels = np.frombuffer(payload, dtype="<f8").reshape(dims, order="F")
    return CtVolume(dims=dims, spacing=spacing, corner=corner, direction=direction, voxels=voxels)
