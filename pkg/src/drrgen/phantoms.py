"""Independent oracles: analytic phantoms, brute-force ray integration, and
a byte-level NIfTI-1 fixture writer.

Everything here deliberately avoids the traversal code paths so it can
serve as ground truth: the brute-force integrator is a plain midpoint
Riemann sum, the analytic integrals are closed-form chord lengths, and the
box clipping below is an independent min/max formulation.
"""

from __future__ import annotations

import gzip as gzip_mod
import math
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .geometry import Ray
from .siddon import AttenuationModel, entry_exit
from .volume import CtVolume

DEFAULT_RANDOM_HU_RANGE = (-1000.0, 2000.0)


@dataclass(frozen=True)
class Phantom:
    """Box-shaped test volume; subclasses fill in the voxel values."""

    dims: tuple[int, int, int] = (32, 32, 32)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    corner: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def _values(self) -> np.ndarray:
        raise NotImplementedError

    @cached_property
    def volume(self) -> CtVolume:
        return CtVolume(
            dims=self.dims,
            spacing=self.spacing,
            corner=self.corner,
            direction=np.eye(3),
            voxels=self._values(),
        )

    def _centers(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        axes = [
            self.corner[a] + (np.arange(self.dims[a]) + 0.5) * self.spacing[a]
            for a in range(3)
        ]
        return np.meshgrid(*axes, indexing="ij")


@dataclass(frozen=True)
class UniformBoxPhantom(Phantom):
    hu: float = 0.0

    def _values(self) -> np.ndarray:
        return np.full(self.dims, float(self.hu))


@dataclass(frozen=True)
class TwoSlabPhantom(Phantom):
    """Two homogeneous slabs split at a voxel face.

    Voxels with index < split_index along `axis` take hu_low, the rest
    hu_high; the split plane lies exactly on a lattice face so the
    voxelization equals the continuous phantom.
    """

    hu_low: float = 0.0
    hu_high: float = 1000.0
    axis: int = 0
    split_index: int = 16

    def __post_init__(self) -> None:
        if not 0 <= self.split_index <= self.dims[self.axis]:
            raise ValueError("split_index must lie within the axis extent")

    def _values(self) -> np.ndarray:
        v = np.full(self.dims, float(self.hu_high))
        sl = [slice(None)] * 3
        sl[self.axis] = slice(0, self.split_index)
        v[tuple(sl)] = float(self.hu_low)
        return v

    @property
    def split_plane(self) -> float:
        return self.corner[self.axis] + self.split_index * self.spacing[self.axis]


@dataclass(frozen=True)
class SpherePhantom(Phantom):
    """Ball of hu_in embedded in hu_out, voxelized by center membership."""

    center: tuple[float, float, float] = (16.0, 16.0, 16.0)
    radius: float = 10.0
    hu_in: float = 1000.0
    hu_out: float = -1000.0

    def _values(self) -> np.ndarray:
        x, y, z = self._centers()
        r2 = (
            (x - self.center[0]) ** 2
            + (y - self.center[1]) ** 2
            + (z - self.center[2]) ** 2
        )
        return np.where(r2 <= self.radius**2, float(self.hu_in), float(self.hu_out))


@dataclass(frozen=True)
class RandomPhantom(Phantom):
    """Seeded uniform HU noise straddling the protocol threshold.

    The default range [-1000, 2000] exercises both attenuation branches.
    """

    seed: int = 0
    hu_range: tuple[float, float] = DEFAULT_RANDOM_HU_RANGE

    def _values(self) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        lo, hi = self.hu_range
        return rng.uniform(lo, hi, size=self.dims)


# -- brute-force line integration --------------------------------------------


def brute_force_integrate(
    ray: Ray, volume: CtVolume, model: AttenuationModel, step: float
) -> float:
    """Midpoint Riemann sum of the attenuation along a ray.

    Samples at spacing <= `step` mm between the box entry and exit, with
    the same floor-to-voxel lookup the traversal uses.  First-order
    accurate on piecewise-constant volumes; at step = min(spacing)/200 it
    agrees with the exact traversal to about 1e-3 relative.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    ee = entry_exit(ray, volume)
    if ee is None:
        return 0.0
    t0, t1 = ee
    d = ray.p - ray.s
    norm = float(np.sqrt((d * d).sum()))
    n = max(1, int(math.ceil((t1 - t0) * norm / step)))
    dt = (t1 - t0) / n
    tm = t0 + (np.arange(n) + 0.5) * dt
    pts = ray.s[None, :] + tm[:, None] * d[None, :]

    grid = volume.grid
    ci = grid.continuous_index(pts)
    idx = np.floor(ci).astype(np.int64)
    ok = np.all((idx >= 0) & (idx < grid.nvox[None, :]), axis=1)
    if not ok.any():
        return 0.0
    vals = grid.voxels[idx[ok, 0], idx[ok, 1], idx[ok, 2]]
    return norm * dt * float(model.mu(vals).sum())


# -- closed-form line integrals ----------------------------------------------


def _clip_length_to_box(s, p, lo, hi) -> tuple[float, float]:
    """Independent slab clip; returns (t_lo, t_hi), possibly empty (hi < lo)."""
    s = np.asarray(s, dtype=np.float64)
    d = np.asarray(p, dtype=np.float64) - s
    t_lo, t_hi = 0.0, 1.0
    for a in range(3):
        if d[a] == 0.0:
            if not (lo[a] <= s[a] <= hi[a]):
                return 1.0, 0.0
            continue
        ta = (lo[a] - s[a]) / d[a]
        tb = (hi[a] - s[a]) / d[a]
        t_lo = max(t_lo, min(ta, tb))
        t_hi = min(t_hi, max(ta, tb))
    return t_lo, t_hi


def box_chord_length(ray: Ray, lo, hi) -> float:
    """Length (mm) of a ray's intersection with an axis-aligned box."""
    t_lo, t_hi = _clip_length_to_box(ray.s, ray.p, np.asarray(lo), np.asarray(hi))
    if t_hi <= t_lo:
        return 0.0
    return (t_hi - t_lo) * ray.length


def analytic_line_integral(phantom: Phantom, ray: Ray, model: AttenuationModel) -> float:
    """Exact closed-form energy for the analytic phantom kinds.

    Raises for seeded-random phantoms, which have no closed form.
    """
    lo = np.asarray(phantom.corner, dtype=np.float64)
    hi = lo + np.asarray(phantom.dims) * np.asarray(phantom.spacing)

    def mu(v: float) -> float:
        return max(v - model.threshold, 0.0)

    if isinstance(phantom, UniformBoxPhantom):
        return mu(phantom.hu) * box_chord_length(ray, lo, hi)

    if isinstance(phantom, TwoSlabPhantom):
        a = phantom.axis
        split = phantom.split_plane
        hi_low = hi.copy()
        hi_low[a] = split
        lo_high = lo.copy()
        lo_high[a] = split
        return mu(phantom.hu_low) * box_chord_length(ray, lo, hi_low) + mu(
            phantom.hu_high
        ) * box_chord_length(ray, lo_high, hi)

    if isinstance(phantom, SpherePhantom):
        t_lo, t_hi = _clip_length_to_box(ray.s, ray.p, lo, hi)
        if t_hi <= t_lo:
            return 0.0
        length = ray.length
        box_len = (t_hi - t_lo) * length
        # ray-sphere quadratic for |s + t d - c|^2 = r^2
        d = ray.p - ray.s
        f = ray.s - np.asarray(phantom.center, dtype=np.float64)
        a2 = float(d @ d)
        b2 = 2.0 * float(f @ d)
        c2 = float(f @ f) - phantom.radius**2
        disc = b2 * b2 - 4.0 * a2 * c2
        inside_len = 0.0
        if disc > 0:
            root = math.sqrt(disc)
            ta = (-b2 - root) / (2.0 * a2)
            tb = (-b2 + root) / (2.0 * a2)
            ta, tb = max(ta, t_lo), min(tb, t_hi)
            if tb > ta:
                inside_len = (tb - ta) * length
        return mu(phantom.hu_in) * inside_len + mu(phantom.hu_out) * (box_len - inside_len)

    raise ValueError(f"no closed-form line integral for {type(phantom).__name__}")


# -- NIfTI-1 fixture writer ---------------------------------------------------

_FIXTURE_DTYPES = {
    "int16": (4, 16, np.dtype("<i2")),
    "float32": (16, 32, np.dtype("<f4")),
    "float64": (64, 64, np.dtype("<f8")),
}


def write_nifti_fixture(
    volume: CtVolume,
    path: str | Path,
    *,
    dtype: str = "float32",
    slope: float = 1.0,
    inter: float = 0.0,
    xform: str = "sform",
    gzip: bool | None = None,
) -> None:
    """Write a minimal valid NIfTI-1 file for loader round trips.

    Stored values are (hu - inter) / slope, so the loader's scaling maps
    them back.  `xform` selects sform (any axis-aligned direction) or
    qform (identity rotation, optional z-flip via qfac).  Compression
    defaults to the path suffix.
    """
    path = Path(path)
    if dtype not in _FIXTURE_DTYPES:
        raise ValueError(f"unsupported fixture dtype {dtype!r}")
    code, bitpix, np_dtype = _FIXTURE_DTYPES[dtype]
    if gzip is None:
        gzip = path.name.endswith(".gz")

    spacing = np.asarray(volume.spacing, dtype=np.float64)
    origin = np.asarray(volume.corner) + volume.direction @ (spacing / 2.0)

    dim = [3, *volume.dims, 1, 1, 1, 1]
    pixdim = [1.0, *spacing, 0.0, 0.0, 0.0, 0.0]

    qform_code = 0
    sform_code = 0
    quatern = (0.0, 0.0, 0.0)
    qoffset = (0.0, 0.0, 0.0)
    srow = np.zeros((3, 4))
    if xform == "sform":
        sform_code = 1
        srow[:, :3] = volume.direction * spacing[None, :]
        srow[:, 3] = origin
    elif xform == "qform":
        diag = np.diag(volume.direction)
        if not (
            np.allclose(volume.direction, np.diag(diag))
            and diag[0] == 1.0
            and diag[1] == 1.0
            and abs(diag[2]) == 1.0
        ):
            raise ValueError("qform fixtures support identity rotation with optional z-flip only")
        qform_code = 1
        qoffset = tuple(origin)
        pixdim[0] = float(diag[2])
    else:
        raise ValueError(f"xform must be 'sform' or 'qform', got {xform!r}")

    stored = (volume.voxels - inter) / slope
    if dtype == "int16":
        stored = np.rint(stored)
        if stored.min() < -32768 or stored.max() > 32767:
            raise ValueError("stored values overflow int16")
    payload = stored.astype(np_dtype).ravel(order="F").tobytes()

    header = struct.pack(
        "<" + "".join(
            ["i", "10s", "18s", "i", "h", "b", "b", "8h", "f", "f", "f", "h", "h", "h",
             "h", "8f", "f", "f", "f", "h", "b", "b", "f", "f", "f", "f", "i", "i",
             "80s", "24s", "h", "h", "f", "f", "f", "f", "f", "f", "4f", "4f", "4f",
             "16s", "4s"]
        ),
        348,                    # sizeof_hdr
        b"", b"", 0, 0, 0, 0,   # unused
        *dim,
        0.0, 0.0, 0.0, 0,       # intent
        code, bitpix, 0,
        *pixdim,
        352.0,                  # vox_offset
        float(slope), float(inter),
        0, 0, 2,                # slice_end, slice_code, xyzt_units (mm)
        0.0, 0.0, 0.0, 0.0, 0, 0,
        b"drrgen fixture", b"",
        qform_code, sform_code,
        *quatern, *qoffset,
        *srow[0], *srow[1], *srow[2],
        b"", b"n+1\0",
    )
    blob = header + b"\0\0\0\0" + payload

    try:
        if gzip:
            path.write_bytes(gzip_mod.compress(blob, mtime=0))
        else:
            path.write_bytes(blob)
    except OSError as exc:
        raise ValueError(f"cannot write fixture to {path}: {exc}") from exc
