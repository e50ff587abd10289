"""Exact ray-lattice traversal and the thresholded attenuation sum.

For a ray ``R(t) = s + t(p - s)`` the lattice planes perpendicular to each
world axis are crossed at

    t(i) = (b + i*step - s_axis) / (p_axis - s_axis),   i = 0..N

where ``b`` is the grid corner coordinate and ``step`` the signed voxel
pitch along that axis.  Merging the three families with the box entry/exit
parameters, sorting, and walking consecutive pairs yields per-voxel
segments; each contributes ``(t1 - t0) * mu(value at segment midpoint)``
and the total is scaled by the source-detector distance.

Two implementations exist: a plain-Python reference (:func:`traverse`,
returns the segment list) and a numba kernel used by the renderer.  They
perform the same float64 operations in the same order, so their energies
are bit-identical; the test suite asserts this.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .geometry import Ray
from .volume import CtVolume, GridFrame

# Direction components smaller than this (mm over the full ray) are treated
# as parallel to the plane family; t-boundaries closer than T_MERGE_EPS are
# merged.  Both are far below clinical voxel pitches yet absorb rounding at
# shared corners and edges.
PARALLEL_EPS = 1e-12
T_MERGE_EPS = 1e-12

_AXIS_NAMES = {"x": 0, "y": 1, "z": 2}


@dataclass(frozen=True)
class AttenuationModel:
    """Thresholded HU-to-attenuation map: mu(v) = v - threshold when v is
    above the threshold, else 0.  The protocol cutoff of -100 HU makes air
    contribute nothing while soft tissue and bone attenuate in proportion
    to their HU excess."""

    threshold: float = -100.0

    def __post_init__(self) -> None:
        if not math.isfinite(self.threshold):
            raise ValueError(f"threshold must be finite, got {self.threshold}")
        object.__setattr__(self, "threshold", float(self.threshold))

    def mu(self, values: np.ndarray) -> np.ndarray:
        v = np.asarray(values, dtype=np.float64)
        return np.where(v > self.threshold, v - self.threshold, 0.0)


@dataclass(frozen=True)
class VoxelSegment:
    """One ray-voxel intersection: volume index, t-interval, and length (mm)."""

    index: tuple[int, int, int]
    t_enter: float
    t_exit: float
    length: float


@dataclass(frozen=True)
class TraversalResult:
    energy: float
    segments: tuple[VoxelSegment, ...]


def plane_crossings(ray: Ray, volume: CtVolume, axis: str) -> np.ndarray:
    """Ray parameters of all lattice-plane crossings along one world axis.

    Returns the crossings restricted to [0, 1], ascending.  A ray parallel
    to the plane family (direction component below 1e-12 mm) has no
    crossings and yields an empty array.
    """
    a = _AXIS_NAMES[axis] if isinstance(axis, str) else int(axis)
    grid = volume.grid
    s_a = ray.s[a]
    d_a = ray.p[a] - ray.s[a]
    if abs(d_a) < PARALLEL_EPS:
        return np.empty(0)
    i = np.arange(grid.nvox[a] + 1, dtype=np.float64)
    ts = (grid.base[a] + i * grid.step[a] - s_a) / d_a
    ts = ts[(ts >= 0.0) & (ts <= 1.0)]
    return np.sort(ts)


def entry_exit(ray: Ray, volume: CtVolume) -> tuple[float, float] | None:
    """Clip the ray's [0, 1] span against the volume's bounding box.

    Returns (t_min, t_max), or None when the clipped interval is empty or
    degenerate (span <= 1e-12).
    """
    return _entry_exit_arrays(ray.s, ray.p, volume.grid)


def _entry_exit_arrays(s, p, grid: GridFrame) -> tuple[float, float] | None:
    t0 = 0.0
    t1 = 1.0
    for a in range(3):
        s_a = float(s[a])
        d_a = float(p[a]) - s_a
        if abs(d_a) < PARALLEL_EPS:
            if s_a < grid.lo[a] or s_a > grid.hi[a]:
                return None
            continue
        ta = (grid.lo[a] - s_a) / d_a
        tb = (grid.hi[a] - s_a) / d_a
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
    if t1 - t0 <= T_MERGE_EPS:
        return None
    return t0, t1


def _merged_boundaries(s, p, grid: GridFrame) -> np.ndarray | None:
    """Sorted, deduplicated t-boundaries covering [t_min, t_max] exactly.

    Crossings strictly inside the clipped interval are merged with the
    endpoints; boundaries closer than 1e-12 collapse onto the earlier one,
    except that the final boundary is always pinned back to t_max so the
    segments tile the full chord.
    """
    ee = _entry_exit_arrays(s, p, grid)
    if ee is None:
        return None
    t0, t1 = ee
    parts = [np.array([t0])]
    for a in range(3):
        s_a = float(s[a])
        d_a = float(p[a]) - s_a
        if abs(d_a) < PARALLEL_EPS:
            continue
        i = np.arange(grid.nvox[a] + 1, dtype=np.float64)
        ts = (grid.base[a] + i * grid.step[a] - s_a) / d_a
        parts.append(ts[(ts > t0) & (ts < t1)])
    parts.append(np.array([t1]))
    merged = np.sort(np.concatenate(parts))

    kept = [merged[0]]
    for t in merged[1:]:
        if t - kept[-1] >= T_MERGE_EPS:
            kept.append(t)
    kept[-1] = t1
    return np.array(kept)


def traverse(ray: Ray, volume: CtVolume, model: AttenuationModel) -> TraversalResult:
    """Accumulate the attenuation sum along one ray (reference path).

    Walks the merged boundary list in ascending t; each segment is assigned
    to the voxel containing its midpoint (floor semantics, so a midpoint
    exactly on a face goes to the voxel whose low face it is).  Midpoints
    outside the lattice contribute zero.  A ray that misses the volume
    returns zero energy and no segments.

    The per-segment arithmetic is vectorized but element-for-element
    identical to the renderer kernel, and the accumulation stays a strict
    ascending-t float64 sum, so the two paths agree bit for bit.
    """
    grid = volume.grid
    s = ray.s
    p = ray.p
    bounds = _merged_boundaries(s, p, grid)
    if bounds is None:
        return TraversalResult(energy=0.0, segments=())

    d = p - s
    norm = math.sqrt(float(d[0]) * float(d[0]) + float(d[1]) * float(d[1])
                     + float(d[2]) * float(d[2]))
    t_lo = bounds[:-1]
    t_hi = bounds[1:]
    mid = 0.5 * (t_lo + t_hi)

    gidx = np.empty((len(mid), 3), dtype=np.int64)
    inside = np.ones(len(mid), dtype=bool)
    for a in range(3):
        w = float(s[a]) + mid * float(d[a])
        ci = (w - grid.base[a]) / grid.step[a]
        g = np.floor(ci).astype(np.int64)
        gidx[:, a] = g
        inside &= (g >= 0) & (g < grid.nvox[a])

    contrib = np.zeros(len(mid))
    if inside.any():
        values = grid.voxels[gidx[inside, 0], gidx[inside, 1], gidx[inside, 2]]
        over = values > model.threshold
        part = np.zeros(len(values))
        part[over] = (t_hi[inside][over] - t_lo[inside][over]) * (values[over] - model.threshold)
        contrib[inside] = part

    energy = 0.0
    for c in contrib.tolist():
        if c != 0.0:
            energy += c

    vol_idx = grid.grid_to_volume_index(gidx)
    lengths = (t_hi - t_lo) * norm
    segments = tuple(
        VoxelSegment(
            index=(int(vol_idx[m, 0]), int(vol_idx[m, 1]), int(vol_idx[m, 2])),
            t_enter=float(t_lo[m]),
            t_exit=float(t_hi[m]),
            length=float(lengths[m]),
        )
        for m in np.nonzero(inside)[0]
    )
    return TraversalResult(energy=norm * energy, segments=segments)


# -- numba kernel -------------------------------------------------------------
#
# Same arithmetic as traverse(), formulated as a streaming three-way merge
# of the plane families so no per-ray buffers are needed.  The final
# segment is held pending so its exit boundary can be pinned to t_max,
# matching the list-based dedup above.

_INF = np.inf


@njit(cache=True, nogil=True)
def _family_start(b, step, s_a, d_a, n, t0, t1):
    """Cursor and t of the first crossing with t0 < t < t1, in family order."""
    slope_up = (step > 0.0) == (d_a > 0.0)
    inc = 1 if slope_up else -1
    # analytic estimate of the plane at the entry point, then exact adjustment
    # using the same predicate the reference path applies
    guess = (s_a + t0 * d_a - b) / step
    i = int(math.floor(guess))
    if i < 0:
        i = 0
    if i > n:
        i = n
    while 0 <= i - inc <= n and (b + (i - inc) * step - s_a) / d_a > t0:
        i -= inc
    while 0 <= i <= n and (b + i * step - s_a) / d_a <= t0:
        i += inc
    if 0 <= i <= n:
        t = (b + i * step - s_a) / d_a
        if t < t1:
            return i, inc, t
    return i, inc, _INF


@njit(cache=True, nogil=True)
def _seg_term(t_lo, t_hi, sx, sy, sz, dx, dy, dz, vox, base, step, nvox, threshold):
    mid = 0.5 * (t_lo + t_hi)
    wx = sx + mid * dx
    wy = sy + mid * dy
    wz = sz + mid * dz
    g0 = int(math.floor((wx - base[0]) / step[0]))
    g1 = int(math.floor((wy - base[1]) / step[1]))
    g2 = int(math.floor((wz - base[2]) / step[2]))
    if 0 <= g0 < nvox[0] and 0 <= g1 < nvox[1] and 0 <= g2 < nvox[2]:
        v = vox[g0, g1, g2]
        if v > threshold:
            return (t_hi - t_lo) * (v - threshold)
    return 0.0


@njit(cache=True, nogil=True)
def _ray_energy(sx, sy, sz, px, py, pz, vox, base, step, nvox, lo, hi, threshold):
    dx = px - sx
    dy = py - sy
    dz = pz - sz

    t0 = 0.0
    t1 = 1.0
    for a in range(3):
        if a == 0:
            s_a = sx
            d_a = dx
        elif a == 1:
            s_a = sy
            d_a = dy
        else:
            s_a = sz
            d_a = dz
        if abs(d_a) < 1e-12:
            if s_a < lo[a] or s_a > hi[a]:
                return 0.0
        else:
            ta = (lo[a] - s_a) / d_a
            tb = (hi[a] - s_a) / d_a
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
    if t1 - t0 <= 1e-12:
        return 0.0

    if abs(dx) < 1e-12:
        ix, incx, tx = 0, 1, _INF
    else:
        ix, incx, tx = _family_start(base[0], step[0], sx, dx, nvox[0], t0, t1)
    if abs(dy) < 1e-12:
        iy, incy, ty = 0, 1, _INF
    else:
        iy, incy, ty = _family_start(base[1], step[1], sy, dy, nvox[1], t0, t1)
    if abs(dz) < 1e-12:
        iz, incz, tz = 0, 1, _INF
    else:
        iz, incz, tz = _family_start(base[2], step[2], sz, dz, nvox[2], t0, t1)

    energy = 0.0
    last = t0
    pend_lo = 0.0
    pend_hi = 0.0
    have_pend = False
    while True:
        tb = tx
        axis = 0
        if ty < tb:
            tb = ty
            axis = 1
        if tz < tb:
            tb = tz
            axis = 2
        if tb == _INF:
            break
        if axis == 0:
            ix += incx
            if 0 <= ix <= nvox[0]:
                tx = (base[0] + ix * step[0] - sx) / dx
                if tx >= t1:
                    tx = _INF
            else:
                tx = _INF
        elif axis == 1:
            iy += incy
            if 0 <= iy <= nvox[1]:
                ty = (base[1] + iy * step[1] - sy) / dy
                if ty >= t1:
                    ty = _INF
            else:
                ty = _INF
        else:
            iz += incz
            if 0 <= iz <= nvox[2]:
                tz = (base[2] + iz * step[2] - sz) / dz
                if tz >= t1:
                    tz = _INF
            else:
                tz = _INF
        if tb - last < 1e-12:
            continue
        if have_pend:
            energy += _seg_term(
                pend_lo, pend_hi, sx, sy, sz, dx, dy, dz, vox, base, step, nvox, threshold
            )
        pend_lo = last
        pend_hi = tb
        have_pend = True
        last = tb

    if t1 - last >= 1e-12:
        if have_pend:
            energy += _seg_term(
                pend_lo, pend_hi, sx, sy, sz, dx, dy, dz, vox, base, step, nvox, threshold
            )
        energy += _seg_term(last, t1, sx, sy, sz, dx, dy, dz, vox, base, step, nvox, threshold)
    elif have_pend:
        energy += _seg_term(
            pend_lo, t1, sx, sy, sz, dx, dy, dz, vox, base, step, nvox, threshold
        )

    norm = math.sqrt(dx * dx + dy * dy + dz * dz)
    return norm * energy


@njit(cache=True, nogil=True)
def _render_block(src, pts, vox, base, step, nvox, lo, hi, threshold, out, start, stop):
    sx = src[0]
    sy = src[1]
    sz = src[2]
    for q in range(start, stop):
        out[q] = _ray_energy(
            sx, sy, sz, pts[q, 0], pts[q, 1], pts[q, 2],
            vox, base, step, nvox, lo, hi, threshold,
        )


def kernel_energy(ray: Ray, volume: CtVolume, model: AttenuationModel) -> float:
    """Single-ray energy through the renderer's kernel (for equivalence tests)."""
    grid = volume.grid
    pts = np.array(ray.p, dtype=np.float64).reshape(1, 3)
    out = np.zeros(1)
    _render_block(
        np.array(ray.s, dtype=np.float64), pts, grid.voxels,
        grid.base, grid.step, grid.nvox, grid.lo, grid.hi,
        model.threshold, out, 0, 1,
    )
    return float(out[0])
