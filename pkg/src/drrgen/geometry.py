"""Virtual imaging system: point source, flat detector, rigid volume motion.

The engine's base orientation is fixed: the central ray runs along world
+y (anterior-posterior), the detector u-axis is world +x and the v-axis is
world -z, so superior anatomy lands at the top of the image.  Views other
than frontal are produced by a rigid transform of the volume, realized as
the inverse motion applied to the rays (the voxel grid is never resampled).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .volume import CtVolume

# Base detector frame (unit vectors; components are exact 0/±1).
U_AXIS = (1.0, 0.0, 0.0)
V_AXIS = (0.0, 0.0, -1.0)
RAY_AXIS = (0.0, 1.0, 0.0)


@dataclass(frozen=True)
class Ray:
    """Parametric segment from the source to a detector point.

    Points on the ray are ``s + t * (p - s)`` with ``t`` in [0, 1].
    """

    s: np.ndarray
    p: np.ndarray

    def __post_init__(self) -> None:
        s = np.array(self.s, dtype=np.float64)
        p = np.array(self.p, dtype=np.float64)
        if s.shape != (3,) or p.shape != (3,):
            raise ValueError("ray endpoints must be 3-vectors")
        if not (np.isfinite(s).all() and np.isfinite(p).all()):
            raise ValueError("ray endpoints must be finite")
        if bool(np.all(s == p)):
            raise ValueError("ray endpoints coincide")
        s.flags.writeable = False
        p.flags.writeable = False
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "p", p)

    @property
    def length(self) -> float:
        d = self.p - self.s
        return math.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])


def _axis_rotation(axis: int, angle_deg: float) -> np.ndarray:
    """Rotation matrix about a coordinate axis.

    Multiples of 90 degrees get exact {0, ±1} entries so quarter-turn views
    (e.g. the lateral preset) introduce no trigonometric rounding.
    """
    if angle_deg % 90.0 == 0.0:
        quarter = int(angle_deg % 360.0) // 90
        c, s = ((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0))[quarter]
    else:
        rad = math.radians(angle_deg)
        c, s = math.cos(rad), math.sin(rad)
    m = np.eye(3)
    i, j = (1, 2) if axis == 0 else (2, 0) if axis == 1 else (0, 1)
    m[i, i] = c
    m[j, j] = c
    m[i, j] = -s
    m[j, i] = s
    return m


@dataclass(frozen=True)
class RigidTransform:
    """Rigid motion of the volume: rotate about a pivot, then translate.

    Rotations are in degrees, applied in the fixed order x, then y, then z.
    The lateral-view convention is ``rotation=(0, 0, -90)``: a quarter turn
    that is counterclockwise when viewed from +z.
    """

    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        rot = tuple(float(a) for a in self.rotation)
        tra = tuple(float(t) for t in self.translation)
        if len(rot) != 3 or len(tra) != 3:
            raise ValueError("rotation and translation must have three components")
        if not all(math.isfinite(a) for a in rot + tra):
            raise ValueError("transform parameters must be finite")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tra)

    def is_identity(self) -> bool:
        return self.rotation == (0.0, 0.0, 0.0) and self.translation == (0.0, 0.0, 0.0)

    def matrix(self) -> np.ndarray:
        rx, ry, rz = self.rotation
        return _axis_rotation(2, rz) @ _axis_rotation(1, ry) @ _axis_rotation(0, rx)

    def map_points(self, points: np.ndarray, pivot: np.ndarray) -> np.ndarray:
        """Forward motion: where volume material at `points` ends up."""
        pts = np.asarray(points, dtype=np.float64)
        if self.is_identity():
            return pts.copy()
        r = self.matrix()
        px, py, pz = (float(pivot[0]), float(pivot[1]), float(pivot[2]))
        tx, ty, tz = self.translation
        qx = pts[..., 0] - px
        qy = pts[..., 1] - py
        qz = pts[..., 2] - pz
        out = np.empty_like(pts)
        out[..., 0] = (r[0, 0] * qx + r[0, 1] * qy + r[0, 2] * qz) + px + tx
        out[..., 1] = (r[1, 0] * qx + r[1, 1] * qy + r[1, 2] * qz) + py + ty
        out[..., 2] = (r[2, 0] * qx + r[2, 1] * qy + r[2, 2] * qz) + pz + tz
        return out

    def inverse_map_points(self, points: np.ndarray, pivot: np.ndarray) -> np.ndarray:
        """Inverse motion: volume-frame location of world points.

        This is what the renderer applies to rays so the voxel grid itself
        never moves.  The identity transform is exact (no arithmetic).
        """
        pts = np.asarray(points, dtype=np.float64)
        if self.is_identity():
            return pts.copy()
        r = self.matrix()
        px, py, pz = (float(pivot[0]), float(pivot[1]), float(pivot[2]))
        tx, ty, tz = self.translation
        qx = (pts[..., 0] - tx) - px
        qy = (pts[..., 1] - ty) - py
        qz = (pts[..., 2] - tz) - pz
        out = np.empty_like(pts)
        # transpose of the rotation: columns become rows
        out[..., 0] = (r[0, 0] * qx + r[1, 0] * qy + r[2, 0] * qz) + px
        out[..., 1] = (r[0, 1] * qx + r[1, 1] * qy + r[2, 1] * qz) + py
        out[..., 2] = (r[0, 2] * qx + r[1, 2] * qy + r[2, 2] * qz) + pz
        return out


IDENTITY_TRANSFORM = RigidTransform()

# Named view presets; the lateral quarter turn fixes the -90 degree sign.
VIEW_PRESETS = {
    "frontal": RigidTransform(),
    "lateral": RigidTransform(rotation=(0.0, 0.0, -90.0)),
}


@dataclass(frozen=True)
class ProjectionGeometry:
    """Cone-beam geometry: one source point and a flat pixelated detector.

    Attributes:
        scd: source-to-isocenter distance, mm.
        sdd: source-to-detector distance, mm (magnification = sdd/scd).
        detector_px: pixel counts (W, H).
        detector_spacing: pixel pitch (du, dv), mm.
        detector_offset: shift (cu, cv) of the detector center away from the
            central ray, mm.
        isocenter: world point the gantry and volume transforms pivot about.
    """

    scd: float = 1000.0
    sdd: float = 1500.0
    detector_px: tuple[int, int] = (512, 512)
    detector_spacing: tuple[float, float] = (1.0, 1.0)
    detector_offset: tuple[float, float] = (0.0, 0.0)
    isocenter: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        scd = float(self.scd)
        sdd = float(self.sdd)
        if not (0.0 < scd < sdd) or not math.isfinite(sdd):
            raise ValueError(f"need 0 < scd < sdd, got scd={scd}, sdd={sdd}")
        w, h = (int(n) for n in self.detector_px)
        if w < 1 or h < 1:
            raise ValueError(f"detector must have at least one pixel, got {(w, h)}")
        du, dv = (float(x) for x in self.detector_spacing)
        if du <= 0 or dv <= 0:
            raise ValueError(f"detector spacing must be positive, got {(du, dv)}")
        iso = tuple(float(c) for c in self.isocenter)
        off = tuple(float(c) for c in self.detector_offset)
        if not all(math.isfinite(v) for v in iso + off):
            raise ValueError("isocenter and detector offset must be finite")
        object.__setattr__(self, "scd", scd)
        object.__setattr__(self, "sdd", sdd)
        object.__setattr__(self, "detector_px", (w, h))
        object.__setattr__(self, "detector_spacing", (du, dv))
        object.__setattr__(self, "detector_offset", off)
        object.__setattr__(self, "isocenter", iso)

    def source(self) -> np.ndarray:
        """Source point; shared by every pixel ray of a render."""
        ix, iy, iz = self.isocenter
        return np.array((ix, iy - self.scd, iz))

    def detector_center(self) -> np.ndarray:
        ix, iy, iz = self.isocenter
        cu, cv = self.detector_offset
        shift = self.sdd - self.scd
        return np.array(
            (
                (ix + shift * RAY_AXIS[0]) + cu * U_AXIS[0] + cv * V_AXIS[0],
                (iy + shift * RAY_AXIS[1]) + cu * U_AXIS[1] + cv * V_AXIS[1],
                (iz + shift * RAY_AXIS[2]) + cu * U_AXIS[2] + cv * V_AXIS[2],
            )
        )

    def _pixel_offsets(self, u, v):
        w, h = self.detector_px
        du, dv = self.detector_spacing
        eu = (u + 0.5 - 0.5 * w) * du
        ev = (v + 0.5 - 0.5 * h) * dv
        return eu, ev

    def pixel_ray(self, u: int, v: int) -> Ray:
        """Ray from the source to the center of detector pixel (u, v)."""
        w, h = self.detector_px
        if not (0 <= u < w and 0 <= v < h):
            raise ValueError(f"pixel index ({u}, {v}) outside detector {w}x{h}")
        c = self.detector_center()
        eu, ev = self._pixel_offsets(float(u), float(v))
        p = np.array(
            (
                c[0] + eu * U_AXIS[0] + ev * V_AXIS[0],
                c[1] + eu * U_AXIS[1] + ev * V_AXIS[1],
                c[2] + eu * U_AXIS[2] + ev * V_AXIS[2],
            )
        )
        return Ray(s=self.source(), p=p)

    def pixel_grid(self) -> np.ndarray:
        """Detector pixel centers as a (W, H, 3) array.

        Entry [u, v] equals ``pixel_ray(u, v).p`` bit-for-bit; the renderer
        traverses this grid in u-major order.
        """
        w, h = self.detector_px
        c = self.detector_center()
        eu, ev = self._pixel_offsets(
            np.arange(w, dtype=np.float64)[:, None],
            np.arange(h, dtype=np.float64)[None, :],
        )
        pts = np.empty((w, h, 3))
        pts[..., 0] = c[0] + eu * U_AXIS[0] + ev * V_AXIS[0]
        pts[..., 1] = c[1] + eu * U_AXIS[1] + ev * V_AXIS[1]
        pts[..., 2] = c[2] + eu * U_AXIS[2] + ev * V_AXIS[2]
        return pts


def default_frontal_geometry(volume: CtVolume) -> ProjectionGeometry:
    """Engine-default anterior-posterior geometry centered on a volume.

    512x512 detector at 1.0 mm pitch, scd 1000 mm, sdd 1500 mm.  The
    distances and pitch are engine defaults, not published values; every
    render records the full geometry in its provenance sidecar.
    """
    center = volume.world_center()
    return ProjectionGeometry(isocenter=(center[0], center[1], center[2]))


class VolumeMap:
    """World-to-index map for a rigidly transformed volume.

    Rays live in world coordinates; the map carries them into the volume's
    native frame (inverse motion) and on to continuous grid indices.
    """

    def __init__(self, transform: RigidTransform, volume: CtVolume, pivot=None) -> None:
        self.transform = transform
        self.volume = volume
        self.pivot = np.asarray(
            volume.world_center() if pivot is None else pivot, dtype=np.float64
        )

    def to_volume_frame(self, points: np.ndarray) -> np.ndarray:
        return self.transform.inverse_map_points(points, self.pivot)

    def world_to_index(self, points: np.ndarray) -> np.ndarray:
        """Continuous (i, j, k) indices of world points; centers at half-integers."""
        grid = self.volume.grid
        gidx = grid.continuous_index(self.to_volume_frame(points))
        return grid.grid_to_volume_index(gidx)


def apply_transform(transform: RigidTransform, volume: CtVolume) -> VolumeMap:
    """Resolve a rigid motion of `volume` about its own center.

    The renderer pivots about the geometry isocenter instead; the two agree
    for geometries built by :func:`default_frontal_geometry`.
    """
    return VolumeMap(transform, volume)
