"""Imaging geometry: defaults, pixel rays, and rigid transforms."""

import numpy as np
import pytest

from drrgen.geometry import (
    ProjectionGeometry,
    Ray,
    RigidTransform,
    VIEW_PRESETS,
    apply_transform,
    default_frontal_geometry,
)
from drrgen.volume import CtVolume


def make_volume(dims=(512, 512, 300), spacing=(0.75, 0.75, 1.5), corner=(0.0, 0.0, 0.0)):
    return CtVolume(dims=dims, spacing=spacing, corner=corner,
                    direction=np.eye(3), voxels=np.zeros(dims))


class TestDefaultGeometry:
    def test_isocenter_is_volume_center(self):
        geom = default_frontal_geometry(make_volume())
        assert geom.isocenter == (192.0, 192.0, 225.0)

    def test_detector_size_default(self):
        geom = default_frontal_geometry(make_volume(dims=(8, 8, 8)))
        assert geom.detector_px == (512, 512)

    def test_distances_self_consistent(self):
        geom = default_frontal_geometry(make_volume(dims=(8, 8, 8)))
        assert geom.scd == 1000.0
        assert geom.sdd == 1500.0
        assert 0 < geom.scd < geom.sdd

    def test_invalid_distances_rejected(self):
        with pytest.raises(ValueError, match="scd"):
            ProjectionGeometry(scd=1500.0, sdd=1000.0)


class TestPixelRays:
    def test_central_pixel_passes_through_isocenter(self):
        geom = ProjectionGeometry(detector_px=(11, 9), isocenter=(5.0, -2.0, 7.0))
        ray = geom.pixel_ray(5, 4)
        # p must lie on the line through s and the isocenter
        d = ray.p - ray.s
        iso = np.array(geom.isocenter) - ray.s
        cross = np.cross(d, iso)
        assert np.linalg.norm(cross) / np.linalg.norm(d) < 1e-9

    def test_corner_pixels_symmetric_about_center(self):
        geom = ProjectionGeometry(detector_px=(16, 12))
        a = geom.pixel_ray(0, 0).p
        b = geom.pixel_ray(15, 11).p
        center = geom.detector_center()
        assert np.allclose(0.5 * (a + b), center, atol=1e-12)

    def test_all_rays_share_source(self):
        geom = ProjectionGeometry(detector_px=(5, 5))
        sources = {tuple(geom.pixel_ray(u, v).s) for u in range(5) for v in range(5)}
        assert len(sources) == 1

    def test_endpoints_coplanar(self):
        geom = ProjectionGeometry(detector_px=(7, 7), detector_offset=(3.0, -2.0))
        ys = {float(geom.pixel_ray(u, v).p[1]) for u in range(7) for v in range(7)}
        assert max(ys) - min(ys) < 1e-9

    def test_magnification_is_sdd_over_scd(self):
        geom = ProjectionGeometry(detector_px=(64, 64), isocenter=(0.0, 0.0, 0.0))
        # a world point offset from the isocenter projects onto the detector
        # plane magnified by sdd/scd = 1.5
        s = geom.source()
        point = np.array([10.0, 0.0, 0.0])
        t_plane = geom.sdd / geom.scd  # parameter where the ray meets the plane
        hit = s + t_plane * (point - s)
        assert abs(hit[0] - 15.0) < 1e-9
        assert abs(hit[1] - (geom.sdd - geom.scd)) < 1e-9

    def test_out_of_range_pixel_rejected(self):
        geom = ProjectionGeometry(detector_px=(4, 4))
        with pytest.raises(ValueError, match="outside detector"):
            geom.pixel_ray(4, 0)

    def test_pixel_grid_matches_pixel_ray_bitwise(self):
        geom = ProjectionGeometry(detector_px=(9, 6), detector_offset=(1.25, -0.5),
                                  isocenter=(3.0, 1.0, -2.0))
        grid = geom.pixel_grid()
        for u in (0, 4, 8):
            for v in (0, 3, 5):
                assert np.array_equal(grid[u, v], geom.pixel_ray(u, v).p)

    def test_top_of_image_is_superior(self):
        geom = ProjectionGeometry(detector_px=(3, 3))
        top = geom.pixel_ray(1, 0).p
        bottom = geom.pixel_ray(1, 2).p
        assert top[2] > bottom[2]


class TestRay:
    def test_degenerate_ray_rejected(self):
        with pytest.raises(ValueError, match="coincide"):
            Ray(s=np.zeros(3), p=np.zeros(3))

    def test_length(self):
        ray = Ray(s=np.zeros(3), p=np.array([3.0, 4.0, 0.0]))
        assert ray.length == 5.0


class TestRigidTransform:
    def test_identity_is_exact(self):
        # dyadic spacings and corner: no rounding anywhere in the map
        vol = make_volume(dims=(4, 4, 4), spacing=(0.5, 1.0, 2.0), corner=(-1.5, 2.0, 3.25))
        m = apply_transform(RigidTransform(), vol)
        for ijk in ((0, 0, 0), (1, 2, 3), (3, 3, 3)):
            w = vol.voxel_center_world(*ijk)
            ci = m.world_to_index(w)
            assert np.array_equal(ci, np.array(ijk, dtype=float) + 0.5)

    def test_identity_on_general_values_within_tolerance(self):
        vol = make_volume(dims=(4, 4, 4), spacing=(0.7, 1.3, 2.1), corner=(-1.1, 2.2, 3.3))
        m = apply_transform(RigidTransform(), vol)
        w = vol.voxel_center_world(1, 2, 3)
        assert np.allclose(m.world_to_index(w), (1.5, 2.5, 3.5), atol=1e-12)

    def test_quarter_turn_sign_convention(self):
        # rz = -90 maps isocenter + (r, 0, 0) to isocenter + (0, -r, 0):
        # positive angles are counterclockwise seen from +z
        xf = RigidTransform(rotation=(0.0, 0.0, -90.0))
        pivot = np.array([10.0, 20.0, 30.0])
        out = xf.map_points(pivot + np.array([4.0, 0.0, 0.0]), pivot)
        assert np.array_equal(out - pivot, np.array([0.0, -4.0, 0.0]))

    def test_translation_shifts_relative_frame(self):
        # volume moved +300 along y: a fixed world point lands 300 lower in
        # the volume frame
        xf = RigidTransform(translation=(0.0, 300.0, 0.0))
        pivot = np.zeros(3)
        w = np.array([5.0, 40.0, -3.0])
        out = xf.inverse_map_points(w, pivot)
        assert np.array_equal(out, np.array([5.0, -260.0, -3.0]))

    def test_rotation_roundtrip_within_tolerance(self):
        pivot = np.array([7.0, -3.0, 11.0])
        fwd = RigidTransform(rotation=(0.0, 0.0, 36.5))
        back = RigidTransform(rotation=(0.0, 0.0, -36.5))
        rng = np.random.default_rng(3)
        pts = pivot + rng.uniform(-200, 200, size=(50, 3))
        out = back.map_points(fwd.map_points(pts, pivot), pivot)
        assert np.abs(out - pts).max() < 1e-12

    def test_rotation_order_x_then_y_then_z(self):
        xf = RigidTransform(rotation=(90.0, 0.0, 90.0))
        pivot = np.zeros(3)
        # x-rotation first maps +y to +z; the z-rotation then leaves +z alone
        out = xf.map_points(np.array([0.0, 1.0, 0.0]), pivot)
        assert np.allclose(out, [0.0, 0.0, 1.0], atol=1e-15)

    def test_lateral_preset(self):
        assert VIEW_PRESETS["lateral"].rotation == (0.0, 0.0, -90.0)
        assert VIEW_PRESETS["frontal"].is_identity()

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            RigidTransform(rotation=(0.0, np.nan, 0.0))

    def test_determinant_is_plus_one(self):
        xf = RigidTransform(rotation=(12.0, -44.0, 171.5))
        assert abs(np.linalg.det(xf.matrix()) - 1.0) < 1e-12
