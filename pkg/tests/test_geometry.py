"""Camera geometry: closed-form oracles and round-trip properties."""

import math

import numpy as np
import pytest

from csifusion.geometry import (
    CameraConfig,
    in_field_of_view,
    pixel_to_polar,
    polar_to_pixel,
    polar_to_world,
    world_to_pixel,
    world_to_polar,
)


def make_cam(**kw) -> CameraConfig:
    base = dict(
        mount_xy=(0.0, 0.0),
        height_above_ground=6.0,
        yaw=0.0,
        axis_elevation=1.0,
        fov_azimuth=1.2,
        fov_elevation=0.9,
        image_width=1280,
        image_height=720,
    )
    base.update(kw)
    return CameraConfig(**base)


class TestPixelToPolar:
    def test_principal_point_looks_along_axis(self):
        cam = make_cam(yaw=0.0)
        phi, theta = pixel_to_polar(cam.image_width / 2, cam.image_height / 2, cam)
        assert phi == pytest.approx(0.0, abs=1e-12)
        assert theta == pytest.approx(cam.axis_elevation, abs=1e-12)

    def test_right_edge_hits_half_fov(self):
        cam = make_cam(yaw=0.25)
        phi, _ = pixel_to_polar(cam.image_width, cam.image_height / 2, cam)
        assert phi == pytest.approx(0.25 + cam.fov_azimuth / 2, abs=1e-12)
        phi0, _ = pixel_to_polar(0.0, cam.image_height / 2, cam)
        assert phi0 == pytest.approx(0.25 - cam.fov_azimuth / 2, abs=1e-12)

    def test_vertical_edges_hit_half_fov(self):
        cam = make_cam()
        _, th_top = pixel_to_polar(0.0, 0.0, cam)
        _, th_bot = pixel_to_polar(0.0, cam.image_height, cam)
        assert th_top == pytest.approx(cam.axis_elevation - cam.fov_elevation / 2, abs=1e-12)
        assert th_bot == pytest.approx(cam.axis_elevation + cam.fov_elevation / 2, abs=1e-12)

    def test_rejects_pixels_outside_domain(self):
        cam = make_cam()
        with pytest.raises(ValueError):
            pixel_to_polar(-1.0, 10.0, cam)
        with pytest.raises(ValueError):
            pixel_to_polar(10.0, cam.image_height + 0.5, cam)

    def test_fov_containment_sweep(self):
        """No in-image pixel can map outside the configured field of view."""
        cam = make_cam(yaw=-0.7)
        rng = np.random.default_rng(7)
        u = rng.uniform(0, cam.image_width, size=2000)
        v = rng.uniform(0, cam.image_height, size=2000)
        phi, theta = pixel_to_polar(u, v, cam)
        assert np.all(np.abs(phi - cam.yaw) <= cam.fov_azimuth / 2 + 1e-12)
        assert np.all(np.abs(theta - cam.axis_elevation) <= cam.fov_elevation / 2 + 1e-12)


class TestGroundIntersection:
    def test_known_intersection(self):
        # 6 m mast, ray at atan(10/6) from vertical: lands 10 m out
        cam = make_cam(height_above_ground=6.0)
        x, y = polar_to_world(0.3, math.atan2(10.0, 6.0), cam)
        assert x == pytest.approx(10.0 * math.cos(0.3), abs=1e-12)
        assert y == pytest.approx(10.0 * math.sin(0.3), abs=1e-12)

    def test_straight_down(self):
        cam = make_cam(mount_xy=(3.0, -2.0))
        x, y = polar_to_world(1.1, 0.0, cam)
        assert (x, y) == pytest.approx((3.0, -2.0), abs=1e-12)

    def test_horizon_rejected(self):
        cam = make_cam()
        with pytest.raises(ValueError):
            polar_to_world(0.0, math.pi / 2, cam)

    def test_distance_monotone_in_elevation(self):
        cam = make_cam()
        thetas = np.linspace(0.05, 1.5, 200)
        x, y = polar_to_world(0.4, thetas, cam)
        d = np.hypot(x - cam.mount_xy[0], y - cam.mount_xy[1])
        assert np.all(np.diff(d) > 0)


class TestRoundTrip:
    def test_pixel_world_pixel(self):
        """pixel -> direction -> ground point -> pixel is the identity."""
        cam = make_cam(mount_xy=(-12.0, 4.0), yaw=2.1)
        rng = np.random.default_rng(11)
        u = rng.uniform(0, cam.image_width, size=500)
        v = rng.uniform(0, cam.image_height, size=500)
        phi, theta = pixel_to_polar(u, v, cam)
        x, y = polar_to_world(phi, theta, cam)
        u2, v2 = world_to_pixel(x, y, cam)
        np.testing.assert_allclose(u2, u, atol=1e-8)
        np.testing.assert_allclose(v2, v, atol=1e-8)

    def test_world_round_trip_metres(self):
        """Ground points inside the FoV survive projection within 1e-9 m."""
        cam = make_cam(mount_xy=(5.0, -7.0), yaw=0.9)
        rng = np.random.default_rng(3)
        kept = 0
        for _ in range(400):
            phi = cam.yaw + rng.uniform(-0.49, 0.49) * cam.fov_azimuth
            theta = cam.axis_elevation + rng.uniform(-0.49, 0.49) * cam.fov_elevation
            x, y = polar_to_world(phi, theta, cam)
            if not in_field_of_view(x, y, cam):
                continue
            u, v = world_to_pixel(x, y, cam)
            phi2, theta2 = pixel_to_polar(float(u), float(v), cam)
            x2, y2 = polar_to_world(phi2, theta2, cam)
            assert abs(x2 - x) < 1e-9 and abs(y2 - y) < 1e-9
            kept += 1
        assert kept > 350

    def test_world_polar_inverse(self):
        cam = make_cam(mount_xy=(1.0, 2.0))
        phi, theta = world_to_polar(21.0, 2.0, cam)
        assert phi == pytest.approx(0.0, abs=1e-12)
        assert theta == pytest.approx(math.atan2(20.0, 6.0), abs=1e-12)
        x, y = polar_to_world(phi, theta, cam)
        assert (x, y) == pytest.approx((21.0, 2.0), abs=1e-10)


class TestFieldOfView:
    def test_behind_camera_not_visible(self):
        cam = make_cam(yaw=0.0)
        assert not in_field_of_view(-50.0, 0.0, cam)

    def test_axis_point_visible(self):
        cam = make_cam(yaw=0.0)
        d = cam.height_above_ground * math.tan(cam.axis_elevation)
        assert in_field_of_view(d, 0.0, cam)

    def test_too_close_point_below_image(self):
        cam = make_cam()
        # nearer than the bottom edge of the image
        d_min = cam.height_above_ground * math.tan(cam.axis_elevation - cam.fov_elevation / 2)
        assert not in_field_of_view(0.5 * d_min, 0.0, cam)


class TestConfigValidation:
    def test_fov_must_stay_below_horizon(self):
        with pytest.raises(ValueError):
            make_cam(axis_elevation=1.4, fov_elevation=0.9)

    def test_fov_must_stay_above_vertical(self):
        with pytest.raises(ValueError):
            make_cam(axis_elevation=0.3, fov_elevation=0.9)

    def test_positive_height(self):
        with pytest.raises(ValueError):
            make_cam(height_above_ground=0.0)

    def test_fov_range(self):
        with pytest.raises(ValueError):
            make_cam(fov_azimuth=math.pi)
