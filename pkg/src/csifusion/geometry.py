"""Pinhole camera geometry for roadside vehicle detection.

Conventions used throughout the package:

* World frame: right-handed, x east, y north, units metres. Vehicles live on
  the ground plane z = 0; a camera sits ``height_above_ground`` metres above
  its 2D mount position.
* Azimuth ``phi``: angle of the horizontal viewing ray in the world frame,
  measured counter-clockwise from the +x axis (``atan2`` convention).
* Elevation ``theta``: angle of the viewing ray measured from the vertical
  (straight down = 0, horizon = pi/2). With this convention the horizontal
  distance from the camera foot point to the ground intersection is
  ``height_above_ground * tan(theta)``.
* Pixels: ``u`` grows left to right across ``image_width``, ``v`` grows top
  to bottom across ``image_height``. The closed domain [0, W] x [0, H] is
  accepted; the principal point (W/2, H/2) looks along the optical axis.

The pixel-to-angle model is linear in the tangent: a pixel offset maps to
``atan(normalized_offset * tan(fov/2))``, so the image edges land exactly on
the half field of view.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "CameraConfig",
    "pixel_to_polar",
    "polar_to_pixel",
    "polar_to_world",
    "world_to_polar",
    "world_to_pixel",
    "in_field_of_view",
]

_HALF_PI = math.pi / 2.0


@dataclass(frozen=True)
class CameraConfig:
    """Static description of one roadside camera.

    Attributes:
        mount_xy: 2D world position of the camera mast foot point, metres.
        height_above_ground: vertical distance from the camera to the road
            plane, metres, strictly positive.
        yaw: azimuth of the optical axis, radians.
        axis_elevation: elevation of the optical axis measured from the
            vertical, radians. The whole vertical field of view must stay
            strictly between straight-down and the horizon.
        fov_azimuth: full horizontal field of view, radians, in (0, pi).
        fov_elevation: full vertical field of view, radians, in (0, pi).
        image_width: sensor width in pixels.
        image_height: sensor height in pixels.
    """

    mount_xy: tuple[float, float]
    height_above_ground: float
    yaw: float
    axis_elevation: float
    fov_azimuth: float
    fov_elevation: float
    image_width: int = 1280
    image_height: int = 720

    def __post_init__(self) -> None:
        if self.height_above_ground <= 0.0:
            raise ValueError(
                f"camera.height_above_ground must be > 0, got {self.height_above_ground}"
            )
        if not 0.0 < self.fov_azimuth < math.pi:
            raise ValueError(f"camera.fov_azimuth must be in (0, pi), got {self.fov_azimuth}")
        if not 0.0 < self.fov_elevation < math.pi:
            raise ValueError(f"camera.fov_elevation must be in (0, pi), got {self.fov_elevation}")
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError("camera image dimensions must be positive")
        lo = self.axis_elevation - 0.5 * self.fov_elevation
        hi = self.axis_elevation + 0.5 * self.fov_elevation
        if lo <= 0.0 or hi >= _HALF_PI:
            raise ValueError(
                "camera vertical field of view must stay between straight-down and the "
                f"horizon: axis_elevation +- fov_elevation/2 spans [{lo:.4f}, {hi:.4f}] rad"
            )


def pixel_to_polar(u, v, cam: CameraConfig):
    """Map pixel coordinates to a (azimuth, elevation) viewing direction.

    Accepts scalars or broadcasting arrays. Raises ValueError if any input
    lies outside the closed pixel domain [0, W] x [0, H].
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.any(u < 0) or np.any(u > cam.image_width) or np.any(v < 0) or np.any(v > cam.image_height):
        raise ValueError(
            f"pixel outside image domain [0, {cam.image_width}] x [0, {cam.image_height}]"
        )
    phi = cam.yaw + np.arctan(
        (2.0 * u / cam.image_width - 1.0) * math.tan(0.5 * cam.fov_azimuth)
    )
    theta = cam.axis_elevation + np.arctan(
        (2.0 * v / cam.image_height - 1.0) * math.tan(0.5 * cam.fov_elevation)
    )
    return phi, theta


def polar_to_world(phi, theta, cam: CameraConfig):
    """Intersect a viewing direction with the ground plane.

    Returns the (x, y) world coordinates of the intersection. ``theta`` must
    be strictly below the horizon (theta < pi/2); rays at or above the
    horizon never meet the road and raise ValueError.
    """
    phi = np.asarray(phi, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if np.any(theta < 0.0) or np.any(theta >= _HALF_PI):
        raise ValueError("elevation must lie in [0, pi/2) to intersect the ground plane")
    d = cam.height_above_ground * np.tan(theta)
    x = cam.mount_xy[0] + d * np.cos(phi)
    y = cam.mount_xy[1] + d * np.sin(phi)
    return x, y


def world_to_polar(x, y, cam: CameraConfig):
    """Viewing direction from the camera toward a ground-plane point."""
    dx = np.asarray(x, dtype=float) - cam.mount_xy[0]
    dy = np.asarray(y, dtype=float) - cam.mount_xy[1]
    d = np.hypot(dx, dy)
    phi = np.arctan2(dy, dx)
    theta = np.arctan2(d, cam.height_above_ground)
    return phi, theta


def _wrap_angle(a):
    # wrap to (-pi, pi]
    return np.arctan2(np.sin(a), np.cos(a)) if np.ndim(a) else math.atan2(math.sin(a), math.cos(a))


def polar_to_pixel(phi, theta, cam: CameraConfig):
    """Project a viewing direction into pixel coordinates.

    Returns floating point (u, v); values fall outside [0, W] x [0, H] when
    the direction is outside the field of view. Directions more than pi/2
    away from the optical axis in azimuth (behind the camera) yield NaN.
    """
    phi = np.asarray(phi, dtype=float)
    theta = np.asarray(theta, dtype=float)
    az_off = np.arctan2(np.sin(phi - cam.yaw), np.cos(phi - cam.yaw))
    el_off = theta - cam.axis_elevation
    with np.errstate(invalid="ignore"):
        u = 0.5 * cam.image_width * (
            1.0 + np.where(np.abs(az_off) < _HALF_PI, np.tan(az_off), np.nan)
            / math.tan(0.5 * cam.fov_azimuth)
        )
    v = 0.5 * cam.image_height * (1.0 + np.tan(el_off) / math.tan(0.5 * cam.fov_elevation))
    return u, v


def world_to_pixel(x, y, cam: CameraConfig):
    """Project a ground-plane point into pixel coordinates (may be off-image)."""
    phi, theta = world_to_polar(x, y, cam)
    return polar_to_pixel(phi, theta, cam)


def in_field_of_view(x, y, cam: CameraConfig):
    """True where the ground-plane point projects inside the image."""
    phi, theta = world_to_polar(x, y, cam)
    u, v = polar_to_pixel(phi, theta, cam)
    ok = np.isfinite(u) & (u >= 0) & (u <= cam.image_width) & (v >= 0) & (v <= cam.image_height)
    return ok if np.ndim(ok) else bool(ok)
