"""Coordinate transforms shared across the pipeline.

Ego frame convention: x forward, y left, z up (right-handed).
Polar coordinates are (range [m], azimuth [rad], elevation [rad]) with
azimuth measured from +x towards +y and elevation from the xy-plane
towards +z.
"""

from __future__ import annotations

import numpy as np


def polar_to_cartesian(points: np.ndarray) -> np.ndarray:
    """Convert (..., 3) polar points (r, az, el) to cartesian ego coordinates."""
    points = np.asarray(points, dtype=np.float64)
    r = points[..., 0]
    az = points[..., 1]
    el = points[..., 2]
    cos_el = np.cos(el)
    return np.stack(
        (r * cos_el * np.cos(az), r * cos_el * np.sin(az), r * np.sin(el)), axis=-1
    )


def cartesian_to_polar(points: np.ndarray) -> np.ndarray:
    """Convert (..., 3) cartesian ego points to polar (r, az, el).

    The origin maps to r=0 with azimuth and elevation 0.
    """
    points = np.asarray(points, dtype=np.float64)
    x = points[..., 0]
    y = points[..., 1]
    z = points[..., 2]
    r = np.sqrt(x * x + y * y + z * z)
    az = np.arctan2(y, x)
    with np.errstate(invalid="ignore"):
        el = np.where(r > 0.0, np.arcsin(np.clip(z / np.maximum(r, 1e-12), -1.0, 1.0)), 0.0)
    return np.stack((r, az, el), axis=-1)


def wrap_angle(theta: np.ndarray | float) -> np.ndarray | float:
    """Wrap angles to [-pi, pi)."""
    return (np.asarray(theta) + np.pi) % (2.0 * np.pi) - np.pi


def yaw_rotation(theta: float) -> np.ndarray:
    """2D rotation matrix for a heading angle (BEV, x forward / y left)."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]], dtype=np.float64)
