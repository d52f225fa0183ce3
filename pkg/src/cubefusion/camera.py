"""Camera frame container, pinhole projection, and input rescaling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


@dataclass
class CameraFrame:
    """An RGB frame with its pinhole intrinsics and ego->camera extrinsics.

    pixels: (H, W, 3) float array in [0, 1].
    intrinsics: 3x3 matrix [[fx, 0, cx], [0, fy, cy], [0, 0, 1]].
    rotation / translation: rigid transform X_cam = R @ X_ego + t.
    """

    pixels: np.ndarray
    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"pixels must be (H, W, 3), got {self.pixels.shape}")
        h, w = self.pixels.shape[:2]
        fx, fy = self.intrinsics[0, 0], self.intrinsics[1, 1]
        cx, cy = self.intrinsics[0, 2], self.intrinsics[1, 2]
        if fx <= 0 or fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= cx < w and 0 <= cy < h):
            raise ValueError("principal point must lie inside the image")
        rtr = self.rotation.T @ self.rotation
        if not np.allclose(rtr, np.eye(3), atol=1e-6) or abs(np.linalg.det(self.rotation) - 1.0) > 1e-6:
            raise ValueError("rotation must be orthonormal with determinant +1")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def forward_camera_rotation() -> np.ndarray:
    """Rotation mapping ego (x fwd, y left, z up) to camera (x right, y down, z fwd)."""
    return np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


def project_ego_points(points: np.ndarray, intrinsics: np.ndarray,
                       rotation: np.ndarray, translation: np.ndarray,
                       width: int, height: int):
    """Project (N, 3) ego points through extrinsics and the pinhole model.

    Returns (uv, valid): continuous pixel coordinates (N, 2) and a mask that
    is False for points behind the camera (Z_c <= 1e-6) or outside the image.
    Pixel coordinates follow the half-open convention [-0.5, size - 0.5).
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    cam = points @ np.asarray(rotation).T + np.asarray(translation)
    z = cam[:, 2]
    in_front = z > 1e-6
    z_safe = np.where(in_front, z, 1.0)
    u = intrinsics[0, 0] * cam[:, 0] / z_safe + intrinsics[0, 2]
    v = intrinsics[1, 1] * cam[:, 1] / z_safe + intrinsics[1, 2]
    uv = np.stack((u, v), axis=-1)
    inside = (u >= -0.5) & (u < width - 0.5) & (v >= -0.5) & (v < height - 0.5)
    return uv, in_front & inside


def resized_size(width: int, height: int, target_height: int) -> tuple[int, int]:
    """(width, height) after an aspect-preserving resize to `target_height`."""
    if target_height < 2:
        raise ValueError("target_height must be >= 2")
    return max(2, round(width * target_height / height)), target_height


def scaled_intrinsics(intrinsics: np.ndarray, width: int, height: int,
                      target_width: int, target_height: int) -> np.ndarray:
    """Rescale a pinhole matrix: fx, cx by the width ratio, fy, cy by height."""
    k = np.asarray(intrinsics, dtype=np.float64).copy()
    k[0, :] *= target_width / width
    k[1, :] *= target_height / height
    return k


def resize_image(frame: CameraFrame, target_height: int) -> CameraFrame:
    """Bilinearly rescale a frame to `target_height`, preserving aspect ratio.

    Intrinsics are rescaled consistently: fx and cx by the width ratio,
    fy and cy by the height ratio.
    """
    h, w = frame.height, frame.width
    if target_height == h:
        return frame
    target_width, target_height = resized_size(w, h, target_height)
    img = torch.from_numpy(frame.pixels).permute(2, 0, 1).unsqueeze(0)
    resized = F.interpolate(img, size=(target_height, target_width), mode="bilinear",
                            align_corners=False, antialias=False)
    pixels = resized.squeeze(0).permute(1, 2, 0).clamp(0.0, 1.0).numpy()

    k = scaled_intrinsics(frame.intrinsics, w, h, target_width, target_height)
    return CameraFrame(pixels=pixels, intrinsics=k,
                       rotation=frame.rotation, translation=frame.translation)
