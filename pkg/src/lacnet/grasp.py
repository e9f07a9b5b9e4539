"""Top-grasp point generation from a completed mask, plus the Region A/B
grasp-quality geometry.

The grasp pixel is the centroid of the predicted amodal mask; its depth is
the median valid depth under the predicted *visible* mask (the amodal center
may sit beneath an occluder whose depth is not the object's), and the pixel
is back-projected through the pinhole intrinsics. Region A is the middle
third of the mask along its principal second-moment axis; grasps centered
there are the stable ones.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .scene import CameraIntrinsics, RgbdScene


class GraspRegionLabel(Enum):
    REGION_A = "RegionA"
    REGION_B = "RegionB"
    OUTSIDE = "Outside"


@dataclass
class GraspPoint:
    pixel: tuple[float, float]
    point3d: tuple[float, float, float]
    strategy: str = "top-grasp"

    def to_dict(self) -> dict:
        return {
            "pixel": [self.pixel[0], self.pixel[1]],
            "point3d": list(self.point3d),
            "strategy": self.strategy,
        }


def mask_center(mask: np.ndarray) -> tuple[float, float]:
    """Centroid (u, v) of the set pixels, u along columns."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ValueError("mask is empty")
    return float(xs.mean()), float(ys.mean())


def center_depth(scene: RgbdScene, visible_mask: np.ndarray) -> float:
    """Median of the valid depth values under the visible mask."""
    values = scene.depth[visible_mask.astype(bool)]
    values = values[values > 0]
    if values.size == 0:
        raise ValueError("no valid depth under the visible mask")
    return float(np.median(values))


def back_project(u: float, v: float, z: float, intrinsics: CameraIntrinsics) -> tuple[float, float, float]:
    """Pixel + depth to a camera-frame 3D point."""
    if z <= 0:
        raise ValueError("depth must be positive")
    x = (u - intrinsics.cx) * z / intrinsics.fx
    y = (v - intrinsics.cy) * z / intrinsics.fy
    return (x, y, z)


def project(point: tuple[float, float, float], intrinsics: CameraIntrinsics) -> tuple[float, float]:
    """Camera-frame 3D point to pixel coordinates (pinhole)."""
    x, y, z = point
    if z <= 0:
        raise ValueError("depth must be positive")
    return (intrinsics.fx * x / z + intrinsics.cx, intrinsics.fy * y / z + intrinsics.cy)


def principal_axis(mask: np.ndarray) -> np.ndarray:
    """Unit eigenvector of the larger second-central-moment eigenvalue.

    The sign is fixed so the first nonzero component is positive; isotropic
    masks (equal eigenvalues) return (1, 0).
    """
    ys, xs = np.nonzero(mask)
    if ys.size < 2:
        raise ValueError("mask needs at least 2 pixels to define an axis")
    coords = np.stack([xs, ys], axis=1).astype(np.float64)
    centered = coords - coords.mean(axis=0)
    moments = centered.T @ centered / coords.shape[0]
    eigvals, eigvecs = np.linalg.eigh(moments)  # ascending
    if np.isclose(eigvals[0], eigvals[1], rtol=1e-9, atol=1e-12):
        return np.array([1.0, 0.0])
    axis = eigvecs[:, 1]
    for component in axis:
        if component != 0:
            if component < 0:
                axis = -axis
            break
    return axis


def classify_grasp_region(point: tuple[float, float], amodal_mask: np.ndarray) -> GraspRegionLabel:
    """Locate a 2D point in the middle third (A) or outer thirds (B) of the
    mask along its principal axis; points off the mask are Outside."""
    mask = amodal_mask.astype(bool)
    if not mask.any():
        raise ValueError("amodal mask is empty")
    u, v = point
    col = int(np.rint(u))
    row = int(np.rint(v))
    h, w = mask.shape
    if not (0 <= row < h and 0 <= col < w) or not mask[row, col]:
        return GraspRegionLabel.OUTSIDE
    axis = principal_axis(mask)
    ys, xs = np.nonzero(mask)
    t = xs * axis[0] + ys * axis[1]
    t_min, t_max = float(t.min()), float(t.max())
    span = t_max - t_min
    t_query = u * axis[0] + v * axis[1]
    lo = t_min + span / 3.0
    hi = t_min + 2.0 * span / 3.0
    if lo < t_query <= hi:
        return GraspRegionLabel.REGION_A
    return GraspRegionLabel.REGION_B


def generate_grasp(scene: RgbdScene, prediction) -> GraspPoint:
    """Top-grasp point for a prediction: amodal centroid at visible depth."""
    u, v = mask_center(prediction.amodal_mask)
    z = center_depth(scene, prediction.visible_mask)
    return GraspPoint(pixel=(u, v), point3d=back_project(u, v, z, scene.intrinsics))
