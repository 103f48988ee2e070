"""Spherical projection between point clouds and range images.

Column ``u`` and row ``v`` follow the usual range-image layout: azimuth wraps
around the width, elevation runs down the height.  Pixel decoding always uses
the pixel center, so ``project(unproject(u, v, r)) == (u, v)`` exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class SensorModel:
    height_px: int
    width_px: int
    fov_up: float  # radians
    fov_down: float  # radians
    max_range: float  # meters

    def __post_init__(self):
        if self.height_px < 1 or self.width_px < 1:
            raise ValueError(f"image dims must be positive, got {self.height_px}x{self.width_px}")
        if not self.fov_up + self.fov_down > 0:
            raise ValueError("fov_up + fov_down must be positive")
        if not self.max_range > 0:
            raise ValueError("max_range must be positive")

    @classmethod
    def from_degrees(cls, height_px, width_px, fov_up_deg, fov_down_deg, max_range):
        return cls(int(height_px), int(width_px), math.radians(fov_up_deg),
                   math.radians(fov_down_deg), float(max_range))

    @property
    def fov(self) -> float:
        return self.fov_up + self.fov_down

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height_px, self.width_px)


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3)
    intensity: Optional[np.ndarray] = None  # (N,)
    labels: Optional[np.ndarray] = None  # (N,) class ids

    def __post_init__(self):
        self.points = np.asarray(self.points).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")

    def __len__(self) -> int:
        return self.points.shape[0]

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3), dtype=np.float32))


@dataclass
class RangeImage:
    ranges: np.ndarray  # (h, w) meters, 0 = no return
    sensor: SensorModel = field(repr=False)

    @property
    def mask(self) -> np.ndarray:
        return self.ranges > 0


def project_continuous(points, sensor: SensorModel):
    """Map points ``(..., 3)`` to continuous ``(u, v, r)`` without flooring."""
    p = np.asarray(points, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    r = np.sqrt(x * x + y * y + z * z)
    with np.errstate(invalid="ignore", divide="ignore"):
        elevation = np.arcsin(np.clip(z / r, -1.0, 1.0))
    azimuth = np.arctan2(y, x)
    u = 0.5 * (1.0 - azimuth / np.pi) * sensor.width_px
    v = (1.0 - (elevation + sensor.fov_up) / sensor.fov) * sensor.height_px
    return u, v, r


def unproject_continuous(u, v, r, sensor: SensorModel) -> np.ndarray:
    """Exact inverse of :func:`project_continuous`; returns ``(..., 3)``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    azimuth = np.pi * (1.0 - 2.0 * u / sensor.width_px)
    elevation = (1.0 - v / sensor.height_px) * sensor.fov - sensor.fov_up
    cos_el = np.cos(elevation)
    return np.stack([r * cos_el * np.cos(azimuth),
                     r * cos_el * np.sin(azimuth),
                     r * np.sin(elevation)], axis=-1)


def project_points(points, sensor: SensorModel):
    """Vectorised projection to integer pixels.

    Returns ``(u, v, r, keep)`` where ``keep`` flags points that land inside the
    vertical field of view with ``0 < r <= max_range``.
    """
    uc, vc, r = project_continuous(points, sensor)
    keep = (r > 0) & (r <= sensor.max_range)
    with np.errstate(invalid="ignore"):
        v = np.floor(vc)
        keep &= (v >= 0) & (v < sensor.height_px)
        u = np.mod(np.floor(uc), sensor.width_px)
    u = np.where(keep, u, 0).astype(np.int64)
    v = np.where(keep, v, 0).astype(np.int64)
    return u, v, r, keep


def project_point(p, sensor: SensorModel) -> Optional[tuple[int, int, float]]:
    """Project a single point; ``None`` when it falls outside the sensor's view."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise ValueError(f"expected a finite 3D point, got {p!r}")
    if not np.any(p):
        raise ValueError("cannot project the sensor origin")
    u, v, r, keep = project_points(p[None], sensor)
    if not keep[0]:
        return None
    return int(u[0]), int(v[0]), float(r[0])


def unproject_pixel(u: int, v: int, r: float, sensor: SensorModel) -> np.ndarray:
    if not (0 <= u < sensor.width_px and 0 <= v < sensor.height_px):
        raise ValueError(f"pixel ({u}, {v}) outside {sensor.height_px}x{sensor.width_px} image")
    if not r > 0:
        raise ValueError(f"range must be positive, got {r}")
    return unproject_continuous(u + 0.5, v + 0.5, r, sensor)


def pixel_directions(sensor: SensorModel) -> np.ndarray:
    """Unit ray direction through every pixel center, shape ``(h, w, 3)``."""
    vv, uu = np.meshgrid(np.arange(sensor.height_px), np.arange(sensor.width_px), indexing="ij")
    return unproject_continuous(uu + 0.5, vv + 0.5, 1.0, sensor)


def build_range_image(cloud: PointCloud, sensor: SensorModel):
    """Z-buffer a cloud into a range image, keeping the nearest point per pixel.

    Returns ``(RangeImage, class_grid)``; ``class_grid`` is ``None`` unless the
    cloud carries labels, in which case unfilled pixels hold ``-1``.
    """
    h, w = sensor.shape
    ranges = np.zeros((h, w), dtype=np.float64)
    classes = np.full((h, w), -1, dtype=np.int64) if cloud.labels is not None else None
    if len(cloud) == 0:
        return RangeImage(ranges, sensor), classes

    u, v, r, keep = project_points(cloud.points, sensor)
    idx = np.flatnonzero(keep)
    flat = v[idx] * w + u[idx]
    # nearest first, ties broken by point order
    order = np.lexsort((idx, r[idx]))
    flat, idx = flat[order], idx[order]
    pix, first = np.unique(flat, return_index=True)
    winners = idx[first]
    ranges.flat[pix] = r[winners]
    if classes is not None:
        classes.flat[pix] = np.asarray(cloud.labels)[winners]
    return RangeImage(ranges, sensor), classes


def range_image_to_cloud(ranges, mask_probs, sensor: SensorModel, threshold: float = 0.5) -> PointCloud:
    """Re-project pixels whose mask probability exceeds ``threshold``."""
    ranges = np.asarray(ranges.ranges if isinstance(ranges, RangeImage) else ranges)
    mask_probs = np.asarray(mask_probs)
    if ranges.shape != mask_probs.shape or ranges.shape != sensor.shape:
        raise ValueError(f"shape mismatch: ranges {ranges.shape}, mask {mask_probs.shape}, "
                         f"sensor {sensor.shape}")
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    vv, uu = np.nonzero((mask_probs > threshold) & (ranges > 0))
    pts = unproject_continuous(uu + 0.5, vv + 0.5, ranges[vv, uu], sensor)
    return PointCloud(pts.reshape(-1, 3))
