"""Regular-grid voxelization with mean feature encoding, and BEV collapse.

A voxel stores the running mean of (up to a cap of) the points that fall in
it. Collapsing the height axis produces a 4-channel plane of hand features
(column occupancy, mean point z, mean intensity, highest occupied voxel
center) that stands in for a learned 3D feature extractor at desk scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .pointcloud import PointCloud

BEV_CHANNELS = 4


def _cells(lo: float, hi: float, step: float, axis: str) -> int:
    n = (hi - lo) / step
    if abs(n - round(n)) > 1e-9:
        raise ValueError(
            f"{axis} extent {hi - lo} is not an integer multiple of voxel size {step}"
        )
    return int(round(n))


@dataclass(frozen=True)
class GridConfig:
    """Voxel grid geometry. Ranges are half-open [min, max).

    ``stride`` is the downsampling factor between voxel cells and the
    detection feature map.
    """

    x_range: tuple[float, float] = (0.0, 70.0)
    y_range: tuple[float, float] = (-40.0, 40.0)
    z_range: tuple[float, float] = (-3.0, 1.0)
    vx: float = 0.05
    vy: float = 0.05
    vz: float = 0.1
    stride: int = 4

    def __post_init__(self):
        if self.vx <= 0 or self.vy <= 0 or self.vz <= 0:
            raise ValueError("voxel sizes must be positive")
        nx = _cells(*self.x_range, self.vx, "x")
        ny = _cells(*self.y_range, self.vy, "y")
        _cells(*self.z_range, self.vz, "z")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if nx % self.stride or ny % self.stride:
            raise ValueError(
                f"stride {self.stride} must divide cell counts ({nx}, {ny})"
            )

    @property
    def x_cells(self) -> int:
        return _cells(*self.x_range, self.vx, "x")

    @property
    def y_cells(self) -> int:
        return _cells(*self.y_range, self.vy, "y")

    @property
    def z_cells(self) -> int:
        return _cells(*self.z_range, self.vz, "z")

    @property
    def feature_shape(self) -> tuple[int, int]:
        return self.x_cells // self.stride, self.y_cells // self.stride

    def feature_coords(self, x, y):
        """Map world x/y (meters) to continuous feature-map (row, col)."""
        fx = (np.asarray(x) - self.x_range[0]) / (self.vx * self.stride)
        fy = (np.asarray(y) - self.y_range[0]) / (self.vy * self.stride)
        return fx, fy

    def world_coords(self, row, col):
        """Inverse of :meth:`feature_coords` for continuous cell positions."""
        x = self.x_range[0] + np.asarray(row) * self.vx * self.stride
        y = self.y_range[0] + np.asarray(col) * self.vy * self.stride
        return x, y


@dataclass(frozen=True)
class VoxelFeature:
    mean: np.ndarray  # (4,) mean x, y, z, intensity of retained points
    count: int


@dataclass(frozen=True)
class VoxelGrid:
    config: GridConfig
    occupied: dict[tuple[int, int, int], VoxelFeature]


def voxelize_mean(cloud: PointCloud, config: GridConfig, cap: int = 5) -> VoxelGrid:
    """Bin points into voxels, keeping the mean of the first ``cap`` points.

    Points outside the configured ranges are dropped. Retention follows input
    order, so the result is order-independent only while every voxel holds at
    most ``cap`` points (the mean itself is order-free).
    """
    pts = cloud.points
    (x0, x1), (y0, y1), (z0, z1) = config.x_range, config.y_range, config.z_range
    keep = (
        (pts[:, 0] >= x0) & (pts[:, 0] < x1)
        & (pts[:, 1] >= y0) & (pts[:, 1] < y1)
        & (pts[:, 2] >= z0) & (pts[:, 2] < z1)
    )
    pts = pts[keep]
    ix = np.floor((pts[:, 0] - x0) / config.vx).astype(np.int64)
    iy = np.floor((pts[:, 1] - y0) / config.vy).astype(np.int64)
    iz = np.floor((pts[:, 2] - z0) / config.vz).astype(np.int64)

    sums: dict[tuple[int, int, int], np.ndarray] = {}
    counts: dict[tuple[int, int, int], int] = {}
    for k in range(pts.shape[0]):
        key = (int(ix[k]), int(iy[k]), int(iz[k]))
        n = counts.get(key, 0)
        if n >= cap:
            continue
        if n == 0:
            sums[key] = pts[k].copy()
        else:
            sums[key] += pts[k]
        counts[key] = n + 1

    occupied = {
        key: VoxelFeature(sums[key] / counts[key], counts[key]) for key in sums
    }
    return VoxelGrid(config, occupied)


def bev_collapse(grid: VoxelGrid) -> np.ndarray:
    """Collapse a voxel grid to its (rows, cols, 4) BEV feature plane.

    Output resolution is the feature-map shape (voxel cells divided by the
    stride). Channels: occupancy count normalized by the column's voxel
    budget, point-count-weighted mean z, mean intensity, and the highest
    occupied voxel center z.
    """
    cfg = grid.config
    rows, cols = cfg.feature_shape
    r = cfg.stride
    denom = float(r * r * cfg.z_cells)
    z0 = cfg.z_range[0]

    out = np.zeros((rows, cols, BEV_CHANNELS))
    n_pts = np.zeros((rows, cols))
    z_sum = np.zeros((rows, cols))
    i_sum = np.zeros((rows, cols))
    z_max = np.full((rows, cols), -math.inf)
    for (ix, iy, iz), feat in grid.occupied.items():
        rr, cc = ix // r, iy // r
        out[rr, cc, 0] += 1.0
        n_pts[rr, cc] += feat.count
        z_sum[rr, cc] += feat.mean[2] * feat.count
        i_sum[rr, cc] += feat.mean[3] * feat.count
        center_z = z0 + (iz + 0.5) * cfg.vz
        if center_z > z_max[rr, cc]:
            z_max[rr, cc] = center_z

    out[:, :, 0] /= denom
    hit = n_pts > 0
    out[:, :, 1][hit] = z_sum[hit] / n_pts[hit]
    out[:, :, 2][hit] = i_sum[hit] / n_pts[hit]
    out[:, :, 3][hit] = z_max[hit]
    return out
