"""Training-target generation: center/corner heatmaps and regression maps.

Each ground-truth box contributes exactly one positive feature cell. Gaussian
splats around centers (and the four footprint corners) soften the negatives;
overlapping splats combine by element-wise max so heatmap values stay in
[0, 1].
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .geom import Box3D, bev_corners, corners_3d
from .voxelize import GridConfig

MIN_SIGMA = 1.0 / 6.0  # cells; keeps tiny objects from degenerate kernels


@dataclass(frozen=True)
class EncoderConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    num_classes: int = 1
    min_overlap: float = 0.01

    def __post_init__(self):
        if not (0.0 < self.min_overlap <= 1.0):
            raise ValueError(f"min_overlap must be in (0, 1], got {self.min_overlap}")
        if self.num_classes < 1:
            raise ValueError("need at least one class")


@dataclass
class TargetSet:
    """Per-frame training targets; maps are (rows, cols, channels) arrays."""

    center_heat: np.ndarray      # C channels in [0, 1]
    corner_heat: np.ndarray      # C channels in [0, 1]
    offset: np.ndarray           # 2 channels in [0, 1)
    z: np.ndarray                # 1 channel, meters
    size: np.ndarray             # 3 channels, meters
    direction: np.ndarray        # 2 channels: cos(yaw), sin(yaw)
    gt_corners: list[np.ndarray]  # one (8, 3) array per positive
    positives: list[tuple[int, int, int]]  # (row, col, class id)

    @property
    def num_positives(self) -> int:
        return len(self.positives)

    def positive_cells(self) -> list[tuple[int, int]]:
        return [(r, c) for r, c, _ in self.positives]


def gaussian_radius(l_cells: float, w_cells: float, t: float) -> float:
    """Largest center displacement (in cells) that keeps axis-aligned IoU >= t.

    Solves the three classical corner-displacement cases as quadratics in the
    radius and takes the most restrictive (smallest) positive root:

    * the box shifted by r along both axes: (l-r)(w-r) / (2lw - (l-r)(w-r)),
    * the box shrunk by 2r per axis: (l-2r)(w-2r) / lw,
    * the box grown by 2r per axis: lw / (l+2r)(w+2r).
    """
    if l_cells <= 0 or w_cells <= 0:
        raise ValueError(f"box footprint must be positive, got {l_cells} x {w_cells}")
    if not (0.0 < t <= 1.0):
        raise ValueError(f"overlap threshold must be in (0, 1], got {t}")
    p = l_cells + w_cells
    q = l_cells * w_cells

    # shift: r^2 - p r + q (1 - t) / (1 + t) >= 0, keep the smaller root
    d1 = p * p - 4.0 * q * (1.0 - t) / (1.0 + t)
    r1 = (p - math.sqrt(max(d1, 0.0))) / 2.0

    # shrink: 4 r^2 - 2 p r + (1 - t) q >= 0
    d2 = p * p - 4.0 * (1.0 - t) * q
    r2 = (p - math.sqrt(max(d2, 0.0))) / 4.0

    # grow: 4 t r^2 + 2 t p r - (1 - t) q <= 0, keep the positive root
    d3 = t * t * p * p + 4.0 * t * (1.0 - t) * q
    r3 = (-t * p + math.sqrt(max(d3, 0.0))) / (4.0 * t)

    return max(0.0, min(r1, r2, r3))


def gaussian_window_radius(sigma: float) -> int:
    """Integer half-width of the splat window (side length ~ 6*sigma + 1)."""
    return int(round(3.0 * sigma))


def draw_gaussian(heat: np.ndarray, center: tuple[int, int], sigma: float) -> None:
    """Splat exp(-d^2 / (2 sigma^2)) around an integer cell, in place.

    Existing values combine with the kernel by element-wise max. Centers
    outside the grid draw only the visible part of the window.
    """
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    rows, cols = heat.shape
    cr, cc = center
    rad = gaussian_window_radius(sigma)
    r0, r1 = max(cr - rad, 0), min(cr + rad, rows - 1)
    c0, c1 = max(cc - rad, 0), min(cc + rad, cols - 1)
    if r0 > r1 or c0 > c1:
        return
    rr = np.arange(r0, r1 + 1)[:, None] - cr
    cc_off = np.arange(c0, c1 + 1)[None, :] - cc
    kernel = np.exp(-(rr * rr + cc_off * cc_off) / (2.0 * sigma * sigma))
    patch = heat[r0 : r1 + 1, c0 : c1 + 1]
    np.maximum(patch, kernel, out=patch)


def box_sigma(box: Box3D, cfg: EncoderConfig) -> float:
    g = cfg.grid
    l_cells = box.l / (g.vx * g.stride)
    w_cells = box.w / (g.vy * g.stride)
    radius = gaussian_radius(l_cells, w_cells, cfg.min_overlap)
    return max(radius / 6.0, MIN_SIGMA)


def encode_targets(boxes, classes, cfg: EncoderConfig) -> TargetSet:
    """Build the full target set for one frame.

    Every box must have its center inside the grid ranges. If two boxes of
    the same class land on the same feature cell, the later box overwrites
    the regression targets and a collision warning is emitted.
    """
    g = cfg.grid
    rows, cols = g.feature_shape
    ts = TargetSet(
        center_heat=np.zeros((rows, cols, cfg.num_classes)),
        corner_heat=np.zeros((rows, cols, cfg.num_classes)),
        offset=np.zeros((rows, cols, 2)),
        z=np.zeros((rows, cols, 1)),
        size=np.zeros((rows, cols, 3)),
        direction=np.zeros((rows, cols, 2)),
        gt_corners=[],
        positives=[],
    )
    seen: set[tuple[int, int, int]] = set()
    for box, cid in zip(boxes, classes, strict=True):
        if not (g.x_range[0] <= box.cx < g.x_range[1]
                and g.y_range[0] <= box.cy < g.y_range[1]
                and g.z_range[0] <= box.cz < g.z_range[1]):
            raise ValueError(f"box center {(box.cx, box.cy, box.cz)} outside grid ranges")
        if not 0 <= cid < cfg.num_classes:
            raise ValueError(f"class id {cid} out of range for C={cfg.num_classes}")

        fx, fy = g.feature_coords(box.cx, box.cy)
        pr, pc = int(math.floor(fx)), int(math.floor(fy))
        sigma = box_sigma(box, cfg)
        draw_gaussian(ts.center_heat[:, :, cid], (pr, pc), sigma)
        for corner in bev_corners(box):
            qx, qy = g.feature_coords(corner[0], corner[1])
            draw_gaussian(
                ts.corner_heat[:, :, cid],
                (int(math.floor(qx)), int(math.floor(qy))),
                sigma,
            )

        key = (pr, pc, cid)
        if key in seen:
            warnings.warn(
                f"positive-cell collision at {key}; later box overwrites targets",
                stacklevel=2,
            )
        seen.add(key)
        ts.offset[pr, pc] = (fx - pr, fy - pc)
        ts.z[pr, pc, 0] = box.cz
        ts.size[pr, pc] = (box.l, box.w, box.h)
        ts.direction[pr, pc] = (math.cos(box.yaw), math.sin(box.yaw))
        ts.gt_corners.append(corners_3d(box))
        ts.positives.append(key)
    return ts
