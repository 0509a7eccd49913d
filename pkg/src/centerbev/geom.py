"""Oriented-box geometry, rotated IoU, and bilinear map sampling.

Conventions used across the package:

* world frame: x forward, y left, z up, everything in meters;
* 2D maps are numpy arrays indexed ``[row, col]`` (or ``[row, col, channel]``),
  rows running along x and columns along y;
* continuous map coordinates place cell ``(i, j)`` at position ``(i, j)``, so
  integer coordinates land exactly on a cell node.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi

# Intersection areas below this are treated as empty (clipping slivers).
AREA_EPS = 1e-12


def wrap_angle(r: float) -> float:
    """Reduce an angle to the canonical interval (-pi, pi]."""
    if not math.isfinite(r):
        raise ValueError(f"angle must be finite, got {r!r}")
    w = (r + math.pi) % TWO_PI - math.pi
    if w <= -math.pi:  # modulo lands on the open end
        w = math.pi
    return w


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box: center, size, and heading about the z axis.

    ``l`` runs along the heading, ``w`` across it, ``h`` up. Yaw is stored
    wrapped to (-pi, pi].
    """

    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float

    def __post_init__(self):
        for name in ("cx", "cy", "cz", "l", "w", "h", "yaw"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"Box3D.{name} must be finite, got {v!r}")
        if self.l <= 0 or self.w <= 0 or self.h <= 0:
            raise ValueError(
                f"Box3D sizes must be positive, got l={self.l}, w={self.w}, h={self.h}"
            )
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h


# Corner sign pattern, canonical order: front-left, front-right, rear-right,
# rear-left relative to the heading (this order is clockwise in the x/y plane).
_CORNER_SIGNS = np.array([[1, 1], [1, -1], [-1, -1], [-1, 1]], dtype=float)


def bev_corners(box: Box3D) -> np.ndarray:
    """Four footprint corners, shape (4, 2), in canonical order."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    local = _CORNER_SIGNS * np.array([box.l / 2.0, box.w / 2.0])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([box.cx, box.cy])


def corners_3d(box: Box3D) -> np.ndarray:
    """Eight box corners, shape (8, 3): bottom four then top four."""
    bev = bev_corners(box)
    out = np.empty((8, 3))
    out[:4, :2] = bev
    out[4:, :2] = bev
    out[:4, 2] = box.cz - box.h / 2.0
    out[4:, 2] = box.cz + box.h / 2.0
    return out


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area of a polygon given as an (n, 2) vertex array."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _clip_by_halfplane(poly: list, a: np.ndarray, b: np.ndarray) -> list:
    # Keep the side to the left of the directed edge a->b (CCW interior).
    ex, ey = b[0] - a[0], b[1] - a[1]
    out = []
    n = len(poly)
    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        dp = ex * (p[1] - a[1]) - ey * (p[0] - a[0])
        dq = ex * (q[1] - a[1]) - ey * (q[0] - a[0])
        if dp >= 0.0:
            out.append(p)
        if (dp > 0.0) != (dq > 0.0) and dp != dq:
            t = dp / (dp - dq)
            out.append(p + t * (q - p))
    return out


def convex_intersection_area(pa: np.ndarray, pb: np.ndarray) -> float:
    """Intersection area of two convex polygons via Sutherland-Hodgman."""
    # Orient both CCW so the half-plane test is consistent.
    if polygon_area(pa) < 0:
        pa = pa[::-1]
    if polygon_area(pb) < 0:
        pb = pb[::-1]
    poly = [np.asarray(v, dtype=float) for v in pa]
    nb = len(pb)
    for i in range(nb):
        poly = _clip_by_halfplane(poly, pb[i], pb[(i + 1) % nb])
        if len(poly) < 3:
            return 0.0
    area = abs(polygon_area(np.asarray(poly)))
    return area if area > AREA_EPS else 0.0


def rotated_iou_bev(a: Box3D, b: Box3D) -> float:
    """IoU of the rotated box footprints in the ground plane."""
    inter = convex_intersection_area(bev_corners(a), bev_corners(b))
    if inter == 0.0:
        return 0.0
    area_a = a.l * a.w
    area_b = b.l * b.w
    inter = min(inter, area_a, area_b)
    return inter / (area_a + area_b - inter)


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Volumetric IoU: footprint intersection times vertical overlap."""
    inter_bev = convex_intersection_area(bev_corners(a), bev_corners(b))
    if inter_bev == 0.0:
        return 0.0
    zlo = max(a.cz - a.h / 2.0, b.cz - b.h / 2.0)
    zhi = min(a.cz + a.h / 2.0, b.cz + b.h / 2.0)
    dz = zhi - zlo
    if dz <= 0.0:
        return 0.0
    inter = min(inter_bev, a.l * a.w, b.l * b.w) * dz
    union = a.volume + b.volume - inter
    return inter / union


def bilinear_sample(grid: np.ndarray, u: float, v: float) -> float:
    """Sample a single-channel map at continuous (column=u, row=v).

    Uses the tent kernel max(1-|i-u|,0) * max(1-|j-v|,0) over the up-to-four
    integer neighbors; cells outside the map contribute zero.
    """
    if not (math.isfinite(u) and math.isfinite(v)):
        raise ValueError("sample coordinates must be finite")
    rows, cols = grid.shape
    c0 = math.floor(u)
    r0 = math.floor(v)
    total = 0.0
    for r in (r0, r0 + 1):
        wr = 1.0 - abs(r - v)
        if wr <= 0.0 or not (0 <= r < rows):
            continue
        for c in (c0, c0 + 1):
            wc = 1.0 - abs(c - u)
            if wc <= 0.0 or not (0 <= c < cols):
                continue
            total += float(grid[r, c]) * wr * wc
    return total


def bilinear_sample_many(grid: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Vectorized :func:`bilinear_sample` over coordinate arrays."""
    rows, cols = grid.shape
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    c0 = np.floor(u).astype(np.int64)
    r0 = np.floor(v).astype(np.int64)
    out = np.zeros(u.shape, dtype=float)
    for dr in (0, 1):
        r = r0 + dr
        wr = np.maximum(1.0 - np.abs(r - v), 0.0)
        rok = (r >= 0) & (r < rows)
        for dc in (0, 1):
            c = c0 + dc
            wc = np.maximum(1.0 - np.abs(c - u), 0.0)
            ok = rok & (c >= 0) & (c < cols)
            if not ok.any():
                continue
            vals = np.zeros_like(out)
            vals[ok] = grid[r[ok], c[ok]]
            out += vals * wr * wc
    return out
