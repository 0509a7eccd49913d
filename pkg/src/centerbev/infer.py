"""NMS-free decoding: keypoint-sampled confidences and 3x3 peak extraction.

Inference decodes a box at every feature cell, builds a per-class confidence
map by averaging bilinear heatmap samples at each box's center (from the
center heatmap) and four footprint corners (from the corner heatmap), then
keeps local maxima of that map. No IoU suppression anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geom import Box3D, bev_corners, bilinear_sample_many, wrap_angle
from .pointcloud import ParseError
from .voxelize import GridConfig

_EX = np.array([1.0, 1.0, -1.0, -1.0])
_EY = np.array([1.0, -1.0, -1.0, 1.0])


@dataclass(frozen=True)
class Detection:
    box: Box3D
    class_id: int
    confidence: float

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")


@dataclass(frozen=True)
class InferConfig:
    threshold: float = 0.1
    max_detections: int = 50

    def __post_init__(self):
        if not (0.0 <= self.threshold <= 1.0):
            raise ValueError(f"threshold must be in [0, 1], got {self.threshold}")
        if self.max_detections < 1:
            raise ValueError("max_detections must be >= 1")


@dataclass
class DecodeTelemetry:
    """Counters for silently dropped decodes (never exceptions)."""

    nonpositive_size: int = 0


def assemble_boxes(
    peaks,
    preds: dict[str, np.ndarray],
    grid: GridConfig,
    telemetry: DecodeTelemetry | None = None,
) -> list[tuple[Box3D, int]]:
    """Decode regression channels at the given (row, col, class) peaks.

    Planar center is the grid origin plus (cell + offset) scaled by the
    feature-cell size; yaw comes from atan2 over the direction channels.
    Cells decoding to a non-positive size are dropped and counted.
    """
    out: list[tuple[Box3D, int]] = []
    rows, cols = preds["offset"].shape[:2]
    for pr, pc, cid in peaks:
        if not (0 <= pr < rows and 0 <= pc < cols):
            raise ValueError(f"peak {(pr, pc)} outside the {rows}x{cols} map")
        dx, dy = preds["offset"][pr, pc]
        l, w, h = preds["size"][pr, pc]
        if l <= 0.0 or w <= 0.0 or h <= 0.0:
            if telemetry is not None:
                telemetry.nonpositive_size += 1
            continue
        co, si = preds["direction"][pr, pc]
        cx, cy = grid.world_coords(pr + dx, pc + dy)
        yaw = wrap_angle(math.atan2(si, co))
        out.append((Box3D(float(cx), float(cy), float(preds["z"][pr, pc, 0]), float(l), float(w), float(h), yaw), cid))
    return out


def kswarp(
    center_heat: np.ndarray,
    corner_heat: np.ndarray,
    boxes,
    grid: GridConfig,
    use_corners: bool = True,
) -> np.ndarray:
    """Keypoint-sampled confidence for decoded boxes.

    Per box: bilinear-sample its class's center heatmap at the projected box
    center and its class's corner heatmap at the four projected footprint
    corners; the confidence is the mean of the five samples. Keypoints off
    the map contribute zero. With ``use_corners`` off (no corner module),
    only the center sample is used.
    """
    if center_heat.shape != corner_heat.shape:
        raise ValueError("center and corner heatmaps must share a shape")
    n = len(boxes)
    if n == 0:
        return np.zeros(0)
    cx = np.array([b.cx for b, _ in boxes])
    cy = np.array([b.cy for b, _ in boxes])
    l = np.array([b.l for b, _ in boxes])
    w = np.array([b.w for b, _ in boxes])
    yaw = np.array([b.yaw for b, _ in boxes])
    cls = np.array([c for _, c in boxes], dtype=np.int64)

    co, si = np.cos(yaw), np.sin(yaw)
    corner_x = cx[:, None] + _EX * (l[:, None] / 2) * co[:, None] - _EY * (w[:, None] / 2) * si[:, None]
    corner_y = cy[:, None] + _EX * (l[:, None] / 2) * si[:, None] + _EY * (w[:, None] / 2) * co[:, None]

    fx, fy = grid.feature_coords(cx, cy)
    cfx, cfy = grid.feature_coords(corner_x, corner_y)

    conf = np.zeros(n)
    for c in np.unique(cls):
        m = cls == c
        center_s = bilinear_sample_many(center_heat[:, :, c], fy[m], fx[m])
        if use_corners:
            corner_s = bilinear_sample_many(corner_heat[:, :, c], cfy[m], cfx[m])
            conf[m] = (center_s + corner_s.sum(axis=1)) / 5.0
        else:
            conf[m] = center_s
    return conf


def peak_filter(conf: np.ndarray, cfg: InferConfig) -> list[tuple[int, int, int, float]]:
    """Keep cells that dominate their 8-neighborhood and clear the threshold.

    Border cells compare against existing neighbors only. Across all classes
    the top ``max_detections`` by confidence survive; ties break by
    (class, row, col) ascending so results are deterministic.
    """
    if conf.ndim == 2:
        conf = conf[:, :, None]
    rows, cols, n_cls = conf.shape
    found: list[tuple[float, int, int, int]] = []
    for c in range(n_cls):
        plane = conf[:, :, c]
        padded = np.full((rows + 2, cols + 2), -np.inf)
        padded[1:-1, 1:-1] = plane
        neigh = np.full((rows, cols), -np.inf)
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                if dr == 0 and dc == 0:
                    continue
                np.maximum(neigh, padded[1 + dr : rows + 1 + dr, 1 + dc : cols + 1 + dc], out=neigh)
        keep = (plane >= neigh) & (plane > cfg.threshold)
        for r, col in zip(*np.nonzero(keep)):
            found.append((float(plane[r, col]), c, int(r), int(col)))
    found.sort(key=lambda t: (-t[0], t[1], t[2], t[3]))
    return [(r, col, c, v) for v, c, r, col in found[: cfg.max_detections]]


def detect(
    center_heat: np.ndarray,
    corner_heat: np.ndarray,
    preds: dict[str, np.ndarray],
    grid: GridConfig,
    cfg: InferConfig,
    use_kswarp: bool = True,
    use_corners: bool = True,
    telemetry: DecodeTelemetry | None = None,
) -> list[Detection]:
    """Full decode pipeline for one frame.

    Boxes are decoded densely at every cell, the confidence map is built
    (keypoint sampling, or the raw center heatmap when ``use_kswarp`` is
    off), and peaks of that map become detections carrying their already
    decoded boxes.
    """
    rows, cols, n_cls = center_heat.shape
    if corner_heat.shape != center_heat.shape:
        raise ValueError("center and corner heatmaps must share a shape")

    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    fx = rr + preds["offset"][:, :, 0]
    fy = cc + preds["offset"][:, :, 1]
    cxw, cyw = grid.world_coords(fx, fy)
    l = preds["size"][:, :, 0]
    w = preds["size"][:, :, 1]
    h = preds["size"][:, :, 2]
    yaw = np.arctan2(preds["direction"][:, :, 1], preds["direction"][:, :, 0])
    valid = (l > 0.0) & (w > 0.0) & (h > 0.0)
    if telemetry is not None:
        telemetry.nonpositive_size += int((~valid).sum())

    if use_kswarp:
        co, si = np.cos(yaw), np.sin(yaw)
        corner_x = cxw[:, :, None] + _EX * (l[:, :, None] / 2) * co[:, :, None] \
            - _EY * (w[:, :, None] / 2) * si[:, :, None]
        corner_y = cyw[:, :, None] + _EX * (l[:, :, None] / 2) * si[:, :, None] \
            + _EY * (w[:, :, None] / 2) * co[:, :, None]
        cfx, cfy = grid.feature_coords(corner_x, corner_y)
        conf = np.zeros_like(center_heat)
        for c in range(n_cls):
            center_s = bilinear_sample_many(center_heat[:, :, c], fy, fx)
            if use_corners:
                corner_s = bilinear_sample_many(corner_heat[:, :, c], cfy, cfx)
                conf[:, :, c] = (center_s + corner_s.sum(axis=2)) / 5.0
            else:
                conf[:, :, c] = center_s
    else:
        conf = center_heat.copy()
    conf[~valid] = 0.0

    detections = []
    for pr, pc, cid, value in peak_filter(conf, cfg):
        box = Box3D(
            float(cxw[pr, pc]), float(cyw[pr, pc]), float(preds["z"][pr, pc, 0]),
            float(l[pr, pc]), float(w[pr, pc]), float(h[pr, pc]),
            wrap_angle(float(yaw[pr, pc])),
        )
        detections.append(Detection(box, cid, min(max(value, 0.0), 1.0)))
    return detections


# ---------------------------------------------------------------------------
# Detection files: native label format plus a confidence column
# ---------------------------------------------------------------------------


def format_detections(detections, class_names) -> str:
    lines = []
    for d in detections:
        b = d.box
        lines.append(
            f"{class_names[d.class_id]} {b.cx:.9g} {b.cy:.9g} {b.cz:.9g} "
            f"{b.l:.9g} {b.w:.9g} {b.h:.9g} {b.yaw:.9g} {d.confidence:.9g}"
        )
    return "\n".join(lines) + ("\n" if lines else "")


def parse_detections(text: str) -> tuple[list[Box3D], list[str], list[float]]:
    boxes, names, confs = [], [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        f = line.split()
        if len(f) != 9:
            raise ParseError(f"line {lineno}: expected 9 fields, got {len(f)}")
        vals = [float(t) for t in f[1:]]
        boxes.append(Box3D(*vals[:7]))
        names.append(f[0])
        confs.append(vals[7])
    return boxes, names, confs
