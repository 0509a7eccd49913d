"""Point-cloud and label ingestion, synthetic labeled scenes, augmentation.

Synthetic scenes are the ground-truth oracle for the rest of the pipeline:
points are placed only on sensor-visible box surfaces (two vertical faces
plus the top), so box centers sit in empty space exactly as they do in real
LiDAR sweeps. Scene randomness comes from ``numpy.random.default_rng`` (PCG64)
so a (spec, seed) pair reproduces bit-identical scenes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geom import Box3D, bev_corners, convex_intersection_area, wrap_angle

RECORD_BYTES = 16  # four little-endian float32 per point


class ParseError(ValueError):
    pass


class PlacementError(RuntimeError):
    """Raised when a scene spec cannot be satisfied without box overlap."""


@dataclass(frozen=True)
class PointCloud:
    """Raw points as an (N, 4) float array of x, y, z, intensity."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        if not np.isfinite(pts).all():
            raise ValueError("point cloud contains non-finite values")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class LabeledScene:
    cloud: PointCloud
    boxes: tuple[Box3D, ...]
    classes: tuple[int, ...]

    def __post_init__(self):
        if len(self.boxes) != len(self.classes):
            raise ValueError(
                f"{len(self.boxes)} boxes but {len(self.classes)} class labels"
            )


def read_kitti_bin(data: bytes) -> PointCloud:
    """Parse a KITTI velodyne blob: packed (x, y, z, intensity) float32."""
    if len(data) % RECORD_BYTES != 0:
        offset = len(data) - len(data) % RECORD_BYTES
        raise ParseError(
            f"truncated point record at byte offset {offset} "
            f"(blob length {len(data)} is not a multiple of {RECORD_BYTES})"
        )
    pts = np.frombuffer(data, dtype="<f4").astype(np.float64).reshape(-1, 4)
    return PointCloud(pts)


def to_kitti_bin(cloud: PointCloud) -> bytes:
    return cloud.points.astype("<f4").tobytes(order="C")


def parse_labels(text: str) -> tuple[list[Box3D], list[str]]:
    """Parse the native label format: ``class cx cy cz l w h yaw`` per line.

    Blank lines and ``#`` comments are ignored. Yaw is wrapped on ingest.
    Returns boxes plus the class *names* read from the file; mapping names to
    integer ids is the caller's job.
    """
    boxes: list[Box3D] = []
    names: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 8:
            raise ParseError(f"line {lineno}: expected 8 fields, got {len(fields)}")
        try:
            vals = [float(t) for t in fields[1:]]
        except ValueError as e:
            raise ParseError(f"line {lineno}: non-numeric field: {e}") from e
        cx, cy, cz, l, w, h, yaw = vals
        if l <= 0 or w <= 0 or h <= 0:
            raise ParseError(f"line {lineno}: non-positive box size {l} {w} {h}")
        try:
            boxes.append(Box3D(cx, cy, cz, l, w, h, yaw))
        except ValueError as e:
            raise ParseError(f"line {lineno}: {e}") from e
        names.append(fields[0])
    return boxes, names


def format_labels(boxes, names) -> str:
    lines = [
        f"{n} {b.cx:.9g} {b.cy:.9g} {b.cz:.9g} {b.l:.9g} {b.w:.9g} {b.h:.9g} {b.yaw:.9g}"
        for b, n in zip(boxes, names, strict=True)
    ]
    return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# Synthetic labeled scenes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassSpec:
    name: str
    l_range: tuple[float, float] = (3.6, 4.6)
    w_range: tuple[float, float] = (1.6, 2.0)
    h_range: tuple[float, float] = (1.4, 1.8)


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of the synthetic scene generator.

    ``min_gap`` keeps footprints separated by at least that many meters so
    every pair of boxes has BEV IoU exactly zero and their feature-map
    positives never end up 8-adjacent at the default cell size.
    """

    classes: tuple[ClassSpec, ...] = (ClassSpec("car"),)
    boxes_range: tuple[int, int] = (2, 6)
    points_range: tuple[int, int] = (120, 260)
    clutter_density: float = 1.0  # ground points per square meter
    ground_z: float = -1.6
    min_gap: float = 1.0
    x_range: tuple[float, float] = (0.0, 70.0)
    y_range: tuple[float, float] = (-40.0, 40.0)
    jitter: float = 0.01
    max_tries: int = 200

    def class_names(self) -> list[str]:
        return [c.name for c in self.classes]


def _inflated_corners(box: Box3D, gap: float) -> np.ndarray:
    grown = replace(box, l=box.l + gap, w=box.w + gap)
    return bev_corners(grown)


def _visible_face_points(box: Box3D, n_pts: int, rng: np.random.Generator) -> np.ndarray:
    """Sample points on the two sensor-facing vertical faces plus the top."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s], [s, c]])
    center = np.array([box.cx, box.cy])
    norm = np.hypot(box.cx, box.cy)
    view = center / norm if norm > 1e-9 else np.array([1.0, 0.0])

    # Outward normals of the four vertical faces in world coordinates.
    normals = np.array([[c, s], [-c, -s], [-s, c], [s, -c]])  # +l, -l, +w, -w
    visibility = -(normals @ view)
    faces = list(np.argsort(visibility)[-2:])  # two most sensor-facing

    half = np.array([box.l / 2.0, box.w / 2.0])
    areas = [box.w * box.h, box.w * box.h, box.l * box.h, box.l * box.h]
    weights = np.array([areas[f] for f in faces] + [box.l * box.w])
    choice = rng.choice(len(weights), size=n_pts, p=weights / weights.sum())

    local = np.empty((n_pts, 3))
    for k in range(n_pts):
        if choice[k] < 2:
            f = faces[choice[k]]
            if f in (0, 1):  # +-l faces span w
                lx = half[0] if f == 0 else -half[0]
                local[k] = (lx, rng.uniform(-half[1], half[1]), rng.uniform(-box.h / 2, box.h / 2))
            else:  # +-w faces span l
                ly = half[1] if f == 2 else -half[1]
                local[k] = (rng.uniform(-half[0], half[0]), ly, rng.uniform(-box.h / 2, box.h / 2))
        else:  # top face
            local[k] = (
                rng.uniform(-half[0], half[0]),
                rng.uniform(-half[1], half[1]),
                box.h / 2,
            )
    world = np.empty((n_pts, 3))
    world[:, :2] = local[:, :2] @ rot.T + center
    world[:, 2] = local[:, 2] + box.cz
    return world


def synth_scene(spec: SceneSpec, seed: int) -> LabeledScene:
    """Generate a deterministic labeled scene from (spec, seed)."""
    rng = np.random.default_rng(seed)
    lo, hi = spec.boxes_range
    n_boxes = int(rng.integers(lo, hi + 1))

    boxes: list[Box3D] = []
    classes: list[int] = []
    corners_so_far: list[np.ndarray] = []
    tries = 0
    while len(boxes) < n_boxes:
        if tries >= spec.max_tries * max(n_boxes, 1):
            raise PlacementError(
                f"could not place {n_boxes} non-overlapping boxes after {tries} tries"
            )
        tries += 1
        cid = int(rng.integers(0, len(spec.classes)))
        cs = spec.classes[cid]
        l = rng.uniform(*cs.l_range)
        w = rng.uniform(*cs.w_range)
        h = rng.uniform(*cs.h_range)
        margin = math.hypot(l + spec.min_gap, w + spec.min_gap) / 2.0
        x0, x1 = spec.x_range[0] + margin, spec.x_range[1] - margin
        y0, y1 = spec.y_range[0] + margin, spec.y_range[1] - margin
        if x0 >= x1 or y0 >= y1:
            raise PlacementError(
                f"spatial range too small for a {l:.2f} x {w:.2f} box"
            )
        box = Box3D(
            rng.uniform(x0, x1),
            rng.uniform(y0, y1),
            spec.ground_z + h / 2.0,
            l,
            w,
            h,
            wrap_angle(rng.uniform(-math.pi, math.pi)),
        )
        grown = _inflated_corners(box, spec.min_gap)
        if any(convex_intersection_area(grown, other) > 0.0 for other in corners_so_far):
            continue
        boxes.append(box)
        classes.append(cid)
        corners_so_far.append(grown)

    chunks = []
    p_lo, p_hi = spec.points_range
    for box in boxes:
        n_pts = int(rng.integers(p_lo, p_hi + 1))
        if n_pts == 0:
            continue
        xyz = _visible_face_points(box, n_pts, rng)
        xyz += rng.uniform(-spec.jitter, spec.jitter, size=xyz.shape)
        intensity = rng.uniform(0.0, 1.0, size=(n_pts, 1))
        chunks.append(np.hstack([xyz, intensity]))

    area = (spec.x_range[1] - spec.x_range[0]) * (spec.y_range[1] - spec.y_range[0])
    n_clutter = int(rng.poisson(spec.clutter_density * area))
    if n_clutter > 0:
        gx = rng.uniform(spec.x_range[0], spec.x_range[1], size=n_clutter)
        gy = rng.uniform(spec.y_range[0], spec.y_range[1], size=n_clutter)
        gz = spec.ground_z + rng.uniform(-spec.jitter, spec.jitter, size=n_clutter)
        gi = rng.uniform(0.0, 1.0, size=n_clutter)
        chunks.append(np.column_stack([gx, gy, gz, gi]))

    pts = np.vstack(chunks) if chunks else np.zeros((0, 4))
    return LabeledScene(PointCloud(pts), tuple(boxes), tuple(classes))


def augment_global(
    scene: LabeledScene, flip: bool = False, rotation: float = 0.0, scale: float = 1.0
) -> LabeledScene:
    """Apply a global flip / rotation / scaling to points and boxes alike.

    Order of application is flip, then rotation about z, then scaling. The
    flip mirrors y and negates yaw; scaling multiplies coordinates and sizes.
    """
    if scale <= 0.0:
        raise ValueError(f"scale must be positive, got {scale}")
    pts = scene.cloud.points.copy()
    if flip:
        pts[:, 1] = -pts[:, 1]
    c, s = math.cos(rotation), math.sin(rotation)
    x, y = pts[:, 0].copy(), pts[:, 1].copy()
    pts[:, 0] = c * x - s * y
    pts[:, 1] = s * x + c * y
    pts[:, :3] *= scale

    new_boxes = []
    for b in scene.boxes:
        cy = -b.cy if flip else b.cy
        yaw = -b.yaw if flip else b.yaw
        cx, cy = c * b.cx - s * cy, s * b.cx + c * cy
        new_boxes.append(
            Box3D(
                cx * scale,
                cy * scale,
                b.cz * scale,
                b.l * scale,
                b.w * scale,
                b.h * scale,
                wrap_angle(yaw + rotation),
            )
        )
    return LabeledScene(PointCloud(pts), tuple(new_boxes), scene.classes)


# ---------------------------------------------------------------------------
# Scene spec files (flat key-value)
# ---------------------------------------------------------------------------

_SCALAR_KEYS = {
    "boxes": 2,
    "points_per_box": 2,
    "clutter_density": 1,
    "ground_z": 1,
    "min_gap": 1,
    "x_range": 2,
    "y_range": 2,
}
_CLASS_KEYS = {"length", "width", "height"}


def parse_scene_spec(text: str) -> SceneSpec:
    """Parse a flat key-value scene spec file; unknown keys are rejected."""
    scalars: dict[str, list[float]] = {}
    class_order: list[str] = []
    class_ranges: dict[str, dict[str, tuple[float, float]]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *rest = line.split()
        if key == "classes":
            if not rest:
                raise ParseError(f"line {lineno}: 'classes' needs at least one name")
            class_order = rest
            for name in rest:
                class_ranges.setdefault(name, {})
            continue
        if key in _SCALAR_KEYS:
            if len(rest) != _SCALAR_KEYS[key]:
                raise ParseError(
                    f"line {lineno}: '{key}' expects {_SCALAR_KEYS[key]} value(s)"
                )
            try:
                scalars[key] = [float(t) for t in rest]
            except ValueError as e:
                raise ParseError(f"line {lineno}: {e}") from e
            continue
        if "." in key:
            cname, attr = key.split(".", 1)
            if attr in _CLASS_KEYS and cname in class_ranges:
                if len(rest) != 2:
                    raise ParseError(f"line {lineno}: '{key}' expects 2 values")
                class_ranges[cname][attr] = (float(rest[0]), float(rest[1]))
                continue
        raise ParseError(f"line {lineno}: unknown scene spec key '{key}'")

    base = SceneSpec()
    classes = []
    for name in class_order or [c.name for c in base.classes]:
        ranges = class_ranges.get(name, {})
        proto = ClassSpec(name)
        classes.append(
            ClassSpec(
                name,
                ranges.get("length", proto.l_range),
                ranges.get("width", proto.w_range),
                ranges.get("height", proto.h_range),
            )
        )

    def pair(key, default):
        v = scalars.get(key)
        return (v[0], v[1]) if v else default

    return SceneSpec(
        classes=tuple(classes),
        boxes_range=tuple(int(v) for v in scalars.get("boxes", base.boxes_range)),
        points_range=tuple(int(v) for v in scalars.get("points_per_box", base.points_range)),
        clutter_density=scalars.get("clutter_density", [base.clutter_density])[0],
        ground_z=scalars.get("ground_z", [base.ground_z])[0],
        min_gap=scalars.get("min_gap", [base.min_gap])[0],
        x_range=pair("x_range", base.x_range),
        y_range=pair("y_range", base.y_range),
    )


# ---------------------------------------------------------------------------
# Optional KITTI camera-frame ingestion
# ---------------------------------------------------------------------------


def read_kitti_calib(text: str) -> dict[str, np.ndarray]:
    """Parse a KITTI calib file into 4x4 homogeneous matrices."""
    mats: dict[str, np.ndarray] = {}
    for raw in text.splitlines():
        if ":" not in raw:
            continue
        key, vals = raw.split(":", 1)
        key = key.strip()
        nums = [float(t) for t in vals.split()]
        m = np.eye(4)
        if len(nums) == 12:
            m[:3, :4] = np.array(nums).reshape(3, 4)
        elif len(nums) == 9:
            m[:3, :3] = np.array(nums).reshape(3, 3)
        else:
            continue
        mats[key] = m
    return mats


def kitti_camera_labels_to_lidar(
    text: str, calib: dict[str, np.ndarray]
) -> tuple[list[Box3D], list[str]]:
    """Convert KITTI camera-frame labels to LiDAR-frame boxes.

    KITTI stores the box bottom-center in the rectified camera frame (x right,
    y down, z forward) with sizes (h, w, l) and rotation ``ry`` about camera y.
    """
    rect = calib["R0_rect"]
    velo_to_cam = calib["Tr_velo_to_cam"]
    cam_to_velo = np.linalg.inv(rect @ velo_to_cam)

    boxes: list[Box3D] = []
    names: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        f = line.split()
        if len(f) < 15:
            raise ParseError(f"line {lineno}: expected >= 15 fields, got {len(f)}")
        name = f[0]
        if name == "DontCare":
            continue
        h, w, l = (float(t) for t in f[8:11])
        x, y, z = (float(t) for t in f[11:14])
        ry = float(f[14])
        center_cam = np.array([x, y - h / 2.0, z, 1.0])
        cx, cy, cz, _ = cam_to_velo @ center_cam
        yaw = wrap_angle(-ry - math.pi / 2.0)
        boxes.append(Box3D(cx, cy, cz, l, w, h, yaw))
        names.append(name)
    return boxes, names
