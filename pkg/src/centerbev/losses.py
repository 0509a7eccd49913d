"""Training objectives with analytic gradients w.r.t. the predicted maps.

All losses operate on *activated* predictions (the head applies logistic or
tanh where appropriate), so gradients here are plain calculus with no hidden
activation terms. Every gradient in this module is validated against central
finite differences in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .voxelize import GridConfig

TERM_NAMES = ("cls", "off", "z", "size", "dir", "cor", "decode")

# Corner sign pattern shared with geom.bev_corners (front-left, front-right,
# rear-right, rear-left), bottom four corners then top four.
_EX = np.array([1.0, 1.0, -1.0, -1.0] * 2)
_EY = np.array([1.0, -1.0, -1.0, 1.0] * 2)
_EZ = np.array([-1.0] * 4 + [1.0] * 4)


@dataclass(frozen=True)
class LossConfig:
    """Scalar hyperparameters of the full objective.

    ``b`` and ``c_b`` are derived, not free: ``b`` from a*ln(b+1) = gamma and
    ``c_b`` from continuity of the two balanced-L1 branches at |x| = 1.
    """

    alpha: float = 2.0
    beta: float = 4.0
    a: float = 0.5
    gamma: float = 1.5
    w_cls: float = 0.5
    w_off: float = 1.0
    w_z: float = 1.0
    w_size: float = 1.0
    w_dir: float = 1.0
    w_cor: float = 0.1
    w_decode: float = 0.5
    decode_corner_mean: bool = False
    clamp_eps: float = 1e-7

    @property
    def b(self) -> float:
        return math.exp(self.gamma / self.a) - 1.0

    @property
    def c_b(self) -> float:
        b = self.b
        return (self.a / b) * (b + 1.0) * math.log(b + 1.0) - self.a - self.gamma

    def weights(self) -> dict[str, float]:
        return {
            "cls": self.w_cls,
            "off": self.w_off,
            "z": self.w_z,
            "size": self.w_size,
            "dir": self.w_dir,
            "cor": self.w_cor,
            "decode": self.w_decode,
        }


@dataclass
class LossReport:
    """Per-term values plus d(total)/d(map) gradients, one per predicted map."""

    terms: dict[str, float]
    total: float
    grads: dict[str, np.ndarray]


def _check_shapes(pred: np.ndarray, target: np.ndarray) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")


def focal_heatmap_loss(
    pred: np.ndarray,
    target: np.ndarray,
    alpha: float = 2.0,
    beta: float = 4.0,
    n_pos: int | None = None,
    clamp_eps: float = 1e-7,
) -> tuple[float, np.ndarray]:
    """Penalty-reduced pixelwise focal loss over a heatmap.

    Cells where the target is exactly 1 are positives; everywhere else the
    penalty is down-weighted by (1 - target)^beta. Normalized by the positive
    count (clamped to 1 so empty frames stay finite).
    """
    _check_shapes(pred, target)
    p = np.clip(pred, clamp_eps, 1.0 - clamp_eps)
    pos = target == 1.0
    if n_pos is None:
        n_pos = int(pos.sum())
    n = max(n_pos, 1)

    log_p = np.log(p)
    log_1p = np.log1p(-p)
    one_m_p = 1.0 - p

    pos_term = one_m_p**alpha * log_p
    neg_w = (1.0 - target) ** beta
    neg_term = neg_w * p**alpha * log_1p
    value = -float(np.where(pos, pos_term, neg_term).sum()) / n

    d_pos = -alpha * one_m_p ** (alpha - 1.0) * log_p + one_m_p**alpha / p
    d_neg = neg_w * (alpha * p ** (alpha - 1.0) * log_1p - p**alpha / one_m_p)
    grad = -np.where(pos, d_pos, d_neg) / n
    return value, grad


def _gather(pred: np.ndarray, cells) -> np.ndarray:
    rows = np.fromiter((c[0] for c in cells), dtype=np.int64, count=len(cells))
    cols = np.fromiter((c[1] for c in cells), dtype=np.int64, count=len(cells))
    if len(cells) and (
        rows.min() < 0 or cols.min() < 0
        or rows.max() >= pred.shape[0] or cols.max() >= pred.shape[1]
    ):
        raise ValueError("positive cell outside the map")
    return rows, cols


def masked_l1_loss(
    pred: np.ndarray, target: np.ndarray, cells, n_pos: int
) -> tuple[float, np.ndarray]:
    """Mean absolute error over the positive cells only."""
    _check_shapes(pred, target)
    n = max(n_pos, 1)
    grad = np.zeros_like(pred)
    if not len(cells):
        return 0.0, grad
    rows, cols = _gather(pred, cells)
    res = pred[rows, cols] - target[rows, cols]
    value = float(np.abs(res).sum()) / n
    np.add.at(grad, (rows, cols), np.sign(res) / n)
    return value, grad


def balanced_l1(x, cfg: LossConfig | None = None):
    """Balanced L1: log-shaped inlier branch, linear outlier branch.

    Returns (value, derivative); both are arrays when ``x`` is an array. The
    derivative is odd in x and equals the linear slope gamma at |x| = 1 from
    both sides, by the defining constraint a*ln(b+1) = gamma.
    """
    cfg = cfg or LossConfig()
    a, b, gamma, c_b = cfg.a, cfg.b, cfg.gamma, cfg.c_b
    x = np.asarray(x, dtype=float)
    u = np.abs(x)
    inlier = u < 1.0
    bu1 = b * u + 1.0
    with np.errstate(over="ignore"):
        val = np.where(
            inlier,
            (a / b) * bu1 * np.log(bu1) - a * u,
            gamma * u + c_b,
        )
        dv = np.sign(x) * np.where(inlier, a * np.log(bu1), gamma)
    if val.ndim == 0:
        return float(val), float(dv)
    return val, dv


def masked_balanced_loss(
    pred: np.ndarray, target: np.ndarray, cells, n_pos: int, cfg: LossConfig
) -> tuple[float, np.ndarray]:
    """Balanced L1 over per-channel residuals at the positive cells."""
    _check_shapes(pred, target)
    n = max(n_pos, 1)
    grad = np.zeros_like(pred)
    if not len(cells):
        return 0.0, grad
    rows, cols = _gather(pred, cells)
    res = pred[rows, cols] - target[rows, cols]
    val, dv = balanced_l1(res, cfg)
    np.add.at(grad, (rows, cols), np.atleast_1d(dv) / n)
    return float(np.sum(val)) / n, grad


def decode_box_corners(
    cell: tuple[int, int],
    offset: np.ndarray,
    z: float,
    size: np.ndarray,
    direction: np.ndarray,
    grid: GridConfig,
) -> np.ndarray:
    """Decode one cell's regression channels into eight 3D corners.

    The rotation uses the raw (cos, sin) channels directly, so the decode is
    differentiable without atan2; matches geom.corners_3d corner order when
    the channels lie on the unit circle.
    """
    sx = grid.vx * grid.stride
    sy = grid.vy * grid.stride
    cx = grid.x_range[0] + (cell[0] + offset[0]) * sx
    cy = grid.y_range[0] + (cell[1] + offset[1]) * sy
    l, w, h = size
    co, si = direction
    out = np.empty((8, 3))
    out[:, 0] = cx + _EX * (l / 2.0) * co - _EY * (w / 2.0) * si
    out[:, 1] = cy + _EX * (l / 2.0) * si + _EY * (w / 2.0) * co
    out[:, 2] = z + _EZ * (h / 2.0)
    return out


def decode_loss(
    preds: dict[str, np.ndarray],
    positives,
    gt_corners,
    grid: GridConfig,
    n_pos: int,
    cfg: LossConfig,
) -> tuple[float, dict[str, np.ndarray]]:
    """Corner-space regression loss coupling all box channels.

    Each positive's channels are decoded to eight corners; balanced L1 of the
    per-corner Euclidean distance to the matching ground-truth corner is
    summed over corners and averaged over positives (per-corner averaging is
    available via ``cfg.decode_corner_mean``). Gradients flow analytically
    through the corner construction and the distance norm.
    """
    grads = {k: np.zeros_like(preds[k]) for k in ("offset", "z", "size", "direction")}
    n = max(n_pos, 1)
    if len(gt_corners) != len(positives):
        raise ValueError(
            f"{len(positives)} positives but {len(gt_corners)} ground-truth corner sets"
        )
    scale = 1.0 / (8.0 * n) if cfg.decode_corner_mean else 1.0 / n
    sx = grid.vx * grid.stride
    sy = grid.vy * grid.stride

    value = 0.0
    for (pr, pc, _cid), gt in zip(positives, gt_corners):
        off = preds["offset"][pr, pc]
        zc = preds["z"][pr, pc, 0]
        size = preds["size"][pr, pc]
        direction = preds["direction"][pr, pc]
        corners = decode_box_corners((pr, pc), off, zc, size, direction, grid)

        diff = corners - gt
        dist = np.linalg.norm(diff, axis=1)
        lb, dlb = balanced_l1(dist, cfg)
        value += float(lb.sum()) * scale

        safe = dist > 0.0
        g = np.zeros_like(diff)  # d(value)/d(corner coordinates)
        g[safe] = (dlb[safe] / dist[safe])[:, None] * diff[safe] * scale

        gx, gy, gz = g[:, 0], g[:, 1], g[:, 2]
        l, w, _h = size
        co, si = direction
        grads["offset"][pr, pc, 0] += gx.sum() * sx
        grads["offset"][pr, pc, 1] += gy.sum() * sy
        grads["z"][pr, pc, 0] += gz.sum()
        grads["size"][pr, pc, 0] += float(np.sum(gx * _EX * co + gy * _EX * si)) / 2.0
        grads["size"][pr, pc, 1] += float(np.sum(-gx * _EY * si + gy * _EY * co)) / 2.0
        grads["size"][pr, pc, 2] += float(np.sum(gz * _EZ)) / 2.0
        grads["direction"][pr, pc, 0] += float(np.sum(gx * _EX * l + gy * _EY * w)) / 2.0
        grads["direction"][pr, pc, 1] += float(np.sum(-gx * _EY * w + gy * _EX * l)) / 2.0
    return value, grads


def total_loss(terms: dict[str, float], cfg: LossConfig) -> float:
    """Weighted sum of the seven objective terms; all must be present."""
    missing = [k for k in TERM_NAMES if k not in terms]
    if missing:
        raise ValueError(f"missing loss terms: {missing}")
    w = cfg.weights()
    return sum(w[k] * terms[k] for k in TERM_NAMES)


def evaluate_objective(
    preds: dict[str, np.ndarray],
    tset,
    grid: GridConfig,
    cfg: LossConfig,
    corner_term: bool = True,
    decode_term: bool = True,
    size_loss: str = "balanced",
) -> LossReport:
    """Compute every term and the weighted gradients for one frame.

    ``tset`` is a targets.TargetSet. The gradient dict maps prediction names
    to d(total)/d(map); maps fed by several terms (the regression maps, which
    the decode term also touches) get the weighted sum.
    """
    cells = tset.positive_cells()
    n = tset.num_positives
    w = cfg.weights()

    terms: dict[str, float] = {}
    grads: dict[str, np.ndarray] = {}

    terms["cls"], g = focal_heatmap_loss(
        preds["center"], tset.center_heat, cfg.alpha, cfg.beta, n, cfg.clamp_eps
    )
    grads["center"] = w["cls"] * g

    if corner_term:
        terms["cor"], g = focal_heatmap_loss(
            preds["corner"], tset.corner_heat, cfg.alpha, cfg.beta, n, cfg.clamp_eps
        )
        grads["corner"] = w["cor"] * g
    else:
        terms["cor"] = 0.0
        if "corner" in preds:
            grads["corner"] = np.zeros_like(preds["corner"])

    terms["off"], g = masked_l1_loss(preds["offset"], tset.offset, cells, n)
    grads["offset"] = w["off"] * g
    terms["z"], g = masked_balanced_loss(preds["z"], tset.z, cells, n, cfg)
    grads["z"] = w["z"] * g
    if size_loss == "balanced":
        terms["size"], g = masked_balanced_loss(preds["size"], tset.size, cells, n, cfg)
    elif size_loss == "l1":
        terms["size"], g = masked_l1_loss(preds["size"], tset.size, cells, n)
    else:
        raise ValueError(f"unknown size loss kind {size_loss!r}")
    grads["size"] = w["size"] * g
    terms["dir"], g = masked_l1_loss(preds["direction"], tset.direction, cells, n)
    grads["direction"] = w["dir"] * g

    if decode_term:
        terms["decode"], dg = decode_loss(
            preds, tset.positives, tset.gt_corners, grid, n, cfg
        )
        for k, g in dg.items():
            grads[k] = grads[k] + w["decode"] * g
    else:
        terms["decode"] = 0.0

    return LossReport(terms=terms, total=total_loss(terms, cfg), grads=grads)
