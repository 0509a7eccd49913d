"""Central finite-difference validation of every analytic gradient.

Probes are sampled away from the non-smooth points of each objective (the
|x| = 1 branch switch and the x = 0 kink of the balanced loss, exact-equality
residuals of the L1 terms), where the analytic derivative is well defined.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses as L
from . import nn
from .targets import TargetSet
from .voxelize import GridConfig

STEP = 1e-6
TOL = 1e-5


@dataclass
class CheckRow:
    name: str
    worst_rel_err: float
    tol: float = TOL

    @property
    def ok(self) -> bool:
        return self.worst_rel_err < self.tol


def relative_error(numeric: float, analytic: float) -> float:
    denom = max(abs(numeric), abs(analytic))
    if denom < 1e-10:
        return abs(numeric - analytic)
    return abs(numeric - analytic) / denom


def probe_gradient(value_fn, x: np.ndarray, analytic: np.ndarray,
                   rng: np.random.Generator, n_probes: int = 100,
                   indices=None) -> float:
    """Worst relative error between analytic grad entries and central FD."""
    flat = x.reshape(-1)
    ga = analytic.reshape(-1)
    if indices is None:
        indices = rng.choice(flat.size, size=min(n_probes, flat.size), replace=False)
    worst = 0.0
    for i in indices:
        orig = flat[i]
        flat[i] = orig + STEP
        fp = value_fn()
        flat[i] = orig - STEP
        fm = value_fn()
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * STEP)
        worst = max(worst, relative_error(numeric, float(ga[i])))
    return worst


def _safe_residuals(shape, rng):
    # residual magnitudes clear of 0 and of the balanced-loss branch point
    mag = np.where(rng.random(shape) < 0.5,
                   rng.uniform(0.10, 0.85, shape),
                   rng.uniform(1.15, 3.0, shape))
    return mag * rng.choice([-1.0, 1.0], size=shape)


def _positive_flat_indices(shape, cells):
    h, w, c = shape
    idx = []
    for r, col in cells:
        base = (r * w + col) * c
        idx.extend(range(base, base + c))
    return np.array(idx)


def check_focal(rng, n_probes=100) -> CheckRow:
    pred = rng.uniform(0.05, 0.95, size=(6, 7, 2))
    target = rng.uniform(0.0, 0.98, size=pred.shape)
    flat = target.reshape(-1)
    flat[rng.choice(flat.size, size=5, replace=False)] = 1.0
    n_pos = int((target == 1.0).sum())
    _, grad = L.focal_heatmap_loss(pred, target, n_pos=n_pos)
    worst = probe_gradient(
        lambda: L.focal_heatmap_loss(pred, target, n_pos=n_pos)[0],
        pred, grad, rng, n_probes,
    )
    return CheckRow("focal_heatmap_loss", worst)


def _masked_setup(rng, channels):
    shape = (8, 8, channels)
    target = rng.uniform(-2.0, 2.0, size=shape)
    pred = target + _safe_residuals(shape, rng)
    cells = [(int(r), int(c)) for r, c in zip(
        rng.choice(8, size=6, replace=True), rng.choice(8, size=6, replace=True))]
    cells = sorted(set(cells))
    return pred, target, cells


def check_masked_l1(rng, n_probes=100) -> CheckRow:
    pred, target, cells = _masked_setup(rng, 2)
    _, grad = L.masked_l1_loss(pred, target, cells, len(cells))
    idx = _positive_flat_indices(pred.shape, cells)
    worst = probe_gradient(
        lambda: L.masked_l1_loss(pred, target, cells, len(cells))[0],
        pred, grad, rng, n_probes, indices=idx,
    )
    return CheckRow("masked_l1_loss", worst)


def check_masked_balanced(rng, n_probes=100) -> CheckRow:
    cfg = L.LossConfig()
    pred, target, cells = _masked_setup(rng, 3)
    _, grad = L.masked_balanced_loss(pred, target, cells, len(cells), cfg)
    idx = _positive_flat_indices(pred.shape, cells)
    worst = probe_gradient(
        lambda: L.masked_balanced_loss(pred, target, cells, len(cells), cfg)[0],
        pred, grad, rng, n_probes, indices=idx,
    )
    return CheckRow("masked_balanced_loss", worst)


def _decode_setup(rng):
    grid = GridConfig(x_range=(0.0, 8.0), y_range=(0.0, 8.0), z_range=(-2.0, 2.0),
                      vx=0.5, vy=0.5, vz=0.5, stride=2)
    rows, cols = grid.feature_shape
    preds = {
        "offset": rng.uniform(0.1, 0.9, size=(rows, cols, 2)),
        "z": rng.uniform(-1.0, 1.0, size=(rows, cols, 1)),
        "size": rng.uniform(0.8, 2.5, size=(rows, cols, 3)),
        "direction": rng.uniform(-0.9, 0.9, size=(rows, cols, 2)),
    }
    positives = [(2, 3, 0), (5, 1, 0), (6, 6, 0)]
    gt = []
    for _ in positives:
        base = np.array([rng.uniform(1, 6), rng.uniform(1, 6), rng.uniform(-1, 1)])
        gt.append(base + rng.uniform(-1.5, 1.5, size=(8, 3)))
    return grid, preds, positives, gt


def check_decode(rng, n_probes=100) -> CheckRow:
    cfg = L.LossConfig()
    grid, preds, positives, gt = _decode_setup(rng)
    _, grads = L.decode_loss(preds, positives, gt, grid, len(positives), cfg)
    worst = 0.0
    per_map = max(n_probes // 4, 10)
    for key in ("offset", "z", "size", "direction"):
        idx = _positive_flat_indices(preds[key].shape, [(r, c) for r, c, _ in positives])
        idx = idx[:per_map] if len(idx) > per_map else idx
        worst = max(worst, probe_gradient(
            lambda: L.decode_loss(preds, positives, gt, grid, len(positives), cfg)[0],
            preds[key], grads[key], rng, per_map, indices=idx,
        ))
    return CheckRow("decode_loss", worst)


def check_conv2d(rng, n_probes=100) -> list[CheckRow]:
    x = rng.standard_normal((7, 6, 3))
    w = rng.standard_normal((3, 3, 3, 4)) * 0.5
    proj = rng.standard_normal((4, 3, 4))  # matches the stride-2 output shape

    def value():
        return float((nn.conv2d_forward(x, w, stride=2, padding=1) * proj).sum())

    grad_x, grad_w = nn.conv2d_backward(x, w, proj, stride=2, padding=1)
    wx = probe_gradient(value, x, grad_x, rng, n_probes)
    ww = probe_gradient(value, w, grad_w, rng, n_probes)
    return [CheckRow("conv2d_input", wx), CheckRow("conv2d_kernel", ww)]


def check_activations(rng, n_probes=100) -> list[CheckRow]:
    rows = []
    x = rng.standard_normal((9, 8, 3)) * 2.0
    proj = rng.standard_normal(x.shape)
    specs = [
        ("leaky_relu", nn.leaky_relu, lambda x_, g: nn.leaky_relu_backward(x_, g)),
        ("logistic", nn.logistic, lambda x_, g: nn.logistic_backward(nn.logistic(x_), g)),
        ("tanh", np.tanh, lambda x_, g: nn.tanh_backward(np.tanh(x_), g)),
    ]
    for name, fwd, bwd in specs:
        probe = x.copy()
        if name == "leaky_relu":
            probe[np.abs(probe) < 1e-3] = 0.5  # keep clear of the kink
        grad = bwd(probe, proj)
        worst = probe_gradient(
            lambda: float((fwd(probe) * proj).sum()), probe, grad, rng, n_probes
        )
        rows.append(CheckRow(name, worst))
    return rows


def run_all(seed: int = 0, n_probes: int = 100) -> list[CheckRow]:
    rng = np.random.default_rng(seed)
    rows = [
        check_focal(rng, n_probes),
        check_masked_l1(rng, n_probes),
        check_masked_balanced(rng, n_probes),
        check_decode(rng, n_probes),
    ]
    rows += check_conv2d(rng, n_probes)
    rows += check_activations(rng, n_probes)
    return rows


def format_table(rows: list[CheckRow]) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'operation'.ljust(width)}  worst_rel_err  tol      status"]
    for r in rows:
        lines.append(
            f"{r.name.ljust(width)}  {r.worst_rel_err:.3e}      {r.tol:.0e}  "
            + ("ok" if r.ok else "FAIL")
        )
    return "\n".join(lines)
