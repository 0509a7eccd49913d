"""Minimal dense NN kernel: conv2d with backprop, activations, heads, AdamW.

Everything runs on plain numpy arrays shaped (rows, cols, channels) in double
precision. Backward passes are written by hand and checked against central
finite differences in the test suite; there is no autograd.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field

import numpy as np

LEAKY_SLOPE = 0.1


class Param:
    """A named trainable array with an accumulated gradient."""

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


# ---------------------------------------------------------------------------
# Functional ops
# ---------------------------------------------------------------------------


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlate (H, W, Cin) input with a (k, k, Cin, Cout) kernel."""
    h, wd, cin = x.shape
    k = w.shape[0]
    if w.shape[:3] != (k, k, cin):
        raise ValueError(f"kernel {w.shape} incompatible with input {x.shape}")
    cout = w.shape[3]
    hp, wp = h + 2 * padding, wd + 2 * padding
    h_out = (hp - k) // stride + 1
    w_out = (wp - k) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ValueError(f"kernel {k} too large for padded input ({hp}, {wp})")
    xp = np.pad(x, ((padding, padding), (padding, padding), (0, 0))) if padding else x
    out = np.zeros((h_out, w_out, cout))
    for ki in range(k):
        for kj in range(k):
            xs = xp[ki : ki + stride * h_out : stride, kj : kj + stride * w_out : stride, :]
            out += xs @ w[ki, kj]
    return out


def conv2d_backward(
    x: np.ndarray, w: np.ndarray, grad_out: np.ndarray, stride: int = 1, padding: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of conv2d_forward w.r.t. input and kernel."""
    h, wd, _cin = x.shape
    k = w.shape[0]
    h_out, w_out, _cout = grad_out.shape
    xp = np.pad(x, ((padding, padding), (padding, padding), (0, 0))) if padding else x
    grad_xp = np.zeros_like(xp)
    grad_w = np.zeros_like(w)
    for ki in range(k):
        for kj in range(k):
            sl = (
                slice(ki, ki + stride * h_out, stride),
                slice(kj, kj + stride * w_out, stride),
            )
            grad_w[ki, kj] = np.tensordot(xp[sl], grad_out, axes=([0, 1], [0, 1]))
            grad_xp[sl] += grad_out @ w[ki, kj].T
    if padding:
        return grad_xp[padding : padding + h, padding : padding + wd, :], grad_w
    return grad_xp, grad_w


def leaky_relu(x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(x >= 0.0, x, slope * x)


def leaky_relu_backward(x: np.ndarray, grad_out: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return grad_out * np.where(x >= 0.0, 1.0, slope)


def logistic(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logistic_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * y * (1.0 - y)


def tanh_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (1.0 - y * y)


def maxpool2d_3x3_same(x: np.ndarray) -> np.ndarray:
    """3x3 max pool, stride 1, same size; borders use existing cells only."""
    if x.ndim != 2:
        raise ValueError(f"expected a single-channel plane, got shape {x.shape}")
    rows, cols = x.shape
    padded = np.full((rows + 2, cols + 2), -np.inf)
    padded[1:-1, 1:-1] = x
    out = np.full((rows, cols), -np.inf)
    for dr in (0, 1, 2):
        for dc in (0, 1, 2):
            np.maximum(out, padded[dr : dr + rows, dc : dc + cols], out=out)
    return out


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class Conv2D:
    """Convolution layer with bias; kernels drawn from a uniform fan-in rule."""

    def __init__(
        self,
        name: str,
        k: int,
        cin: int,
        cout: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        bias_init: float | np.ndarray = 0.0,
    ):
        lim = 1.0 / math.sqrt(k * k * cin)
        self.w = Param(f"{name}.w", rng.uniform(-lim, lim, size=(k, k, cin, cout)))
        bias = np.full(cout, 0.0) + np.asarray(bias_init, dtype=np.float64)
        self.b = Param(f"{name}.b", bias)
        self.stride = stride
        self.padding = padding
        self._x: np.ndarray | None = None

    def params(self) -> list[Param]:
        return [self.w, self.b]

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return conv2d_forward(x, self.w.value, self.stride, self.padding) + self.b.value

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        grad_x, grad_w = conv2d_backward(self._x, self.w.value, grad_out, self.stride, self.padding)
        self.w.grad += grad_w
        self.b.grad += grad_out.sum(axis=(0, 1))
        return grad_x


class LeakyReLU:
    def __init__(self, slope: float = LEAKY_SLOPE):
        self.slope = slope
        self._x = None

    def params(self):
        return []

    def forward(self, x):
        self._x = x
        return leaky_relu(x, self.slope)

    def backward(self, grad_out):
        return leaky_relu_backward(self._x, grad_out, self.slope)


class Logistic:
    def __init__(self):
        self._y = None

    def params(self):
        return []

    def forward(self, x):
        self._y = logistic(x)
        return self._y

    def backward(self, grad_out):
        return logistic_backward(self._y, grad_out)


class Tanh:
    def __init__(self):
        self._y = None

    def params(self):
        return []

    def forward(self, x):
        self._y = np.tanh(x)
        return self._y

    def backward(self, grad_out):
        return tanh_backward(self._y, grad_out)


class ChannelActivation:
    """Different activation per channel slice (used by the merged box branch)."""

    def __init__(self, spans: list[tuple[int, int, str]]):
        self.spans = spans
        self._y = None

    def params(self):
        return []

    def forward(self, x):
        y = x.copy()
        for lo, hi, kind in self.spans:
            if kind == "logistic":
                y[:, :, lo:hi] = logistic(x[:, :, lo:hi])
            elif kind == "tanh":
                y[:, :, lo:hi] = np.tanh(x[:, :, lo:hi])
            elif kind != "none":
                raise ValueError(f"unknown activation {kind!r}")
        self._y = y
        return y

    def backward(self, grad_out):
        grad = grad_out.copy()
        for lo, hi, kind in self.spans:
            ys = self._y[:, :, lo:hi]
            if kind == "logistic":
                grad[:, :, lo:hi] = grad_out[:, :, lo:hi] * ys * (1.0 - ys)
            elif kind == "tanh":
                grad[:, :, lo:hi] = grad_out[:, :, lo:hi] * (1.0 - ys * ys)
        return grad


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)

    def params(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out


# ---------------------------------------------------------------------------
# Detection heads
# ---------------------------------------------------------------------------

HEATMAP_BIAS_PRIOR = 0.01  # initial heatmaps start near-empty


@dataclass(frozen=True)
class HeadSpec:
    """Structure of the detection head.

    ``variant`` selects between one branch per regression target ("split")
    and a single 8-channel box branch ("merge"). ``z_bias`` / ``size_bias``
    seed the final regression biases with dataset-typical values so the
    unbounded targets start near their scale.
    """

    variant: str = "split"
    in_channels: int = 32
    hidden: int = 64
    num_classes: int = 1
    with_corner: bool = True
    z_bias: float = 0.0
    size_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.variant not in ("split", "merge"):
            raise ValueError(f"unknown head variant {self.variant!r}")
        if self.num_classes < 1 or self.hidden < 1 or self.in_channels < 1:
            raise ValueError("channel counts must be positive")


def _branch(name, spec, out_ch, activation, rng, bias_init=0.0):
    return Sequential([
        Conv2D(f"{name}.0", 3, spec.in_channels, spec.hidden, rng, padding=1),
        LeakyReLU(),
        Conv2D(f"{name}.1", 1, spec.hidden, out_ch, rng, bias_init=bias_init),
        *([activation] if activation is not None else []),
    ])


class Head:
    """Per-branch 3x3 conv -> leaky relu -> 1x1 conv -> branch activation."""

    def __init__(self, spec: HeadSpec, rng: np.random.Generator):
        self.spec = spec
        c = spec.num_classes
        heat_bias = math.log(HEATMAP_BIAS_PRIOR / (1.0 - HEATMAP_BIAS_PRIOR))
        branches: dict[str, Sequential] = {}
        branches["center"] = _branch("head.center", spec, c, Logistic(), rng, heat_bias)
        if spec.variant == "split":
            branches["offset"] = _branch("head.offset", spec, 2, Logistic(), rng)
            branches["z"] = _branch("head.z", spec, 1, None, rng, spec.z_bias)
            branches["size"] = _branch("head.size", spec, 3, None, rng, np.asarray(spec.size_bias))
            branches["direction"] = _branch("head.direction", spec, 2, Tanh(), rng)
        else:
            box_bias = np.array([0.0, 0.0, spec.z_bias, *spec.size_bias, 0.0, 0.0])
            branches["box"] = _branch(
                "head.box", spec, 8,
                ChannelActivation([(0, 2, "logistic"), (2, 6, "none"), (6, 8, "tanh")]),
                rng, box_bias,
            )
        if spec.with_corner:
            branches["corner"] = _branch("head.corner", spec, c, Logistic(), rng, heat_bias)
        self.branches = branches

    def params(self) -> list[Param]:
        return [p for br in self.branches.values() for p in br.params()]

    def forward(self, feat: np.ndarray) -> dict[str, np.ndarray]:
        """Run every branch; returns canonical map names regardless of variant."""
        raw = {name: br.forward(feat) for name, br in self.branches.items()}
        if self.spec.variant == "merge":
            box = raw.pop("box")
            raw["offset"] = box[:, :, 0:2]
            raw["z"] = box[:, :, 2:3]
            raw["size"] = box[:, :, 3:6]
            raw["direction"] = box[:, :, 6:8]
        return raw

    def backward(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        """Backpropagate canonical-map gradients; returns d(loss)/d(features)."""
        if self.spec.variant == "merge":
            box_grad = np.concatenate(
                [grads[k] for k in ("offset", "z", "size", "direction")], axis=2
            )
            grads = {k: v for k, v in grads.items() if k in ("center", "corner")}
            grads["box"] = box_grad
        dfeat = None
        for name, br in self.branches.items():
            if name not in grads:
                continue
            g = br.backward(grads[name])
            dfeat = g if dfeat is None else dfeat + g
        return dfeat


def build_head(spec: HeadSpec, rng: np.random.Generator | None = None) -> Head:
    return Head(spec, rng or np.random.default_rng(0))


def build_backbone(
    in_channels: int, channels: int, stride: int, rng: np.random.Generator
) -> Sequential:
    """Stacked stride-2 conv blocks realizing the voxel-to-feature stride.

    With stride 4 this is two 3x3/s2 blocks over the full-resolution BEV
    plane, a small stand-in for a deep 3D feature extractor.
    """
    n = int(round(math.log2(stride))) if stride > 1 else 0
    if 2**n != stride:
        raise ValueError(f"backbone stride must be a power of two, got {stride}")
    layers = []
    cin = in_channels
    for i in range(max(n, 1)):
        s = 2 if i < n else 1
        layers += [Conv2D(f"backbone.{i}", 3, cin, channels, rng, stride=s, padding=1), LeakyReLU()]
        cin = channels
    return Sequential(layers)


class DetectionModel:
    """Backbone plus head, end to end over a BEV feature plane."""

    def __init__(self, head_spec: HeadSpec, bev_channels: int, backbone_channels: int,
                 stride: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.backbone = build_backbone(bev_channels, backbone_channels, stride, rng)
        # the head consumes whatever width the backbone emits
        spec = dataclasses.replace(head_spec, in_channels=backbone_channels)
        self.head = Head(spec, rng)

    def params(self) -> list[Param]:
        return self.backbone.params() + self.head.params()

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def forward(self, bev: np.ndarray) -> dict[str, np.ndarray]:
        return self.head.forward(self.backbone.forward(bev))

    def backward(self, grads: dict[str, np.ndarray]) -> None:
        self.backbone.backward(self.head.backward(grads))


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    params: list[Param],
    state: OptimState,
    lr: float,
    weight_decay: float = 0.01,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One update with decoupled weight decay (decay applies even at zero grad)."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for p in params:
        m = state.m.setdefault(p.name, np.zeros_like(p.value))
        v = state.v.setdefault(p.name, np.zeros_like(p.value))
        m *= beta1
        m += (1.0 - beta1) * p.grad
        v *= beta2
        v += (1.0 - beta2) * p.grad * p.grad
        p.value -= lr * weight_decay * p.value
        p.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


@dataclass(frozen=True)
class ScheduleConfig:
    """One-cycle policy: warm cosine rise, long cosine anneal, momentum in
    antiphase between its two bounds."""

    total_steps: int
    max_lr: float = 2.25e-3
    div_factor: float = 10.0
    final_div: float = 1e4
    momentum_max: float = 0.95
    momentum_min: float = 0.85
    warm_frac: float = 0.3

    def __post_init__(self):
        if not (0.0 < self.warm_frac < 1.0):
            raise ValueError(f"warm_frac must be in (0, 1), got {self.warm_frac}")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


def one_cycle(step: int, cfg: ScheduleConfig) -> tuple[float, float]:
    """Learning rate and momentum (beta1) at an integer step in [0, total]."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    warm = cfg.warm_frac * cfg.total_steps
    lr_start = cfg.max_lr / cfg.div_factor
    lr_final = cfg.max_lr / (cfg.div_factor * cfg.final_div)
    if step <= warm:
        s = step / warm
        lr = lr_start + (cfg.max_lr - lr_start) * 0.5 * (1.0 - math.cos(math.pi * s))
        mom = cfg.momentum_max + (cfg.momentum_min - cfg.momentum_max) * 0.5 * (1.0 - math.cos(math.pi * s))
    else:
        s = (step - warm) / (cfg.total_steps - warm)
        lr = cfg.max_lr + (lr_final - cfg.max_lr) * 0.5 * (1.0 - math.cos(math.pi * s))
        mom = cfg.momentum_min + (cfg.momentum_max - cfg.momentum_min) * 0.5 * (1.0 - math.cos(math.pi * s))
    return lr, mom


# ---------------------------------------------------------------------------
# Checkpoints: text manifest plus one flat float32 payload per parameter
# ---------------------------------------------------------------------------


def save_checkpoint(params: list[Param], directory: str | os.PathLike) -> None:
    os.makedirs(directory, exist_ok=True)
    lines = []
    for p in params:
        dims = " ".join(str(d) for d in p.value.shape)
        lines.append(f"{p.name} {len(p.value.shape)} {dims}")
        with open(os.path.join(directory, p.name + ".f32"), "wb") as f:
            f.write(p.value.astype("<f4").tobytes(order="C"))
    with open(os.path.join(directory, "manifest.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")


def load_checkpoint(directory: str | os.PathLike) -> dict[str, np.ndarray]:
    path = os.path.join(directory, "manifest.txt")
    out: dict[str, np.ndarray] = {}
    with open(path) as f:
        for raw in f:
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            name, ndim = parts[0], int(parts[1])
            shape = tuple(int(d) for d in parts[2 : 2 + ndim])
            with open(os.path.join(directory, name + ".f32"), "rb") as pf:
                data = np.frombuffer(pf.read(), dtype="<f4")
            if data.size != int(np.prod(shape)):
                raise ValueError(f"{name}: payload size {data.size} != shape {shape}")
            out[name] = data.astype(np.float64).reshape(shape)
    return out


def restore_params(params: list[Param], state: dict[str, np.ndarray]) -> None:
    for p in params:
        if p.name not in state:
            raise ValueError(f"checkpoint is missing parameter {p.name}")
        if state[p.name].shape != p.value.shape:
            raise ValueError(
                f"{p.name}: checkpoint shape {state[p.name].shape} != model {p.value.shape}"
            )
        p.value = state[p.name].copy()
