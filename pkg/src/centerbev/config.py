"""Flat key-value run configuration with file and command-line overrides.

Precedence is CLI > config file > built-in defaults. Unknown keys are
rejected so typos fail loudly. Defaults describe a desk-scale setup: a
40 m x 40 m crop at 0.25 m voxels, one car-like class, and a few hundred
optimizer steps.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

from .evalkit import EvalConfig
from .infer import InferConfig
from .losses import LossConfig
from .nn import HeadSpec, ScheduleConfig
from .pointcloud import ClassSpec, SceneSpec
from .targets import EncoderConfig
from .voxelize import GridConfig


def _bool(s: str) -> bool:
    t = s.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


# key -> (converter, default). Values are stored converted.
SCHEMA: dict[str, tuple] = {
    "seed": (int, 0),
    "classes": (str, "car"),
    "head": (str, "split"),
    "hidden": (int, 64),
    "backbone_channels": (int, 32),
    "grid.x_min": (float, 0.0),
    "grid.x_max": (float, 40.0),
    "grid.y_min": (float, -20.0),
    "grid.y_max": (float, 20.0),
    "grid.z_min": (float, -3.0),
    "grid.z_max": (float, 1.0),
    "grid.vx": (float, 0.25),
    "grid.vy": (float, 0.25),
    "grid.vz": (float, 0.5),
    "grid.stride": (int, 4),
    "encoder.min_overlap": (float, 0.01),
    "loss.alpha": (float, 2.0),
    "loss.beta": (float, 4.0),
    "loss.a": (float, 0.5),
    "loss.gamma": (float, 1.5),
    "loss.w_cls": (float, 0.5),
    "loss.w_off": (float, 1.0),
    "loss.w_z": (float, 1.0),
    "loss.w_size": (float, 1.0),
    "loss.w_dir": (float, 1.0),
    "loss.w_cor": (float, 0.1),
    "loss.w_decode": (float, 0.5),
    "loss.decode_corner_mean": (_bool, False),
    "infer.threshold": (float, 0.1),
    "infer.max_detections": (int, 50),
    "eval.iou_mode": (str, "bev"),
    "eval.default_iou": (float, 0.5),
    "eval.recall_positions": (int, 40),
    "schedule.max_lr": (float, 2.25e-3),
    "schedule.div_factor": (float, 10.0),
    "schedule.final_div": (float, 1e4),
    "schedule.momentum_max": (float, 0.95),
    "schedule.momentum_min": (float, 0.85),
    "schedule.warm_frac": (float, 0.3),
    "train.scenes": (int, 64),
    "train.val_scenes": (int, 16),
    "train.steps": (int, 400),
    "train.weight_decay": (float, 0.01),
    "head.z_bias": (float, -0.8),
    "head.size_bias_l": (float, 4.1),
    "head.size_bias_w": (float, 1.8),
    "head.size_bias_h": (float, 1.6),
    "scene.boxes_min": (int, 2),
    "scene.boxes_max": (int, 5),
    "scene.points_min": (int, 120),
    "scene.points_max": (int, 260),
    "scene.clutter_density": (float, 1.0),
    "scene.ground_z": (float, -1.6),
    "scene.min_gap": (float, 1.0),
    "toggle.corner_module": (_bool, True),
    "toggle.kswarp": (_bool, True),
    "toggle.decode_loss": (_bool, True),
    "toggle.size_loss": (str, "balanced"),
    "toggle.direction_loss": (str, "sincos"),
}

_DYNAMIC_PREFIXES = ("eval.iou.",)  # per-class IoU thresholds

# Built-in size ranges by class name; anything else gets car-like extents.
CLASS_SIZE_RANGES = {
    "car": ((3.6, 4.6), (1.6, 2.0), (1.4, 1.8)),
    "pedestrian": ((0.5, 0.9), (0.5, 0.9), (1.5, 1.9)),
}


class ConfigError(ValueError):
    pass


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split(None, 1)
        if len(parts) != 2:
            raise ConfigError(f"line {lineno}: expected 'key value', got {line!r}")
        out[parts[0]] = parts[1].strip()
    return out


def _convert(key: str, raw: str):
    if key in SCHEMA:
        conv = SCHEMA[key][0]
    elif any(key.startswith(p) for p in _DYNAMIC_PREFIXES):
        conv = float
    else:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return conv(raw)
    except ValueError as e:
        raise ConfigError(f"bad value for {key!r}: {e}") from e


@dataclass
class RunConfig:
    """Typed view over the merged key-value configuration."""

    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def class_names(self) -> list[str]:
        return [t for t in self.values["classes"].replace(",", " ").split() if t]

    def grid(self) -> GridConfig:
        v = self.values
        return GridConfig(
            x_range=(v["grid.x_min"], v["grid.x_max"]),
            y_range=(v["grid.y_min"], v["grid.y_max"]),
            z_range=(v["grid.z_min"], v["grid.z_max"]),
            vx=v["grid.vx"], vy=v["grid.vy"], vz=v["grid.vz"],
            stride=v["grid.stride"],
        )

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(
            grid=self.grid(),
            num_classes=len(self.class_names),
            min_overlap=self.values["encoder.min_overlap"],
        )

    def loss(self) -> LossConfig:
        v = self.values
        return LossConfig(
            alpha=v["loss.alpha"], beta=v["loss.beta"],
            a=v["loss.a"], gamma=v["loss.gamma"],
            w_cls=v["loss.w_cls"], w_off=v["loss.w_off"], w_z=v["loss.w_z"],
            w_size=v["loss.w_size"], w_dir=v["loss.w_dir"], w_cor=v["loss.w_cor"],
            w_decode=v["loss.w_decode"],
            decode_corner_mean=v["loss.decode_corner_mean"],
        )

    def infer(self) -> InferConfig:
        return InferConfig(
            threshold=self.values["infer.threshold"],
            max_detections=self.values["infer.max_detections"],
        )

    def eval(self, iou_mode: str | None = None) -> EvalConfig:
        v = self.values
        per_class = {
            key[len("eval.iou."):]: val
            for key, val in v.items()
            if key.startswith("eval.iou.")
        }
        return EvalConfig(
            iou_mode=iou_mode or v["eval.iou_mode"],
            default_threshold=v["eval.default_iou"],
            thresholds=per_class,
            recall_positions=v["eval.recall_positions"],
        )

    def schedule(self, total_steps: int | None = None) -> ScheduleConfig:
        v = self.values
        return ScheduleConfig(
            total_steps=total_steps if total_steps is not None else v["train.steps"],
            max_lr=v["schedule.max_lr"],
            div_factor=v["schedule.div_factor"],
            final_div=v["schedule.final_div"],
            momentum_max=v["schedule.momentum_max"],
            momentum_min=v["schedule.momentum_min"],
            warm_frac=v["schedule.warm_frac"],
        )

    def head_spec(self) -> HeadSpec:
        v = self.values
        return HeadSpec(
            variant=v["head"],
            in_channels=v["backbone_channels"],
            hidden=v["hidden"],
            num_classes=len(self.class_names),
            with_corner=v["toggle.corner_module"],
            z_bias=v["head.z_bias"],
            size_bias=(v["head.size_bias_l"], v["head.size_bias_w"], v["head.size_bias_h"]),
        )

    def scene_spec(self) -> SceneSpec:
        v = self.values
        classes = []
        for name in self.class_names:
            lr, wr, hr = CLASS_SIZE_RANGES.get(name, CLASS_SIZE_RANGES["car"])
            classes.append(ClassSpec(name, lr, wr, hr))
        return SceneSpec(
            classes=tuple(classes),
            boxes_range=(v["scene.boxes_min"], v["scene.boxes_max"]),
            points_range=(v["scene.points_min"], v["scene.points_max"]),
            clutter_density=v["scene.clutter_density"],
            ground_z=v["scene.ground_z"],
            min_gap=v["scene.min_gap"],
            x_range=(v["grid.x_min"], v["grid.x_max"]),
            y_range=(v["grid.y_min"], v["grid.y_max"]),
        )

    def toggles(self) -> dict:
        v = self.values
        if v["toggle.size_loss"] not in ("balanced", "l1"):
            raise ConfigError(f"toggle.size_loss must be 'balanced' or 'l1'")
        if v["toggle.direction_loss"] != "sincos":
            raise ConfigError("only the sin-cos direction loss is implemented")
        return {
            "corner_module": v["toggle.corner_module"],
            "kswarp": v["toggle.kswarp"],
            "decode_loss": v["toggle.decode_loss"],
            "size_loss": v["toggle.size_loss"],
        }


def build_run_config(
    file_text: str | None = None, overrides: dict[str, str] | None = None
) -> RunConfig:
    """Merge defaults, an optional config file, and CLI overrides in order."""
    values = {key: default for key, (_, default) in SCHEMA.items()}
    for source in (parse_config_text(file_text) if file_text else {}, overrides or {}):
        for key, raw in source.items():
            values[key] = _convert(key, str(raw))
    cfg = RunConfig(values)
    if not cfg.class_names:
        raise ConfigError("at least one class name is required")
    # fail fast on inconsistent geometry and toggles
    cfg.grid()
    cfg.toggles()
    if cfg.values["head"] not in ("split", "merge"):
        raise ConfigError(f"head must be 'split' or 'merge', got {cfg.values['head']!r}")
    return cfg


def format_config(cfg: RunConfig) -> str:
    lines = [f"{k} {v}" for k, v in sorted(cfg.values.items())]
    return "\n".join(lines) + "\n"
