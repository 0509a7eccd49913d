"""End-to-end commands: synthesis, encoding, toy training, inference, eval.

Every command is deterministic under a fixed seed and configuration. Logs are
line-oriented ``key=value`` records so they diff cleanly and parse with a
split.
"""

from __future__ import annotations

import dataclasses
import math
import os
from pathlib import Path

import numpy as np

from . import gradcheck
from .config import RunConfig
from .evalkit import EvalConfig, MTP_KEYS, evaluate_frames, nds, parse_mtp_sidecar
from .gridio import dump_grid
from .infer import (
    DecodeTelemetry,
    Detection,
    assemble_boxes,
    detect,
    format_detections,
    kswarp,
    parse_detections,
)
from .losses import evaluate_objective
from .nn import (
    DetectionModel,
    OptimState,
    adamw_step,
    load_checkpoint,
    one_cycle,
    restore_params,
    save_checkpoint,
)
from .pointcloud import (
    LabeledScene,
    SceneSpec,
    format_labels,
    parse_labels,
    read_kitti_bin,
    synth_scene,
    to_kitti_bin,
)
from .targets import encode_targets
from .voxelize import bev_collapse, voxelize_mean

SEED_STRIDE = 1_000_003  # per-frame seed spacing; documented, arbitrary prime
VAL_SEED_OFFSET = 500_000


def frame_id(i: int) -> str:
    return f"{i:06d}"


def write_scene(directory: Path, fid: str, scene: LabeledScene, class_names) -> None:
    (directory / f"{fid}.bin").write_bytes(to_kitti_bin(scene.cloud))
    names = [class_names[c] for c in scene.classes]
    (directory / f"{fid}.txt").write_text(format_labels(scene.boxes, names))


def read_scene(directory: Path, fid: str, class_names) -> LabeledScene:
    cloud = read_kitti_bin((directory / f"{fid}.bin").read_bytes())
    boxes, names = parse_labels((directory / f"{fid}.txt").read_text())
    name_to_id = {n: i for i, n in enumerate(class_names)}
    try:
        classes = tuple(name_to_id[n] for n in names)
    except KeyError as e:
        raise ValueError(f"{fid}: unknown class {e.args[0]!r}") from e
    return LabeledScene(cloud, tuple(boxes), classes)


def list_frames(directory: Path, suffix: str) -> list[str]:
    return sorted(p.stem for p in Path(directory).glob(f"*{suffix}"))


def cmd_synth(cfg: RunConfig, out_dir, count: int, spec: SceneSpec | None = None) -> list[str]:
    """Write ``count`` synthetic scenes (cloud + labels) to a directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = spec or cfg.scene_spec()
    names = spec.class_names()
    fids = []
    for i in range(count):
        scene = synth_scene(spec, cfg.seed * SEED_STRIDE + i)
        fid = frame_id(i)
        write_scene(out, fid, scene, names)
        fids.append(fid)
    return fids


def cmd_encode(cfg: RunConfig, scenes_dir, out_dir) -> list[str]:
    """Encode targets for every scene; dump maps plus a positives sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    enc = cfg.encoder()
    fids = list_frames(scenes_dir, ".bin")
    for fid in fids:
        scene = read_scene(Path(scenes_dir), fid, cfg.class_names)
        ts = encode_targets(scene.boxes, scene.classes, enc)
        for name in ("center_heat", "corner_heat", "offset", "z", "size", "direction"):
            dump_grid(out / f"{fid}.{name}.grid", getattr(ts, name))
        lines = []
        for (r, c, cid), corners in zip(ts.positives, ts.gt_corners):
            flat = " ".join(f"{v:.9g}" for v in corners.reshape(-1))
            lines.append(f"{r} {c} {cid} {flat}")
        (out / f"{fid}.positives.txt").write_text("\n".join(lines) + ("\n" if lines else ""))
    return fids


def _bev_input(scene: LabeledScene, grid_full) -> np.ndarray:
    return bev_collapse(voxelize_mean(scene.cloud, grid_full))


def _targets_as_preds(ts) -> dict[str, np.ndarray]:
    return {
        "center": ts.center_heat,
        "corner": ts.corner_heat,
        "offset": ts.offset,
        "z": ts.z,
        "size": ts.size,
        "direction": ts.direction,
    }


def oracle_detections(scene: LabeledScene, cfg: RunConfig) -> list[Detection]:
    """Round-trip mode: decode the encoded targets directly at their positives."""
    enc = cfg.encoder()
    toggles = cfg.toggles()
    ts = encode_targets(scene.boxes, scene.classes, enc)
    decoded = assemble_boxes(ts.positives, _targets_as_preds(ts), enc.grid)
    if toggles["kswarp"]:
        conf = kswarp(ts.center_heat, ts.corner_heat, decoded, enc.grid,
                      use_corners=toggles["corner_module"])
    else:
        conf = np.array([
            ts.center_heat[r, c, cid] for (r, c, cid) in ts.positives
        ])
    return [
        Detection(box, cid, float(np.clip(v, 0.0, 1.0)))
        for (box, cid), v in zip(decoded, conf)
    ]


def _build_model(cfg: RunConfig) -> DetectionModel:
    return DetectionModel(
        cfg.head_spec(),
        bev_channels=4,
        backbone_channels=cfg["backbone_channels"],
        stride=cfg.grid().stride,
        seed=cfg.seed,
    )


def model_detections(model, scene: LabeledScene, cfg: RunConfig,
                     telemetry: DecodeTelemetry | None = None) -> list[Detection]:
    grid = cfg.grid()
    grid_full = dataclasses.replace(grid, stride=1)
    preds = model.forward(_bev_input(scene, grid_full))
    toggles = cfg.toggles()
    if "corner" in preds:
        corner = preds["corner"]
    else:
        corner = np.zeros_like(preds["center"])
    return detect(
        preds["center"], corner, preds, grid, cfg.infer(),
        use_kswarp=toggles["kswarp"], use_corners=toggles["corner_module"],
        telemetry=telemetry,
    )


def cmd_infer(cfg: RunConfig, scenes_dir, out_dir, checkpoint=None,
              oracle: bool = False) -> list[str]:
    """Write one detection file per scene; ``oracle`` bypasses the model."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = cfg.class_names
    model = None
    if not oracle:
        if checkpoint is None:
            raise ValueError("a checkpoint directory is required unless --oracle-head is set")
        model = _build_model(cfg)
        restore_params(model.params(), load_checkpoint(checkpoint))
    fids = list_frames(scenes_dir, ".bin")
    for fid in fids:
        scene = read_scene(Path(scenes_dir), fid, names)
        if oracle:
            dets = oracle_detections(scene, cfg)
        else:
            dets = model_detections(model, scene, cfg)
        (out / f"{fid}.txt").write_text(format_detections(dets, names))
    return fids


def cmd_eval(cfg: RunConfig, det_dir, label_dir, mtp_path=None) -> tuple[str, dict]:
    """Per-class AP40 (BEV and 3D) over matching frame sets, optional NDS."""
    det_ids = list_frames(det_dir, ".txt")
    label_ids = list_frames(label_dir, ".txt")
    missing_d = sorted(set(label_ids) - set(det_ids))
    missing_l = sorted(set(det_ids) - set(label_ids))
    if missing_d or missing_l:
        raise ValueError(
            f"frame sets differ: no detections for {missing_d}, no labels for {missing_l}"
        )
    names = cfg.class_names
    name_to_id = {n: i for i, n in enumerate(names)}

    frames = []
    for fid in label_ids:
        boxes, dnames, confs = parse_detections((Path(det_dir) / f"{fid}.txt").read_text())
        dets = []
        for b, n, v in zip(boxes, dnames, confs):
            if n not in name_to_id:
                raise ValueError(f"{fid}: unknown detection class {n!r}")
            dets.append(Detection(b, name_to_id[n], min(max(v, 0.0), 1.0)))
        gt_boxes, gnames = parse_labels((Path(label_dir) / f"{fid}.txt").read_text())
        gt_cls = [name_to_id[n] for n in gnames]
        frames.append((dets, gt_boxes, gt_cls))

    ap_bev = evaluate_frames(frames, names, cfg.eval("bev"))
    ap_3d = evaluate_frames(frames, names, cfg.eval("3d"))

    lines = [f"frames={len(frames)}"]
    for n in names:
        lines.append(f"class={n} ap40_bev={ap_bev[n]:.6f} ap40_3d={ap_3d[n]:.6f}")
    valid_bev = [v for v in ap_bev.values() if not math.isnan(v)]
    valid_3d = [v for v in ap_3d.values() if not math.isnan(v)]
    mean_bev = sum(valid_bev) / len(valid_bev) if valid_bev else float("nan")
    mean_3d = sum(valid_3d) / len(valid_3d) if valid_3d else float("nan")
    lines.append(f"mean_ap40_bev={mean_bev:.6f} mean_ap40_3d={mean_3d:.6f}")

    result = {"ap_bev": ap_bev, "ap_3d": ap_3d,
              "mean_ap_bev": mean_bev, "mean_ap_3d": mean_3d}
    if mtp_path is not None:
        sidecar = parse_mtp_sidecar(Path(mtp_path).read_text())
        m_ap = sidecar.get("mAP", mean_3d)
        score = nds(m_ap, [sidecar[k] for k in MTP_KEYS])
        lines.append(f"nds={score:.6f}")
        result["nds"] = score
    return "\n".join(lines) + "\n", result


def cmd_nds(mtp_path) -> float:
    sidecar = parse_mtp_sidecar(Path(mtp_path).read_text())
    if "mAP" not in sidecar:
        raise ValueError("the sidecar must provide mAP for the standalone command")
    return nds(sidecar["mAP"], [sidecar[k] for k in MTP_KEYS])


def cmd_gradcheck(seed: int = 0, n_probes: int = 100) -> tuple[str, bool]:
    rows = gradcheck.run_all(seed=seed, n_probes=n_probes)
    return gradcheck.format_table(rows), all(r.ok for r in rows)


# ---------------------------------------------------------------------------
# Toy training
# ---------------------------------------------------------------------------


def _mean_total_loss(model, bevs, tsets, grid, loss_cfg, toggles) -> float:
    total = 0.0
    for bev, ts in zip(bevs, tsets):
        preds = model.forward(bev)
        report = evaluate_objective(
            preds, ts, grid, loss_cfg,
            corner_term=toggles["corner_module"],
            decode_term=toggles["decode_loss"],
            size_loss=toggles["size_loss"],
        )
        total += report.total
    return total / max(len(bevs), 1)


def cmd_train_toy(cfg: RunConfig, out_dir) -> dict:
    """Train the dense reference head on synthetic scenes.

    Emits a checkpoint, a ``key=value`` loss curve, and held-out AP40 (BEV,
    IoU 0.5 for every class: the toy benchmark setting). Returns a summary
    with the initial/final mean losses and the per-class AP.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = cfg.grid()
    grid_full = dataclasses.replace(grid, stride=1)
    enc = cfg.encoder()
    loss_cfg = cfg.loss()
    toggles = cfg.toggles()
    spec = cfg.scene_spec()
    seed = cfg.seed
    steps = cfg["train.steps"]

    train_scenes = [
        synth_scene(spec, seed * SEED_STRIDE + i) for i in range(cfg["train.scenes"])
    ]
    val_scenes = [
        synth_scene(spec, seed * SEED_STRIDE + VAL_SEED_OFFSET + i)
        for i in range(cfg["train.val_scenes"])
    ]
    bevs = [_bev_input(s, grid_full) for s in train_scenes]
    tsets = [encode_targets(s.boxes, s.classes, enc) for s in train_scenes]

    model = _build_model(cfg)
    sched = cfg.schedule(steps)
    state = OptimState()
    shuffle_rng = np.random.default_rng(seed + 1)
    log: list[str] = []

    initial = _mean_total_loss(model, bevs, tsets, grid, loss_cfg, toggles)
    log.append(f"event=initial mean_total={initial:.10g}")

    order = shuffle_rng.permutation(len(bevs))
    cursor = 0
    epoch = 0
    epoch_sum, epoch_count = 0.0, 0
    for step in range(steps):
        if cursor >= len(order):
            log.append(f"event=epoch epoch={epoch} mean_total={epoch_sum / max(epoch_count, 1):.10g}")
            order = shuffle_rng.permutation(len(bevs))
            cursor = 0
            epoch += 1
            epoch_sum, epoch_count = 0.0, 0
        i = int(order[cursor])
        cursor += 1

        preds = model.forward(bevs[i])
        report = evaluate_objective(
            preds, tsets[i], grid, loss_cfg,
            corner_term=toggles["corner_module"],
            decode_term=toggles["decode_loss"],
            size_loss=toggles["size_loss"],
        )
        if not math.isfinite(report.total):
            raise RuntimeError(f"non-finite loss at step {step}")
        lr, momentum = one_cycle(step, sched)
        model.zero_grad()
        model.backward(report.grads)
        adamw_step(model.params(), state, lr,
                   weight_decay=cfg["train.weight_decay"], beta1=momentum)

        epoch_sum += report.total
        epoch_count += 1
        terms = " ".join(f"{k}={v:.6g}" for k, v in sorted(report.terms.items()))
        log.append(f"step={step} lr={lr:.8g} momentum={momentum:.6g} "
                   f"total={report.total:.10g} {terms}")

    if epoch_count:
        log.append(f"event=epoch epoch={epoch} mean_total={epoch_sum / epoch_count:.10g}")
    final = _mean_total_loss(model, bevs, tsets, grid, loss_cfg, toggles)
    log.append(f"event=final mean_total={final:.10g} ratio={final / initial:.10g}")

    # Held-out AP at the fixed toy setting: BEV IoU 0.5, every class.
    toy_eval = EvalConfig(
        iou_mode="bev", default_threshold=0.5,
        thresholds={n: 0.5 for n in cfg.class_names},
        recall_positions=cfg["eval.recall_positions"],
    )
    frames = []
    for s in val_scenes:
        dets = model_detections(model, s, cfg)
        frames.append((dets, list(s.boxes), list(s.classes)))
    ap = evaluate_frames(frames, cfg.class_names, toy_eval)
    for n, v in ap.items():
        log.append(f"event=val class={n} ap40_bev_05={v:.6f}")
    valid = [v for v in ap.values() if not math.isnan(v)]
    mean_ap = sum(valid) / len(valid) if valid else float("nan")
    log.append(f"event=val mean_ap40_bev_05={mean_ap:.6f}")

    ckpt_dir = out / "checkpoint"
    save_checkpoint(model.params(), ckpt_dir)
    (out / "train_log.txt").write_text("\n".join(log) + "\n")

    return {
        "initial_loss": initial,
        "final_loss": final,
        "ratio": final / initial,
        "val_ap": ap,
        "mean_val_ap": mean_ap,
        "checkpoint": str(ckpt_dir),
        "log": str(out / "train_log.txt"),
    }
