"""Detection metrics: greedy matching, AP at 40 recall positions, NDS.

Matching is the usual protocol: detections in descending confidence order
each claim the unmatched ground truth of highest IoU, provided it clears the
class threshold. The recall grid starts at 1/40 (recall 0 is excluded).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import iou_3d, rotated_iou_bev

DEFAULT_IOU_THRESHOLDS = {"car": 0.7, "pedestrian": 0.5}
MTP_KEYS = ("mATE", "mASE", "mAOE", "mAVE", "mAAE")


@dataclass(frozen=True)
class EvalConfig:
    iou_mode: str = "bev"  # "bev" or "3d"
    default_threshold: float = 0.5
    thresholds: dict = field(default_factory=dict)  # class name -> IoU threshold
    recall_positions: int = 40

    def __post_init__(self):
        if self.iou_mode not in ("bev", "3d"):
            raise ValueError(f"iou_mode must be 'bev' or '3d', got {self.iou_mode!r}")
        for t in list(self.thresholds.values()) + [self.default_threshold]:
            if not (0.0 < t <= 1.0):
                raise ValueError(f"IoU threshold must be in (0, 1], got {t}")
        if self.recall_positions < 1:
            raise ValueError("need at least one recall position")

    def threshold_for(self, class_name: str) -> float:
        if class_name in self.thresholds:
            return self.thresholds[class_name]
        return DEFAULT_IOU_THRESHOLDS.get(class_name, self.default_threshold)


@dataclass
class MatchResult:
    """Flags for one frame and one class: (confidence, is_tp) per detection."""

    confidences: list[float] = field(default_factory=list)
    is_tp: list[bool] = field(default_factory=list)
    num_gt: int = 0

    def extend(self, other: "MatchResult") -> None:
        self.confidences.extend(other.confidences)
        self.is_tp.extend(other.is_tp)
        self.num_gt += other.num_gt


def match_detections(detections, gt_boxes, cfg: EvalConfig, class_name: str) -> MatchResult:
    """Greedily match same-class detections against ground truth.

    ``detections`` is a sequence of infer.Detection; every item must belong
    to ``class_name`` (the caller filters). Each ground truth is claimed at
    most once, by the highest-confidence detection that overlaps it best.
    """
    iou_fn = rotated_iou_bev if cfg.iou_mode == "bev" else iou_3d
    thresh = cfg.threshold_for(class_name)
    order = sorted(range(len(detections)), key=lambda i: -detections[i].confidence)
    taken = [False] * len(gt_boxes)
    result = MatchResult(num_gt=len(gt_boxes))
    flags = [False] * len(detections)
    for i in order:
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gt_boxes):
            if taken[j]:
                continue
            iou = iou_fn(detections[i].box, gt)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= thresh:
            taken[best_j] = True
            flags[i] = True
    for i in order:
        result.confidences.append(detections[i].confidence)
        result.is_tp.append(flags[i])
    return result


def ap40(result: MatchResult, positions: int = 40) -> float:
    """Interpolated average precision over ``positions`` recall points.

    Precision at recall r is the maximum precision achieved at any recall
    >= r; the recall grid is {1/P, ..., P/P}.
    """
    if result.num_gt <= 0:
        raise ValueError("average precision is undefined without ground truth")
    if not result.confidences:
        return 0.0
    order = np.argsort(-np.asarray(result.confidences), kind="stable")
    tp = np.asarray(result.is_tp, dtype=float)[order]
    cum_tp = np.cumsum(tp)
    ranks = np.arange(1, len(tp) + 1)
    precision = cum_tp / ranks
    recall = cum_tp / result.num_gt

    total = 0.0
    for k in range(1, positions + 1):
        r = k / positions
        mask = recall >= r - 1e-12
        total += float(precision[mask].max()) if mask.any() else 0.0
    return total / positions


def nds(m_ap: float, mtp_errors) -> float:
    """Detection score: (1/10) [5 mAP + sum over errors of (1 - min(1, e))].

    ``mtp_errors`` holds the five mean true-positive errors (translation,
    scale, orientation, velocity, attribute), each >= 0.
    """
    if not (0.0 <= m_ap <= 1.0):
        raise ValueError(f"mAP must be in [0, 1], got {m_ap}")
    errors = list(mtp_errors)
    if len(errors) != 5:
        raise ValueError(f"expected 5 true-positive errors, got {len(errors)}")
    if any(e < 0 for e in errors):
        raise ValueError("true-positive errors must be non-negative")
    return 0.1 * (5.0 * m_ap + sum(1.0 - min(1.0, e) for e in errors))


def parse_mtp_sidecar(text: str) -> dict[str, float]:
    """Parse ``key value`` lines holding the five errors (and optionally mAP)."""
    out: dict[str, float] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"line {lineno}: expected 'key value', got {line!r}")
        key, val = parts
        if key not in MTP_KEYS and key != "mAP":
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        out[key] = float(val)
    missing = [k for k in MTP_KEYS if k not in out]
    if missing:
        raise ValueError(f"sidecar is missing keys: {missing}")
    return out


def evaluate_frames(
    frames: list[tuple[list, list, list]],
    class_names,
    cfg: EvalConfig,
) -> dict[str, float]:
    """Pool matches over frames and return AP per class.

    Each frame is (detections, gt_boxes, gt_class_ids) where detections are
    infer.Detection for all classes of that frame. Classes with no ground
    truth anywhere are reported as NaN.
    """
    pooled = {name: MatchResult() for name in class_names}
    for detections, gt_boxes, gt_classes in frames:
        for cid, name in enumerate(class_names):
            dets_c = [d for d in detections if d.class_id == cid]
            gts_c = [b for b, g in zip(gt_boxes, gt_classes) if g == cid]
            pooled[name].extend(match_detections(dets_c, gts_c, cfg, name))
    return {
        name: (ap40(res, cfg.recall_positions) if res.num_gt > 0 else float("nan"))
        for name, res in pooled.items()
    }
