"""Detection metrics: per-class AP at IoU 0.25, mAP over a class set, and
class-agnostic AR, with Pascal-style greedy matching.

Conventions: all-point precision-recall interpolation; classes with zero
ground truth are excluded from the mAP mean; AR pools every proposal
regardless of predicted class, so it measures pure localization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import ModelConfig, ParamStore, forward_detector_3d
from .geometry import iou_3d


@dataclass(frozen=True)
class Detection:
    scene_index: int
    class_id: int
    box: object
    confidence: float


@dataclass
class MetricsReport:
    per_class_ap: dict  # class -> AP25 or None when no ground truth
    map25: float
    ar25: float
    gt_counts: dict
    det_counts: dict


def match_detections(detections, ground_truths, iou_threshold: float):
    """TP/FP flags for confidence-descending detections of one scene+class.

    Greedy: each detection takes the highest-IoU unmatched GT at or above
    the threshold; IoU ties break to the lowest GT index.
    """
    matched = [False] * len(ground_truths)
    flags = []
    for det in detections:
        best_iou, best_g = 0.0, -1
        for g, gt in enumerate(ground_truths):
            if matched[g]:
                continue
            iou = iou_3d(det, gt)
            if iou > best_iou:  # strict: ties keep the lowest index
                best_iou, best_g = iou, g
        if best_g >= 0 and best_iou >= iou_threshold:
            matched[best_g] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags, matched


def average_precision(flags, confidences, n_gt: int):
    """All-point interpolated AP; None when the class has no ground truth."""
    if n_gt == 0:
        return None
    if len(flags) == 0:
        return 0.0
    order = np.argsort(-np.asarray(confidences, dtype=float), kind="stable")
    tp = np.asarray(flags, dtype=float)[order]
    cum_tp = np.cumsum(tp)
    ranks = np.arange(1, len(tp) + 1, dtype=float)
    precision = cum_tp / ranks
    recall = cum_tp / n_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_recall = 0.0
    for k in range(len(tp)):
        ap += (recall[k] - prev_recall) * envelope[k]
        prev_recall = recall[k]
    return float(ap)


def collect_detections(proposals, scene_index: int, n_classes: int):
    """One detection per proposal: argmax foreground class at its probability."""
    out = []
    for prop in proposals:
        p = np.exp(prop.logits - prop.logits.max())
        p /= p.sum()
        cls = int(np.argmax(p[:n_classes]))
        out.append(Detection(scene_index, cls, prop.box, float(p[cls])))
    return out


def evaluate(params: ParamStore, scenes, split, class_set, mcfg: ModelConfig,
             iou_threshold: float = 0.25, detector_fn=None) -> MetricsReport:
    """Corpus metrics; `detector_fn(scene)` can replace the real detector."""
    if detector_fn is None:
        def detector_fn(scene):
            return forward_detector_3d(scene.points, params, mcfg)

    class_set = sorted(class_set)
    all_detections = []
    scene_gts = []
    for s_idx, scene in enumerate(scenes):
        proposals = detector_fn(scene)
        all_detections.extend(collect_detections(proposals, s_idx, mcfg.n_classes))
        scene_gts.append([(obj.class_id, obj.box) for obj in scene.objects])

    per_class_ap = {}
    gt_counts = {}
    det_counts = {}
    for cls in class_set:
        gt_counts[cls] = sum(1 for gts in scene_gts for c, _ in gts if c == cls)
        dets = [d for d in all_detections if d.class_id == cls]
        det_counts[cls] = len(dets)
        # global confidence order, matched within each scene
        dets.sort(key=lambda d: (-d.confidence, d.scene_index))
        flags = []
        matched_by_scene = {
            s: [False] * sum(1 for c, _ in scene_gts[s] if c == cls)
            for s in range(len(scenes))
        }
        class_gts = {
            s: [b for c, b in scene_gts[s] if c == cls] for s in range(len(scenes))
        }
        for det in dets:
            gts = class_gts[det.scene_index]
            taken = matched_by_scene[det.scene_index]
            best_iou, best_g = 0.0, -1
            for g, gt in enumerate(gts):
                if taken[g]:
                    continue
                iou = iou_3d(det.box, gt)
                if iou > best_iou:
                    best_iou, best_g = iou, g
            if best_g >= 0 and best_iou >= iou_threshold:
                taken[best_g] = True
                flags.append(True)
            else:
                flags.append(False)
        per_class_ap[cls] = average_precision(
            flags, [d.confidence for d in dets], gt_counts[cls]
        )

    valid = [ap for ap in per_class_ap.values() if ap is not None]
    map25 = float(np.mean(valid)) if valid else 0.0

    # class-agnostic recall over the class set's ground truths
    total_gt = 0
    total_matched = 0
    wanted = set(class_set)
    for s_idx, scene in enumerate(scenes):
        gts = [b for c, b in scene_gts[s_idx] if c in wanted]
        total_gt += len(gts)
        if not gts:
            continue
        dets = sorted((d for d in all_detections if d.scene_index == s_idx),
                      key=lambda d: -d.confidence)
        _, matched = match_detections([d.box for d in dets], gts, iou_threshold)
        total_matched += sum(matched)
    ar25 = total_matched / total_gt if total_gt else 0.0

    return MetricsReport(per_class_ap, map25, float(ar25), gt_counts, det_counts)


def report_lines(report: MetricsReport) -> list:
    """Machine-readable line-delimited form: per-class rows then summaries."""
    lines = []
    for cls in sorted(report.per_class_ap):
        ap = report.per_class_ap[cls]
        ap_str = "nan" if ap is None else f"{ap:.6f}"
        lines.append(f"class {cls} ap25 {ap_str} gt {report.gt_counts[cls]} "
                     f"det {report.det_counts[cls]}")
    lines.append(f"map25 {report.map25:.6f}")
    lines.append(f"ar25 {report.ar25:.6f}")
    return lines


def format_table(report: MetricsReport) -> str:
    rows = [f"{'class':>6} {'AP25':>8} {'#gt':>5} {'#det':>5}"]
    for cls in sorted(report.per_class_ap):
        ap = report.per_class_ap[cls]
        ap_str = "   --" if ap is None else f"{100 * ap:7.2f}%"
        rows.append(f"{cls:>6} {ap_str:>8} {report.gt_counts[cls]:>5} "
                    f"{report.det_counts[cls]:>5}")
    rows.append(f"mAP25 {100 * report.map25:.2f}%  AR25 {100 * report.ar25:.2f}%")
    return "\n".join(rows)
