"""Detection metrics: greedy matching at IoU 0.5, precision/recall/F1, AP and AAD."""

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

from .angles import angle_distance
from .boxes import iou_matrix_xyxy, xywh_to_xyxy


@dataclass
class ImageMatches:
    """Outcome of matching one image's detections against its ground truth."""

    scores: np.ndarray          # per detection
    is_tp: np.ndarray           # per detection, bool
    matched_gt: np.ndarray      # per detection, -1 for false positives
    num_gt: int


def match_detections(det_boxes, det_scores, gt_boxes, iou_thresh=0.5):
    """Greedy matching for one image.

    Boxes are corner form. Detections are visited by descending score (ties
    by input order); each claims the unclaimed ground truth with highest
    IoU, provided that IoU is at least ``iou_thresh``. IoU ties go to the
    lowest ground-truth index.
    """
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    det_scores = np.asarray(det_scores, dtype=np.float64).reshape(-1)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n_det = len(det_boxes)
    is_tp = np.zeros(n_det, dtype=bool)
    matched = np.full(n_det, -1, dtype=np.int64)
    if n_det and len(gt_boxes):
        ious = iou_matrix_xyxy(det_boxes, gt_boxes)
        claimed = np.zeros(len(gt_boxes), dtype=bool)
        for d in np.lexsort((np.arange(n_det), -det_scores)):
            cand = np.where(claimed, -1.0, ious[d])
            g = int(np.argmax(cand))
            if cand[g] >= iou_thresh:
                claimed[g] = True
                is_tp[d] = True
                matched[d] = g
    return ImageMatches(det_scores, is_tp, matched, len(gt_boxes))


def pr_points(matches):
    """Cumulative (recall, precision) after each detection in global score order."""
    scores = np.concatenate([m.scores for m in matches]) if matches else np.zeros(0)
    tp = np.concatenate([m.is_tp for m in matches]) if matches else np.zeros(0, bool)
    n_gt = sum(m.num_gt for m in matches)
    order = np.argsort(-scores, kind="stable")
    tp = tp[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt if n_gt else np.zeros(len(ctp))
    precision = ctp / np.maximum(ctp + cfp, 1)
    return recall, precision


def average_precision(matches):
    """All-point interpolated AP: area under the monotone precision envelope."""
    if sum(m.num_gt for m in matches) == 0:
        return 0.0
    recall, precision = pr_points(matches)
    if len(recall) == 0:
        return 0.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return math.fsum((recall - prev) * envelope)


def aad_degrees(angle_pairs):
    """Mean wraparound distance of (true, predicted) angle pairs, in degrees; None if empty."""
    if not angle_pairs:
        return None
    return math.fsum(angle_distance(t, p) for t, p in angle_pairs) / len(angle_pairs) * 180.0


@dataclass
class EvalReport:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    ap: float
    aad_degrees: Optional[float]
    num_images: int = 0
    pr_curve: List[tuple] = field(default_factory=list)

    def to_json(self, include_curve=False):
        d = asdict(self)
        if not include_curve:
            d.pop("pr_curve")
        else:
            d["pr_curve"] = [list(p) for p in self.pr_curve]
        return json.dumps(d, indent=2)

    def to_text(self):
        aad = "n/a" if self.aad_degrees is None else f"{self.aad_degrees:.2f} deg"
        rows = [
            ("images", str(self.num_images)),
            ("TP / FP / FN", f"{self.tp} / {self.fp} / {self.fn}"),
            ("precision", f"{self.precision:.4f}"),
            ("recall", f"{self.recall:.4f}"),
            ("F1", f"{self.f1:.4f}"),
            ("AP@0.5", f"{self.ap:.4f}"),
            ("AAD", aad),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)

    def write_pr_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["recall", "precision"])
            w.writerows(self.pr_curve)


def evaluate(detections, ground_truth, iou_thresh=0.5, score_thresh=None):
    """Build an :class:`EvalReport`.

    ``detections`` holds per-image lists of ``(box_xywh, score, angle)``;
    ``ground_truth`` holds per-image lists of ``(box_xyxy, angle or None)``.
    AP uses every detection. Counts, precision, recall, F1 and AAD use only
    detections scoring at least ``score_thresh`` (all when None); AAD is
    taken over their true positives whose ground truth has an angle.
    """
    ap_matches = []
    for dets, gts in zip(detections, ground_truth):
        db = xywh_to_xyxy(np.array([d[0] for d in dets], dtype=np.float64).reshape(-1, 4))
        ds = np.array([d[1] for d in dets], dtype=np.float64)
        gb = np.array([g[0] for g in gts], dtype=np.float64).reshape(-1, 4)
        ap_matches.append(match_detections(db, ds, gb, iou_thresh))
    if score_thresh is not None:
        detections = [[d for d in dets if d[1] >= score_thresh] for dets in detections]
    matches, pairs = [], []
    for dets, gts in zip(detections, ground_truth):
        db = xywh_to_xyxy(np.array([d[0] for d in dets], dtype=np.float64).reshape(-1, 4))
        ds = np.array([d[1] for d in dets], dtype=np.float64)
        gb = np.array([g[0] for g in gts], dtype=np.float64).reshape(-1, 4)
        m = match_detections(db, ds, gb, iou_thresh)
        matches.append(m)
        for d, g in enumerate(m.matched_gt):
            if g >= 0 and gts[g][1] is not None and dets[d][2] is not None:
                pairs.append((gts[g][1], dets[d][2]))
    tp = int(sum(m.is_tp.sum() for m in matches))
    n_det = sum(len(m.scores) for m in matches)
    n_gt = sum(m.num_gt for m in matches)
    fp, fn = n_det - tp, n_gt - tp
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    recall_pts, precision_pts = pr_points(ap_matches)
    return EvalReport(
        tp=tp, fp=fp, fn=fn, precision=precision, recall=recall, f1=f1,
        ap=average_precision(ap_matches), aad_degrees=aad_degrees(pairs),
        num_images=len(matches),
        pr_curve=[(float(r), float(p)) for r, p in zip(recall_pts, precision_pts)],
    )
