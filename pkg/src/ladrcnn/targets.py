"""Anchor assignment and per-image mini-batch sampling."""

import enum
from dataclasses import dataclass

import numpy as np

from . import angles
from .boxes import encode_boxes, iou_matrix_xyxy, xyxy_to_xywh, xywh_to_xyxy

POSITIVE = 1
NEGATIVE = 0
IGNORED = -1

NO_DIRECTION = -1


class Origin(enum.IntEnum):
    DS1 = 1  # angle-labeled
    DS2 = 2  # box-only


@dataclass
class AnchorTargets:
    """Per-anchor training targets for one image.

    ``labels`` uses POSITIVE/NEGATIVE/IGNORED. ``angle_value`` is NaN and
    ``direction`` is NO_DIRECTION wherever no angle supervision exists.
    """

    labels: np.ndarray
    matched_gt: np.ndarray
    box_targets: np.ndarray
    angle_value: np.ndarray
    direction: np.ndarray
    origin: Origin

    def __len__(self):
        return len(self.labels)

    @property
    def positives(self):
        return np.flatnonzero(self.labels == POSITIVE)

    @property
    def negatives(self):
        return np.flatnonzero(self.labels == NEGATIVE)


def assign_targets(gt_boxes, anchors, gt_angles=None, origin=Origin.DS1,
                   pos_iou=0.5, neg_iou=0.4):
    """Match ground-truth boxes to anchors.

    ``gt_boxes`` are corner form (G, 4); ``anchors`` center form (A, 4).
    An anchor is positive at IoU >= ``pos_iou`` with some box, negative
    below ``neg_iou`` with all, ignored in between. The best anchor of each
    box is forced positive and matched to that box (ties go to the lowest
    anchor index), so every box trains at least one anchor. When two boxes
    share a best anchor, the box with the higher IoU keeps it and the other
    takes its best anchor not yet claimed.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    origin = Origin(origin)
    n = len(anchors)
    labels = np.full(n, NEGATIVE, dtype=np.int8)
    matched = np.full(n, -1, dtype=np.int64)
    box_targets = np.zeros((n, 4), dtype=np.float64)
    angle_value = np.full(n, np.nan)
    direction = np.full(n, NO_DIRECTION, dtype=np.int8)
    if len(gt_boxes) == 0:
        return AnchorTargets(labels, matched, box_targets, angle_value, direction, origin)

    ious = iou_matrix_xyxy(xywh_to_xyxy(anchors), gt_boxes)  # (A, G)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    labels[best_iou >= neg_iou] = IGNORED
    labels[best_iou >= pos_iou] = POSITIVE
    matched[:] = best_gt
    claimed = np.zeros(n, dtype=bool)
    for g in np.argsort(-ious.max(axis=0), kind="stable"):
        col = np.where(claimed, -1.0, ious[:, g])
        a = int(np.argmax(col))
        if col[a] <= 0:
            continue
        claimed[a] = True
        labels[a] = POSITIVE
        matched[a] = g
    matched[labels != POSITIVE] = -1

    pos = np.flatnonzero(labels == POSITIVE)
    gt_xywh = xyxy_to_xywh(gt_boxes)
    box_targets[pos] = encode_boxes(gt_xywh[matched[pos]], anchors[pos])
    if origin == Origin.DS1 and gt_angles is not None:
        for a in pos:
            theta = gt_angles[matched[a]]
            if theta is None or not np.isfinite(theta):
                continue
            parts = angles.split(theta)
            angle_value[a] = parts.value
            direction[a] = int(parts.direction)
    return AnchorTargets(labels, matched, box_targets, angle_value, direction, origin)


def sample_minibatch(targets, rng, size=256, pos_fraction=0.5):
    """Indices of a balanced anchor subset for the objectness loss.

    Keeps up to ``size * pos_fraction`` positives (random subset when there
    are more) and fills the rest with random negatives. ``rng`` is a
    ``numpy.random.Generator`` or a seed.
    """
    if size < 1:
        raise ValueError("mini-batch size must be >= 1")
    rng = np.random.default_rng(rng)
    pos = targets.positives
    neg = targets.negatives
    max_pos = int(size * pos_fraction)
    if len(pos) > max_pos:
        pos = rng.choice(pos, size=max_pos, replace=False)
    n_neg = min(size - len(pos), len(neg))
    if len(neg) > n_neg:
        neg = rng.choice(neg, size=n_neg, replace=False)
    return np.sort(np.concatenate([pos, neg]).astype(np.int64))
