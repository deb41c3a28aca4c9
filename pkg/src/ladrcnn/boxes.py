"""Axis-aligned boxes, the anchor grid, box regression codec and NMS.

Boxes are numpy arrays with the last axis holding either center form
``(x, y, w, h)`` or corner form ``(xmin, ymin, xmax, ymax)``, in pixels.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

# Largest stride produced directly by the backbone; deeper levels come from
# strided convolutions with "same" padding and may have a partial last cell.
BACKBONE_STRIDE = 32

DEFAULT_SCALES = (1.0, math.sqrt(2.0))
DEFAULT_RATIOS = (1.0, 2.0, 0.5)
WH_CLAMP = 10.0


def xywh_to_xyxy(boxes):
    boxes = np.asarray(boxes, dtype=np.float64)
    half = boxes[..., 2:4] / 2.0
    return np.concatenate([boxes[..., 0:2] - half, boxes[..., 0:2] + half], axis=-1)


def xyxy_to_xywh(boxes):
    boxes = np.asarray(boxes, dtype=np.float64)
    wh = boxes[..., 2:4] - boxes[..., 0:2]
    return np.concatenate([boxes[..., 0:2] + wh / 2.0, wh], axis=-1)


def check_boxes_xywh(boxes):
    boxes = np.asarray(boxes, dtype=np.float64)
    if not np.all(np.isfinite(boxes)):
        raise ValueError("box coordinates must be finite")
    if np.any(boxes[..., 2:4] <= 0):
        raise ValueError("box width and height must be positive")
    return boxes


def area_xyxy(boxes):
    boxes = np.asarray(boxes, dtype=np.float64)
    return np.clip(boxes[..., 2] - boxes[..., 0], 0, None) * np.clip(boxes[..., 3] - boxes[..., 1], 0, None)


def iou_matrix_xyxy(a, b):
    """Pairwise IoU between corner-form box sets ``a`` (N, 4) and ``b`` (M, 4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_xyxy(a)[:, None] + area_xyxy(b)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def iou_matrix(a, b):
    """Pairwise IoU between center-form box sets."""
    return iou_matrix_xyxy(xywh_to_xyxy(a), xywh_to_xyxy(b))


def iou(a, b):
    """IoU of two center-form boxes."""
    return float(iou_matrix(a, b)[0, 0])


@dataclass(frozen=True)
class AnchorGrid:
    """All anchors of a configuration, in head-output row order.

    ``boxes`` is (N, 4) center form; the remaining arrays give each anchor's
    pyramid level, feature-map cell and slot within the cell.
    """

    boxes: np.ndarray
    level: np.ndarray
    row: np.ndarray
    col: np.ndarray
    slot: np.ndarray
    grid_sizes: tuple = field(default=())

    def __len__(self):
        return len(self.boxes)


def level_grid_size(input_size, stride):
    return -(-int(input_size) // int(stride))


def generate_anchors(input_size, strides, base_sizes, scales=DEFAULT_SCALES, ratios=DEFAULT_RATIOS):
    """Build the anchor grid for a square input.

    Every cell of every level gets ``len(ratios) * len(scales)`` anchors with
    ``w = base * scale * sqrt(ratio)`` and ``h = base * scale / sqrt(ratio)``.
    Order is level, row, column, then slot (ratio-major, scale-minor).

    Levels whose stride divides the input have centers at
    ``(col + 0.5) * stride``. A level deeper than the backbone stride may not
    divide the input; its ``ceil(input / stride)`` cells are spread evenly
    over the image so every center stays inside.
    """
    input_size = int(input_size)
    strides = [int(s) for s in strides]
    base_sizes = [float(b) for b in base_sizes]
    if len(strides) != len(base_sizes) or not strides:
        raise ConfigError("strides and base_sizes must be non-empty and of equal length")
    if any(s <= 0 for s in strides) or any(b <= 0 for b in base_sizes):
        raise ConfigError("strides and base sizes must be positive")
    for s in strides:
        if s <= BACKBONE_STRIDE and input_size % s:
            raise ConfigError(f"input size {input_size} is not divisible by stride {s}")
    if input_size % min(max(strides), BACKBONE_STRIDE):
        raise ConfigError(f"input size {input_size} is not divisible by {BACKBONE_STRIDE}")

    shapes = []
    for r in ratios:
        for sc in scales:
            shapes.append((math.sqrt(r) * sc, sc / math.sqrt(r)))
    shapes = np.asarray(shapes, dtype=np.float64)
    k = len(shapes)

    boxes, level, rows, cols, slots, grid_sizes = [], [], [], [], [], []
    for li, (stride, base) in enumerate(zip(strides, base_sizes)):
        n = level_grid_size(input_size, stride)
        grid_sizes.append(n)
        step = input_size / n
        centers = (np.arange(n, dtype=np.float64) + 0.5) * step
        rr, cc, ss = np.meshgrid(np.arange(n), np.arange(n), np.arange(k), indexing="ij")
        rr, cc, ss = rr.ravel(), cc.ravel(), ss.ravel()
        b = np.stack(
            [centers[cc], centers[rr], base * shapes[ss, 0], base * shapes[ss, 1]],
            axis=1,
        )
        boxes.append(b)
        level.append(np.full(len(b), li, dtype=np.int64))
        rows.append(rr)
        cols.append(cc)
        slots.append(ss)
    return AnchorGrid(
        boxes=np.concatenate(boxes),
        level=np.concatenate(level),
        row=np.concatenate(rows),
        col=np.concatenate(cols),
        slot=np.concatenate(slots),
        grid_sizes=tuple(grid_sizes),
    )


def encode_boxes(gt, anchors):
    """Regression targets of center-form ``gt`` boxes against ``anchors``."""
    gt = np.asarray(gt, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    tx = 10.0 * (gt[..., 0] - anchors[..., 0]) / anchors[..., 2]
    ty = 10.0 * (gt[..., 1] - anchors[..., 1]) / anchors[..., 3]
    tw = 5.0 * np.log(gt[..., 2] / anchors[..., 2])
    th = 5.0 * np.log(gt[..., 3] / anchors[..., 3])
    return np.stack([tx, ty, tw, th], axis=-1)


def decode_boxes(t, anchors, clamp=WH_CLAMP):
    """Inverse of :func:`encode_boxes`; ``t_w``/``t_h`` are clamped to ``+-clamp``."""
    t = np.asarray(t, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    tw = np.clip(t[..., 2], -clamp, clamp)
    th = np.clip(t[..., 3], -clamp, clamp)
    x = t[..., 0] / 10.0 * anchors[..., 2] + anchors[..., 0]
    y = t[..., 1] / 10.0 * anchors[..., 3] + anchors[..., 1]
    w = np.exp(tw / 5.0) * anchors[..., 2]
    h = np.exp(th / 5.0) * anchors[..., 3]
    out = np.stack([x, y, w, h], axis=-1)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("decoded box is not finite")
    return out


def encode_box(gt, anchor):
    return tuple(float(v) for v in encode_boxes(gt, anchor))


def decode_box(t, anchor, clamp=WH_CLAMP):
    return tuple(float(v) for v in decode_boxes(t, anchor, clamp))


def nms(boxes, scores, iou_threshold=0.5, max_out=100):
    """Greedy non-maximum suppression.

    Returns indices of kept boxes sorted by descending score; equal scores
    keep the lower input index first. A candidate is dropped when its IoU
    with an already kept box is greater than ``iou_threshold``.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(boxes) == 0 or max_out <= 0:
        return np.zeros(0, dtype=np.int64)
    corners = xywh_to_xyxy(boxes)
    areas = area_xyxy(corners)
    order = np.lexsort((np.arange(len(scores)), -scores))
    suppressed = np.zeros(len(boxes), dtype=bool)
    keep = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(i)
        if len(keep) >= max_out:
            break
        rest = order[pos + 1:]
        rest = rest[~suppressed[rest]]
        if len(rest) == 0:
            continue
        lt = np.maximum(corners[i, :2], corners[rest, :2])
        rb = np.minimum(corners[i, 2:], corners[rest, 2:])
        wh = np.clip(rb - lt, 0, None)
        inter = wh[:, 0] * wh[:, 1]
        ious = inter / (areas[i] + areas[rest] - inter)
        suppressed[rest[ious > iou_threshold]] = True
    return np.asarray(keep, dtype=np.int64)
