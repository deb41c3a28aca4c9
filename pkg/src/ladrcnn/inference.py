"""Turning raw head outputs into detections, and normalizing detected faces."""

import json
import math
import os
from dataclasses import dataclass

import cv2
import numpy as np
import torch
from PIL import Image, ImageDraw

from . import angles
from .boxes import decode_boxes, nms, xywh_to_xyxy
from .data import PAD_VALUE, Sample, letterbox, to_channels, write_image
from .errors import DegenerateBox


@dataclass
class Detection:
    box: tuple      # (x, y, w, h)
    score: float
    angle: float

    def to_dict(self):
        return {
            "box_xywh": [float(v) for v in self.box],
            "score": float(self.score),
            "angle": float(self.angle),
            "angle_degrees": float(self.angle) * 180.0,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(float(v) for v in d["box_xywh"]), float(d["score"]), float(d["angle"]))


def _softmax_last(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def decode_predictions(raw, anchors, score_thresh=0.5, nms_iou=0.5, max_out=100):
    """Detections from one image's raw rows (A, 9), sorted by score."""
    raw = np.asarray(raw, dtype=np.float64)
    anchors = np.asarray(getattr(anchors, "boxes", anchors), dtype=np.float64)
    obj = _softmax_last(raw[:, 4:6])[:, 1]
    keep = np.flatnonzero(obj >= score_thresh)
    if len(keep) == 0:
        return []
    boxes = decode_boxes(raw[keep, 0:4], anchors[keep])
    scores = obj[keep]
    value = 1.0 / (1.0 + np.exp(-raw[keep, 8]))
    ccw = _softmax_last(raw[keep, 6:8])[:, 1] >= 0.5
    kept = nms(boxes, scores, nms_iou, max_out)
    out = []
    for i in kept:
        direction = angles.Direction.CCW if ccw[i] else angles.Direction.CW
        theta = angles.merge((min(max(float(value[i]), 0.0), 1.0), direction))
        out.append(Detection(tuple(float(v) for v in boxes[i]), float(scores[i]), theta))
    return out


@torch.no_grad()
def detect(model, image, score_thresh=0.5, nms_iou=0.5, max_out=100, anchors=None):
    """Run ``model`` on one (H, W, C) image; boxes are in the image's own pixels."""
    cfg = model.config
    anchors = anchors if anchors is not None else cfg.anchors()
    sample, lb = letterbox(Sample(np.asarray(image, dtype=np.float32)), cfg.input_size, cfg.input_channels)
    x = torch.from_numpy(sample.image.transpose(2, 0, 1)[None].copy())
    param = next(model.parameters())
    was_training = model.training
    model.eval()
    raw = model(x.to(param.dtype))[0].cpu().numpy()
    model.train(was_training)
    dets = decode_predictions(raw, anchors, score_thresh, nms_iou, max_out)
    for d in dets:
        d.box = tuple(float(v) for v in lb.to_original(np.array(d.box)))
    return dets


def crop_side(box):
    """Side of the square crop around a box.

    The box diagonal is used because the axis-aligned extent of a rotated
    ellipse keeps its diagonal at every rotation, so faces come out at the
    same scale whatever their angle.
    """
    return math.hypot(box[2], box[3])


def normalize_face(image, det, out_size=224, margin=0.1):
    """Rotate the face upright about its box center, crop a square and resize.

    The image is rotated by ``-angle * 180`` degrees about the box center
    (bilinear, gray fill outside the image) and the square of side
    ``diagonal * (1 + 2 * margin)`` centered on the box is scaled to
    ``out_size x out_size``.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        image = image[:, :, None]
    h, w, c = image.shape
    x, y, bw, bh = (float(v) for v in det.box)
    x0, y0, x1, y1 = xywh_to_xyxy(np.array([x, y, bw, bh]))
    cx0, cy0, cx1, cy1 = max(x0, 0.0), max(y0, 0.0), min(x1, float(w)), min(y1, float(h))
    if cx1 <= cx0 or cy1 <= cy0:
        raise DegenerateBox(f"box {det.box} does not intersect the {w}x{h} image")
    side = crop_side((x, y, bw, bh)) * (1.0 + 2.0 * margin)
    scale = side / out_size
    phi = float(det.angle) * math.pi
    c_, s_ = math.cos(phi), math.sin(phi)
    # output pixel center (u + .5, v + .5) -> upright offset -> rotated source point
    # (continuous coords, converted to cv2's pixel-center convention by -0.5)
    a = np.array([[c_, s_], [-s_, c_]]) * scale
    off = np.array([(0.5 - out_size / 2.0) * scale, (0.5 - out_size / 2.0) * scale])
    t = np.array([x, y]) + np.array([[c_, s_], [-s_, c_]]) @ off - 0.5
    m = np.hstack([a, t[:, None]]).astype(np.float64)
    out = cv2.warpAffine(image, m, (out_size, out_size),
                         flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
                         borderMode=cv2.BORDER_CONSTANT, borderValue=(PAD_VALUE,) * 4)
    return out.reshape(out_size, out_size, c)


def draw_detections(image, detections):
    """Copy of ``image`` (uint8 RGB) with boxes, scores and orientation rays."""
    arr = np.clip(np.round(to_channels(image, 3) * 255.0), 0, 255).astype(np.uint8)
    im = Image.fromarray(arr)
    draw = ImageDraw.Draw(im)
    for d in detections:
        x0, y0, x1, y1 = xywh_to_xyxy(np.array(d.box))
        draw.rectangle([x0, y0, x1, y1], outline=(255, 0, 0))
        # up direction of the face, which is the eye line turned 90 degrees
        phi = d.angle * math.pi
        r = 0.5 * min(d.box[2], d.box[3])
        tip = (d.box[0] - r * math.sin(phi), d.box[1] - r * math.cos(phi))
        draw.line([d.box[0], d.box[1], tip[0], tip[1]], fill=(255, 255, 0), width=2)
        draw.text((x0 + 1, y0 + 1), f"{d.score:.2f}", fill=(255, 255, 255))
    return np.asarray(im)


def write_detections_json(path, image_path, detections):
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"image": image_path, "detections": [d.to_dict() for d in detections]}, f, indent=2)


def read_detections_json(path):
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    return doc["image"], [Detection.from_dict(d) for d in doc["detections"]]


def detect_and_render(image, model, out_path, image_path="", score_thresh=0.5, nms_iou=0.5, max_out=100):
    """Detect, write the annotated PNG to ``out_path`` and a JSON next to it."""
    dets = detect(model, image, score_thresh, nms_iou, max_out)
    Image.fromarray(draw_detections(image, dets)).save(out_path, format="PNG")
    json_path = os.path.splitext(out_path)[0] + ".json"
    write_detections_json(json_path, image_path, dets)
    return dets, json_path
