"""Running a model over a labeled image set and scoring it."""

import numpy as np

from .data import rot90
from .inference import detect
from .metrics import evaluate


def rotations(sample, rot4=False):
    """The sample, plus its 90/180/270-degree counterclockwise rotations when ``rot4``."""
    out = [sample]
    if rot4:
        for _ in range(3):
            out.append(rot90(out[-1]))
    return out


def ground_truth_of(sample):
    return [(o.box, o.angle) for o in sample.objects]


def evaluate_model(model, samples, rot4=False, score_thresh=0.5, nms_iou=0.5, max_out=100,
                   ap_score_floor=0.05, oracle=False):
    """EvalReport for ``model`` on ``samples``.

    AP ranks every detection above ``ap_score_floor``; the thresholded
    metrics use ``score_thresh``. With ``oracle`` the ground truth itself is
    scored as the detection set (a check of the evaluation path).
    """
    anchors = None if oracle else model.config.anchors()
    dets, gts = [], []
    for sample in samples:
        for s in rotations(sample, rot4):
            gts.append(ground_truth_of(s))
            if oracle:
                boxes = s.boxes()
                xywh = np.concatenate([(boxes[:, :2] + boxes[:, 2:]) / 2, boxes[:, 2:] - boxes[:, :2]], axis=1)
                dets.append([(b, 1.0, o.angle) for b, o in zip(xywh, s.objects)])
                continue
            found = detect(model, s.image, min(ap_score_floor, score_thresh), nms_iou, max_out, anchors)
            dets.append([(d.box, d.score, d.angle) for d in found])
    return evaluate(dets, gts, 0.5, score_thresh)
