"""Training losses on raw head outputs.

Raw rows hold 9 values per anchor: box offsets ``t_x, t_y, t_w, t_h``,
objectness logits ``(bg, fg)``, direction logits ``(cw, ccw)`` and the angle
value logit. Loss functions take the rows of the sampled anchors of a whole
batch together with a :class:`SampledTargets` describing them.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .targets import NO_DIRECTION, POSITIVE, Origin

BOX = slice(0, 4)
OBJ = slice(4, 6)
DIR = slice(6, 8)
ANGLE = 8
NUM_OUTPUTS = 9

PT_FLOOR = 1e-7


@dataclass
class LossWeights:
    loc: float = 1.0
    obj: float = 5.0
    angle_value: float = 1.0
    angle_dir: float = 10.0
    ds1: float = 10.0
    ds2: float = 0.0
    gamma: float = 2.0
    delta: float = 1.0
    epsilon: float = 0.025


@dataclass
class LossBreakdown:
    loc: torch.Tensor
    obj: torch.Tensor
    angle_value: torch.Tensor
    angle_dir: torch.Tensor
    total: torch.Tensor

    def as_floats(self):
        return {k: float(getattr(self, k).detach()) for k in ("total", "loc", "obj", "angle_value", "angle_dir")}


@dataclass
class SampledTargets:
    """Targets for the sampled anchor rows of a batch (all length M)."""

    positive: torch.Tensor      # bool
    box: torch.Tensor           # (M, 4)
    angle_value: torch.Tensor   # 0 where undefined
    has_angle: torch.Tensor     # bool: DS1 positive with an angle target
    ccw: torch.Tensor           # 1.0 for counterclockwise targets
    ds2: torch.Tensor           # bool: row comes from a box-only image

    def __len__(self):
        return len(self.positive)

    @classmethod
    def from_anchor_targets(cls, targets_list, index_list, dtype=torch.float32):
        """Gather rows ``index_list[i]`` of each image's AnchorTargets."""
        pos, box, av, has, ccw, ds2 = [], [], [], [], [], []
        for t, idx in zip(targets_list, index_list):
            idx = np.asarray(idx, dtype=np.int64)
            p = t.labels[idx] == POSITIVE
            pos.append(p)
            box.append(t.box_targets[idx])
            value = t.angle_value[idx]
            h = p & np.isfinite(value) & (t.direction[idx] != NO_DIRECTION)
            has.append(h)
            av.append(np.where(h, value, 0.0))
            ccw.append((t.direction[idx] == 1).astype(np.float64))
            ds2.append(np.full(len(idx), t.origin == Origin.DS2))
        cat = np.concatenate
        return cls(
            positive=torch.from_numpy(cat(pos)),
            box=torch.as_tensor(cat(box).reshape(-1, 4), dtype=dtype),
            angle_value=torch.as_tensor(cat(av), dtype=dtype),
            has_angle=torch.from_numpy(cat(has)),
            ccw=torch.as_tensor(cat(ccw), dtype=dtype),
            ds2=torch.from_numpy(cat(ds2)),
        )


def softmax2(z0, z1):
    """Two-way softmax of a pair of logits, stable for large inputs."""
    m = max(z0, z1)
    e0, e1 = math.exp(z0 - m), math.exp(z1 - m)
    s = e0 + e1
    return e0 / s, e1 / s


def sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def huber(a, delta=1.0):
    absa = a.abs()
    return torch.where(absa <= delta, 0.5 * a * a, delta * absa - 0.5 * delta * delta)


def focal_from_log(log_pt, gamma=2.0):
    """Focal loss ``-(1 - p_t)^gamma * ln(p_t)`` given ``ln(p_t)``; p_t floored at 1e-7."""
    log_pt = torch.clamp(log_pt, min=math.log(PT_FLOOR))
    pt = torch.exp(log_pt)
    return -((1.0 - pt) ** gamma) * log_pt


def _zero(raw):
    return raw.sum() * 0.0


def loss_loc(raw, t, delta=1.0):
    """Mean over positive rows of the summed Huber box residuals."""
    if not bool(t.positive.any()):
        return _zero(raw)
    resid = t.box[t.positive] - raw[t.positive, BOX]
    return huber(resid, delta).sum() / t.positive.sum()


def loss_obj(raw, t, gamma=2.0):
    """Mean focal loss on objectness over all sampled rows."""
    if len(t) == 0:
        return _zero(raw)
    logp = F.log_softmax(raw[:, OBJ], dim=1)
    log_pt = torch.where(t.positive, logp[:, 1], logp[:, 0])
    return focal_from_log(log_pt, gamma).mean()


def loss_angle_value(raw, t, lam_ds1=10.0, lam_ds2=0.0):
    """Squared error of the sigmoid angle value on positive rows.

    Angle-labeled positives regress toward their target; positives from
    box-only images are pulled toward zero with weight ``lam_ds2``.
    """
    n = int(t.positive.sum())
    if n == 0:
        return _zero(raw)
    value = torch.sigmoid(raw[:, ANGLE])
    ds1_term = (0.5 * (t.angle_value - value) ** 2)[t.has_angle].sum()
    ds2_rows = t.positive & t.ds2
    total = lam_ds1 * ds1_term
    if lam_ds2 != 0.0:
        total = total + lam_ds2 * (0.5 * value ** 2)[ds2_rows].sum()
    return total / n


def loss_angle_dir(raw, t, epsilon=0.025, gamma=2.0):
    """Focal loss on rotation direction over labeled positives with value above ``epsilon``."""
    rows = t.has_angle & (t.angle_value.abs() > epsilon)
    if not bool(rows.any()):
        return _zero(raw)
    logp = F.log_softmax(raw[rows][:, DIR], dim=1)
    log_pt = torch.where(t.ccw[rows] > 0.5, logp[:, 1], logp[:, 0])
    return focal_from_log(log_pt, gamma).mean()


def loss_total(raw, t, weights=None):
    w = weights or LossWeights()
    loc = loss_loc(raw, t, w.delta)
    obj = loss_obj(raw, t, w.gamma)
    av = loss_angle_value(raw, t, w.ds1, w.ds2)
    ad = loss_angle_dir(raw, t, w.epsilon, w.gamma)
    total = w.loc * loc + w.obj * obj + w.angle_value * av + w.angle_dir * ad
    return LossBreakdown(loc, obj, av, ad, total)
