import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ladrcnn.boxes import generate_anchors, iou_matrix, xywh_to_xyxy, xyxy_to_xywh
from ladrcnn.losses import (
    LossWeights,
    SampledTargets,
    focal_from_log,
    huber,
    loss_angle_dir,
    loss_angle_value,
    loss_loc,
    loss_obj,
    loss_total,
    sigmoid,
    softmax2,
)
from ladrcnn.targets import IGNORED, NEGATIVE, POSITIVE, Origin, assign_targets, sample_minibatch

LN3 = math.log(3.0)


def make_targets(n, positive=None, box=None, angle_value=None, has_angle=None, ccw=None, ds2=None):
    f64 = torch.float64
    z = torch.zeros(n, dtype=torch.bool)
    return SampledTargets(
        positive=torch.as_tensor(positive, dtype=torch.bool) if positive is not None else z.clone(),
        box=torch.as_tensor(box, dtype=f64) if box is not None else torch.zeros(n, 4, dtype=f64),
        angle_value=torch.as_tensor(angle_value, dtype=f64) if angle_value is not None else torch.zeros(n, dtype=f64),
        has_angle=torch.as_tensor(has_angle, dtype=torch.bool) if has_angle is not None else z.clone(),
        ccw=torch.as_tensor(ccw, dtype=f64) if ccw is not None else torch.zeros(n, dtype=f64),
        ds2=torch.as_tensor(ds2, dtype=torch.bool) if ds2 is not None else z.clone(),
    )


def logit(p):
    return math.log(p / (1 - p))


class TestActivations:
    def test_softmax2(self):
        assert softmax2(0, 0) == (0.5, 0.5)
        p = softmax2(LN3, 0)
        assert p[0] == pytest.approx(0.75, abs=1e-15) and p[1] == pytest.approx(0.25, abs=1e-15)
        p = softmax2(1000, 0)
        assert p[0] == pytest.approx(1.0) and p[1] >= 0 and all(map(math.isfinite, p))

    def test_sigmoid(self):
        assert sigmoid(0) == 0.5
        assert sigmoid(LN3) == pytest.approx(0.75, abs=1e-15)
        assert sigmoid(-LN3) == pytest.approx(0.25, abs=1e-15)
        assert sigmoid(-1000) == 0.0 and sigmoid(1000) == 1.0


class TestElementary:
    def test_huber(self):
        v = huber(torch.tensor([0.5, 2.0, -2.0, 0.0], dtype=torch.float64))
        np.testing.assert_allclose(v.numpy(), [0.125, 1.5, 1.5, 0.0], atol=1e-15)

    def test_focal(self):
        fl = lambda p: float(focal_from_log(torch.log(torch.tensor(p, dtype=torch.float64))))
        assert fl(1.0) == 0.0
        assert fl(0.5) == pytest.approx(-0.25 * math.log(0.5), abs=1e-12)
        assert fl(0.5) == pytest.approx(0.17329, abs=1e-5)
        assert fl(0.1) == pytest.approx(1.86509, abs=1e-5)
        assert math.isfinite(fl(0.0))


class TestLossExamples:
    def test_loc(self):
        t = make_targets(1, positive=[True], box=[[0.5, 0, 0, 0]])
        raw = torch.zeros(1, 9, dtype=torch.float64)
        assert float(loss_loc(raw, t)) == pytest.approx(0.125, abs=1e-12)
        t = make_targets(1, positive=[True], box=[[0, 0, 2.0, 0]])
        assert float(loss_loc(raw, t)) == pytest.approx(1.5, abs=1e-12)
        raw2 = torch.zeros(1, 9, dtype=torch.float64)
        raw2[0, 2] = 2.0
        assert float(loss_loc(raw2, t)) == 0.0
        assert float(loss_loc(raw, make_targets(1))) == 0.0

    def test_obj(self):
        raw = torch.zeros(1, 9, dtype=torch.float64)
        t = make_targets(1, positive=[True])
        assert float(loss_obj(raw, t)) == pytest.approx(0.17329, abs=1e-5)
        raw[0, 5] = logit(0.9)  # fg probability 0.9
        t = make_targets(1, positive=[False])
        assert float(loss_obj(raw, t)) == pytest.approx(-0.81 * math.log(0.1), abs=1e-9)
        raw[0, 5] = 60.0
        assert float(loss_obj(raw, make_targets(1, positive=[True]))) == pytest.approx(0.0, abs=1e-20)

    def test_angle_value(self):
        raw = torch.zeros(1, 9, dtype=torch.float64)
        raw[0, 8] = logit(0.3)
        t = make_targets(1, positive=[True], angle_value=[0.5], has_angle=[True])
        assert float(loss_angle_value(raw, t)) == pytest.approx(0.2, abs=1e-12)
        raw[0, 8] = logit(0.4)
        t = make_targets(1, positive=[True], ds2=[True])
        assert float(loss_angle_value(raw, t, 10.0, 1.0)) == pytest.approx(0.08, abs=1e-12)
        assert float(loss_angle_value(raw, t)) == 0.0
        raw[0, 8] = logit(0.5)
        t = make_targets(1, positive=[True], angle_value=[0.5], has_angle=[True])
        assert float(loss_angle_value(raw, t)) == pytest.approx(0.0, abs=1e-15)

    def test_angle_dir(self):
        raw = torch.zeros(2, 9, dtype=torch.float64)
        t = make_targets(2, positive=[True, True], angle_value=[0.3, 0.01],
                         has_angle=[True, True], ccw=[1.0, 0.0])
        assert float(loss_angle_dir(raw, t)) == pytest.approx(0.17329, abs=1e-5)
        raw[0, 7] = 60.0
        assert float(loss_angle_dir(raw, t)) == pytest.approx(0.0, abs=1e-20)
        t_small = make_targets(1, positive=[True], angle_value=[0.01], has_angle=[True], ccw=[1.0])
        assert float(loss_angle_dir(torch.zeros(1, 9, dtype=torch.float64), t_small)) == 0.0

    def test_total_weighting(self):
        w = LossWeights()
        parts = (0.1, 0.2, 0.3, 0.05)
        total = w.loc * parts[0] + w.obj * parts[1] + w.angle_value * parts[2] + w.angle_dir * parts[3]
        assert total == pytest.approx(1.9, abs=1e-12)
        raw = torch.randn(5, 9, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
        t = make_targets(5, positive=[True, True, False, False, True], box=torch.randn(5, 4, dtype=torch.float64),
                         angle_value=[0.2, 0.7, 0, 0, 0.5], has_angle=[True, True, False, False, True],
                         ccw=[1, 0, 0, 0, 1])
        b = loss_total(raw, t)
        recombined = b.loc + 5 * b.obj + b.angle_value + 10 * b.angle_dir
        assert float(b.total) == pytest.approx(float(recombined), abs=1e-12)
        zero = loss_total(raw, t, LossWeights(0, 0, 0, 0))
        assert float(zero.total) == 0.0

    def test_all_perfect_is_zero(self):
        raw = torch.zeros(3, 9, dtype=torch.float64)
        box = torch.tensor([[0.3, -0.2, 0.1, 0.0], [0, 0, 0, 0], [0, 0, 0, 0]], dtype=torch.float64)
        raw[:, 0:4] = box
        raw[:, 4] = torch.tensor([-60.0, 60.0, 60.0])    # bg logits
        raw[:, 5] = -raw[:, 4]
        raw[0, 8] = logit(0.25)
        raw[0, 7] = 60.0                                  # ccw
        raw[0, 6] = -60.0
        t = make_targets(3, positive=[True, False, False], box=box, angle_value=[0.25, 0, 0],
                         has_angle=[True, False, False], ccw=[1, 0, 0])
        b = loss_total(raw, t)
        assert float(b.total) == pytest.approx(0.0, abs=1e-12)


def random_case(seed, n=40):
    g = torch.Generator().manual_seed(seed)
    raw = torch.randn(n, 9, dtype=torch.float64, generator=g)
    pos = torch.rand(n, generator=g) < 0.5
    ds2 = (torch.rand(n, generator=g) < 0.3)
    has = pos & ~ds2
    value = torch.where(has, torch.rand(n, generator=g, dtype=torch.float64), torch.zeros(n, dtype=torch.float64))
    value[0] = 0.01   # below epsilon
    has[0] = True
    pos[0] = True
    ds2[0] = False
    ccw = (torch.rand(n, generator=g) < 0.5).double()
    box = torch.randn(n, 4, dtype=torch.float64, generator=g) * 0.4
    t = SampledTargets(pos, box, value, has, ccw, ds2)
    return raw, t


class TestMasking:
    @pytest.mark.parametrize("seed", range(5))
    def test_small_value_direction_logits_ignored(self, seed):
        raw, t = random_case(seed)
        base = loss_total(raw, t).as_floats()
        rows = ~(t.has_angle & (t.angle_value.abs() > 0.025))
        raw2 = raw.clone()
        raw2[rows, 6:8] += torch.randn(int(rows.sum()), 2, dtype=torch.float64) * 5
        assert loss_total(raw2, t).as_floats() == base

    @pytest.mark.parametrize("seed", range(5))
    def test_ds2_angle_logits_ignored(self, seed):
        raw, t = random_case(seed)
        base = loss_total(raw, t).as_floats()
        raw2 = raw.clone()
        raw2[t.ds2, 8] += torch.randn(int(t.ds2.sum()), dtype=torch.float64) * 5
        assert loss_total(raw2, t).as_floats() == base


def central_diff(f, x, eps):
    g = torch.zeros_like(x)
    flat = x.view(-1)
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + eps
        up = float(f(x))
        flat[i] = orig - eps
        down = float(f(x))
        flat[i] = orig
        g.view(-1)[i] = (up - down) / (2 * eps)
    return g


@pytest.mark.parametrize("seed", range(3))
def test_loss_gradient_wrt_raw(seed):
    raw, t = random_case(seed, n=30)
    # keep Huber residuals away from the branch point
    resid = t.box - raw[:, 0:4]
    raw[:, 0:4] += torch.where((resid.abs() - 1).abs() < 0.05, 0.2, 0.0)
    x = raw.clone().requires_grad_(True)
    loss_total(x, t).total.backward()
    with torch.no_grad():
        num = central_diff(lambda r: loss_total(r, t).total, raw.clone(), 1e-4)
    a, n = x.grad.numpy(), num.numpy()
    rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    assert rel.max() < 1e-5


class TestAssign:
    anchors = generate_anchors(64, [16], [16], scales=[1.0], ratios=[1.0]).boxes

    def test_exact_match(self):
        gt = xywh_to_xyxy(self.anchors[5])[None]
        t = assign_targets(gt, self.anchors, [0.25])
        assert t.labels[5] == POSITIVE
        np.testing.assert_allclose(t.box_targets[5], 0, atol=1e-12)
        assert t.angle_value[5] == 0.25 and t.direction[5] == 1
        assert len(t.positives) == 1

    def test_forced_positive(self):
        gt = np.array([[10.0, 10.0, 19.0, 30.0]])
        ious = iou_matrix(self.anchors, xyxy_to_xywh(gt))[:, 0]
        assert ious.max() < 0.5
        t = assign_targets(gt, self.anchors, [-0.5])
        assert list(t.positives) == [int(np.argmax(ious))]
        assert t.direction[t.positives[0]] == 0

    def test_empty(self):
        t = assign_targets(np.zeros((0, 4)), self.anchors)
        assert np.all(t.labels == NEGATIVE)

    def test_ds2_has_no_angles(self):
        gt = xywh_to_xyxy(self.anchors[5])[None]
        t = assign_targets(gt, self.anchors, [0.25], origin=Origin.DS2)
        assert np.all(np.isnan(t.angle_value)) and np.all(t.direction == -1)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 50), st.floats(0, 50), st.floats(4, 40), st.floats(4, 40)),
                    min_size=1, max_size=5))
    def test_every_gt_trains(self, raw_boxes):
        gt = np.array([[x, y, x + w, y + h] for x, y, w, h in raw_boxes])
        t = assign_targets(gt, self.anchors)
        ious = iou_matrix(self.anchors, xyxy_to_xywh(gt))
        best = ious.max(axis=1)
        assert np.all(t.labels[best >= 0.5] == POSITIVE)
        free = t.labels != POSITIVE
        assert np.all(t.labels[free & (best < 0.4)] == NEGATIVE)
        assert np.all(t.labels[free & (best >= 0.4)] == IGNORED)
        for g in range(len(gt)):
            if not np.any(t.matched_gt == g):
                # only when every overlapping anchor already serves another box
                assert np.all(t.labels[ious[:, g] > 0] == POSITIVE)


class TestSampling:
    @staticmethod
    def targets(n_pos, n_neg):
        n = n_pos + n_neg
        labels = np.array([POSITIVE] * n_pos + [NEGATIVE] * n_neg, dtype=np.int8)
        from ladrcnn.targets import AnchorTargets
        return AnchorTargets(labels, np.zeros(n, int), np.zeros((n, 4)), np.full(n, np.nan),
                             np.full(n, -1, np.int8), Origin.DS1)

    def test_counts(self):
        t = self.targets(3, 1000)
        idx = sample_minibatch(t, 0)
        assert len(idx) == 256 and np.sum(t.labels[idx] == POSITIVE) == 3
        t = self.targets(0, 1000)
        assert len(sample_minibatch(t, 0)) == 256
        t = self.targets(400, 1000)
        for seed in range(5):
            idx = sample_minibatch(t, seed)
            assert np.sum(t.labels[idx] == POSITIVE) == 128 and len(idx) == 256

    def test_deterministic(self):
        t = self.targets(400, 1000)
        assert np.array_equal(sample_minibatch(t, 7), sample_minibatch(t, 7))
