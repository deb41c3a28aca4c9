import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from ladrcnn.checkpoint import load_checkpoint
from ladrcnn.data import AugmentProbs, letterbox, stack_images
from ladrcnn.errors import NonFiniteLoss
from ladrcnn.losses import LossWeights, loss_total
from ladrcnn.network import NetworkConfig, build_model
from ladrcnn.synthetic import random_image
from ladrcnn.targets import Origin
from ladrcnn.trainer import LOG_HEADER, TrainConfig, batch_targets, learning_rate, train


def small_config():
    return NetworkConfig(input_size=96, block_widths=(4, 4, 8, 8, 8), neck_width=8,
                         anchor_base_sizes=(12, 24, 48, 96))


def dataset(n, seed, origin=Origin.DS1):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        s = random_image(rng, 96)
        s.origin = origin
        out.append(s)
    return out


def quick_train_config(**kw):
    base = TrainConfig(total_steps=6, batch1=2, batch2=1, warmup_steps=2, log_interval=1,
                       aug_ds1=AugmentProbs(0.5, 0.5, 0.5, 0.5, 0.0),
                       aug_ds2=AugmentProbs(0.5, 0.5, 0.0, 0.5, 0.0))
    return replace(base, **kw)


def state_bytes(model):
    return b"".join(v.numpy().tobytes() for k, v in model.state_dict().items()
                    if not k.endswith("num_batches_tracked"))


DS1 = dataset(6, 0)
DS2 = dataset(4, 1, Origin.DS2)


class TestSchedule:
    def test_warmup_and_cosine(self):
        cfg = TrainConfig(total_steps=1200, lr=1e-3, lr_min=1e-5, warmup_steps=200)
        assert learning_rate(0, cfg) == pytest.approx(5e-6)
        assert learning_rate(199, cfg) == pytest.approx(1e-3)
        assert learning_rate(200, cfg) == pytest.approx(1e-3)
        assert learning_rate(700, cfg) == pytest.approx((1e-3 + 1e-5) / 2)
        assert learning_rate(1200, cfg) == pytest.approx(1e-5)
        lrs = [learning_rate(s, cfg) for s in range(200, 1200)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))


class TestTrain:
    def test_zero_steps(self, tmp_path):
        m = build_model(small_config(), seed=0)
        before = state_bytes(m)
        res = train(m, DS1, DS2, quick_train_config(total_steps=0), log_path=tmp_path / "log.csv")
        assert state_bytes(res.model) == before
        assert res.history == []
        assert (tmp_path / "log.csv").read_text().strip() == ",".join(LOG_HEADER)

    def test_log_columns_and_rows(self, tmp_path):
        res = train(build_model(small_config(), seed=0), DS1, DS2, quick_train_config(),
                    log_path=tmp_path / "log.csv")
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0].split(",") == LOG_HEADER
        assert len(lines) == 7
        for row in lines[1:]:
            vals = [float(v) for v in row.split(",")]
            assert all(math.isfinite(v) and v >= 0 for v in vals)
        assert (tmp_path / "log.csv").read_text() == res.csv_text()

    def test_deterministic(self, tmp_path):
        torch.set_num_threads(1)
        logs, states = [], []
        for k in range(2):
            p = tmp_path / f"log{k}.csv"
            res = train(build_model(small_config(), seed=3), DS1, DS2, quick_train_config(seed=5),
                        log_path=p)
            logs.append(p.read_bytes())
            states.append(state_bytes(res.model))
        assert logs[0] == logs[1]
        assert states[0] == states[1]

    def test_seed_changes_run(self):
        a = train(build_model(small_config(), seed=3), DS1, DS2, quick_train_config(seed=1))
        b = train(build_model(small_config(), seed=3), DS1, DS2, quick_train_config(seed=2))
        assert a.csv_text() != b.csv_text()

    def test_ds1_only(self):
        res = train(build_model(small_config(), seed=0), DS1, [], quick_train_config(batch2=0))
        assert len(res.history) == 6

    def test_non_finite_loss(self):
        bad = dataset(2, 7)
        for s in bad:
            s.image = s.image.copy()
            s.image[0, 0, 0] = np.nan
        with pytest.raises(NonFiniteLoss) as e:
            train(build_model(small_config(), seed=0), bad, [], quick_train_config(batch1=1, batch2=0))
        assert e.value.step == 1

    def test_checkpoint_written(self, tmp_path):
        ck = tmp_path / "m.ckpt"
        res = train(build_model(small_config(), seed=0), DS1, DS2, quick_train_config(), checkpoint_path=ck)
        m2 = load_checkpoint(ck)
        assert state_bytes(m2) == state_bytes(res.model)


def test_zero_direction_weight_gives_zero_direction_gradient():
    cfg = small_config()
    m = build_model(cfg, seed=0)
    tcfg = TrainConfig(weights=LossWeights(angle_dir=0.0))
    batch = [letterbox(s, 96)[0] for s in DS1[:3]]
    ii, aa, t = batch_targets(batch, cfg.anchors().boxes, tcfg, np.random.default_rng(0))
    assert bool(t.has_angle.any())
    m.zero_grad()
    loss_total(m(torch.from_numpy(stack_images(batch)))[ii, aa], t, tcfg.weights).total.backward()
    g = m.head.conv.weight.grad.view(6, 9, -1)
    gb = m.head.conv.bias.grad.view(6, 9)
    assert float(g[:, 6:8].abs().max()) == 0.0
    assert float(gb[:, 6:8].abs().max()) == 0.0
    assert float(g[:, 8].abs().max()) > 0.0
