"""Training loop and finite-difference gradient check."""

import copy
import csv
import io
import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .data import AugmentProbs, dual_batch_iterator, stack_images
from .errors import NonFiniteLoss
from .losses import PT_FLOOR, LossWeights, SampledTargets, loss_total
from .targets import assign_targets, sample_minibatch

log = logging.getLogger(__name__)

LOG_HEADER = ["step", "loss_total", "loss_loc", "loss_obj", "loss_av", "loss_ad", "lr"]


@dataclass
class TrainConfig:
    total_steps: int = 50000
    lr: float = 1e-3
    lr_min: float = 1e-5
    warmup_steps: int = 200
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0
    grad_clip: float = 10.0
    weights: LossWeights = field(default_factory=LossWeights)
    batch1: int = 7
    batch2: int = 5
    minibatch_size: int = 256
    pos_fraction: float = 0.5
    pos_iou: float = 0.5
    neg_iou: float = 0.4
    aug_ds1: AugmentProbs = field(default_factory=lambda: AugmentProbs(0.5, 0.5, 0.5, 0.8, 0.0))
    aug_ds2: AugmentProbs = field(default_factory=lambda: AugmentProbs(0.5, 0.5, 0.0, 0.8, 0.0))
    seed: int = 0
    log_interval: int = 10
    checkpoint_interval: int = 0


def learning_rate(step, cfg):
    """Linear warmup then cosine decay from ``lr`` to ``lr_min``; ``step`` is 0-based."""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    span = max(1, cfg.total_steps - cfg.warmup_steps)
    progress = min(1.0, (step - cfg.warmup_steps) / span)
    return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + math.cos(math.pi * progress))


def batch_targets(batch, anchors, cfg, rng, dtype=torch.float32):
    """Assign and sample anchors for every image; returns (image index, anchor index, targets)."""
    per_image, picks = [], []
    for s in batch:
        t = assign_targets(s.boxes(), anchors, s.angles(), s.origin, cfg.pos_iou, cfg.neg_iou)
        per_image.append(t)
        picks.append(sample_minibatch(t, rng, cfg.minibatch_size, cfg.pos_fraction))
    img_idx = np.concatenate([np.full(len(p), i) for i, p in enumerate(picks)])
    anc_idx = np.concatenate(picks)
    return (torch.from_numpy(img_idx.astype(np.int64)), torch.from_numpy(anc_idx.astype(np.int64)),
            SampledTargets.from_anchor_targets(per_image, picks, dtype))


def _format_row(step, parts, lr):
    vals = [parts["total"], parts["loc"], parts["obj"], parts["angle_value"], parts["angle_dir"], lr]
    return [str(step)] + [repr(float(v)) for v in vals]


@dataclass
class TrainResult:
    model: torch.nn.Module
    history: list       # per-step dict of loss floats
    log_rows: list      # rows written to the CSV log

    def csv_text(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_HEADER)
        w.writerows(self.log_rows)
        return buf.getvalue()


def train(model, ds1, ds2, cfg, log_path=None, checkpoint_path=None):
    """Optimize ``model`` on the two datasets for ``cfg.total_steps`` steps.

    Deterministic for a given seed on a fixed thread count. Raises
    NonFiniteLoss naming the step and the first diverging component.
    """
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    mcfg = model.config
    anchors = mcfg.anchors().boxes
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=tuple(cfg.betas),
                           weight_decay=cfg.weight_decay)
    history, rows = [], []
    log_file = None
    if log_path:
        log_file = open(log_path, "w", newline="")
        writer = csv.writer(log_file, lineterminator="\n")
        writer.writerow(LOG_HEADER)
    try:
        if cfg.total_steps > 0:
            batches = dual_batch_iterator(ds1, ds2, cfg.batch1, cfg.batch2, int(rng.integers(2**31)),
                                          mcfg.input_size, mcfg.input_channels, cfg.aug_ds1, cfg.aug_ds2)
        model.train()
        for step in range(cfg.total_steps):
            lr = learning_rate(step, cfg)
            for g in opt.param_groups:
                g["lr"] = lr
            batch = next(batches)
            x = torch.from_numpy(stack_images(batch))
            img_idx, anc_idx, targets = batch_targets(batch, anchors, cfg, rng)
            raw = model(x)[img_idx, anc_idx]
            losses = loss_total(raw, targets, cfg.weights)
            parts = losses.as_floats()
            for name in ("loc", "obj", "angle_value", "angle_dir", "total"):
                if not math.isfinite(parts[name]):
                    raise NonFiniteLoss(step + 1, name)
            opt.zero_grad(set_to_none=True)
            losses.total.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            history.append(parts)
            n = step + 1
            if cfg.log_interval and (n % cfg.log_interval == 0 or n == cfg.total_steps):
                row = _format_row(n, parts, lr)
                rows.append(row)
                if log_file:
                    writer.writerow(row)
                    log_file.flush()
                log.info("step %d total %.4f", n, parts["total"])
            if checkpoint_path and cfg.checkpoint_interval and n % cfg.checkpoint_interval == 0:
                save_checkpoint(model, checkpoint_path)
    finally:
        if log_file:
            log_file.close()
    model.eval()
    if checkpoint_path:
        save_checkpoint(model, checkpoint_path)
    return TrainResult(model, history, rows)


def _cast(t, dtype):
    return t.to(dtype) if t.is_floating_point() else t


def grad_check(model, batch, cfg=None, num_params=200, eps=1e-4, seed=0, floor=1e-5,
               guard=10.0, numeric_dtype=None, normwise=False, return_details=False):
    """Largest relative error between autograd and central differences.

    Checks ``num_params`` randomly chosen scalar parameters with relative
    error ``|a - n| / max(|a|, |n|, floor)``. Anchor sampling is fixed before
    differencing. Parameters within ``guard * eps`` of a kink (a change in
    any ReLU active set, Huber branch or focal floor) are skipped and
    replaced by fresh draws, since the loss is not differentiable there.

    With ``numeric_dtype`` set, the differences are taken on a copy of the
    model cast to that dtype, so a float32 gradient can be checked against
    a reference free of float32 rounding noise. ``normwise`` raises the
    floor to the largest gradient magnitude, giving the normwise error
    ``|a - n| / max|grad|`` that suits 32-bit arithmetic.
    """
    cfg = cfg or TrainConfig()
    rng = np.random.default_rng(seed)
    dtype = next(model.parameters()).dtype
    anchors = model.config.anchors().boxes
    images = torch.from_numpy(stack_images(batch))
    img_idx, anc_idx, targets = batch_targets(batch, anchors, cfg, rng, dtype)
    model.train()
    model.zero_grad(set_to_none=True)
    loss_total(model(images.to(dtype))[img_idx, anc_idx], targets, cfg.weights).total.backward()
    analytic_grads = [p.grad for p in model.parameters()]
    if normwise:
        floor = max(floor, max(float(g.abs().max()) for g in analytic_grads if g is not None))

    ref = model
    if numeric_dtype is not None and numeric_dtype != dtype:
        ref = copy.deepcopy(model).to(numeric_dtype)
        targets = SampledTargets(**{f.name: _cast(getattr(targets, f.name), numeric_dtype)
                                    for f in fields(targets)})
    x = images.to(next(ref.parameters()).dtype)
    masks = []

    def record(_module, inputs, _output):
        masks.append(inputs[0] > 0)

    def probe():
        masks.clear()
        raw = ref(x)[img_idx, anc_idx]
        value = float(loss_total(raw, targets, cfg.weights).total)
        # Huber branch and focal floor are kinks of the loss itself
        resid = (targets.box - raw[:, 0:4]).abs() <= cfg.weights.delta
        floored = torch.log_softmax(raw[:, 4:8].reshape(-1, 2, 2), dim=2) < math.log(PT_FLOOR)
        return value, list(masks) + [resid, floored]

    params = list(ref.parameters())
    sizes = np.array([p.numel() for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    order = rng.permutation(int(sizes.sum()))
    hooks = [m.register_forward_hook(record) for m in ref.modules() if isinstance(m, torch.nn.ReLU)]
    worst, checked, skipped = 0.0, 0, 0
    try:
        with torch.no_grad():
            for f in order:
                if checked >= num_params:
                    break
                k = int(np.searchsorted(offsets, f, side="right") - 1)
                p, i = params[k], int(f - offsets[k])
                view = p.view(-1)
                g = analytic_grads[k]
                analytic = float(g.view(-1)[i]) if g is not None else 0.0
                orig = float(view[i])
                view[i] = orig + guard * eps
                _, mask_up = probe()
                view[i] = orig - guard * eps
                _, mask_down = probe()
                if any(not torch.equal(a, b) for a, b in zip(mask_up, mask_down)):
                    view[i] = orig
                    skipped += 1
                    continue
                view[i] = orig + eps
                up, _ = probe()
                view[i] = orig - eps
                down, _ = probe()
                view[i] = orig
                numeric = (up - down) / (2 * eps)
                err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
                worst = max(worst, err)
                checked += 1
    finally:
        for h in hooks:
            h.remove()
    if return_details:
        return worst, checked, skipped
    return worst
