"""The detector graph: CBA backbone, top-down neck and shared head."""

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .boxes import BACKBONE_STRIDE, DEFAULT_RATIOS, DEFAULT_SCALES, generate_anchors
from .errors import ConfigError
from .losses import NUM_OUTPUTS

PYRAMID_STRIDES = (8, 16, 32, 64)


@dataclass
class NetworkConfig:
    input_size: int = 96
    input_channels: int = 3
    block_widths: tuple = (24, 32, 48, 64, 64)
    neck_width: int = 64
    preset: str = "desk"
    anchor_base_sizes: tuple = (12.0, 24.0, 48.0, 96.0)
    anchor_scales: tuple = DEFAULT_SCALES
    anchor_ratios: tuple = DEFAULT_RATIOS

    def __post_init__(self):
        self.block_widths = tuple(int(w) for w in self.block_widths)
        self.anchor_base_sizes = tuple(float(b) for b in self.anchor_base_sizes)
        self.anchor_scales = tuple(float(s) for s in self.anchor_scales)
        self.anchor_ratios = tuple(float(r) for r in self.anchor_ratios)

    @property
    def anchors_per_cell(self):
        return len(self.anchor_scales) * len(self.anchor_ratios)

    @property
    def head_channels(self):
        return NUM_OUTPUTS * self.anchors_per_cell

    def validate(self):
        if self.input_size <= 0 or self.input_size % BACKBONE_STRIDE:
            raise ConfigError(f"input size {self.input_size} must be a positive multiple of {BACKBONE_STRIDE}")
        if self.input_channels not in (1, 3):
            raise ConfigError("input_channels must be 1 or 3")
        if len(self.block_widths) != 5 or min(self.block_widths) <= 0:
            raise ConfigError("block_widths needs 5 positive channel counts")
        if self.neck_width <= 0:
            raise ConfigError("neck_width must be positive")
        if len(self.anchor_base_sizes) != len(PYRAMID_STRIDES):
            raise ConfigError(f"need {len(PYRAMID_STRIDES)} anchor base sizes")
        return self

    def anchors(self):
        return generate_anchors(self.input_size, PYRAMID_STRIDES, self.anchor_base_sizes,
                                self.anchor_scales, self.anchor_ratios)

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


def full_config(input_size=416, input_channels=3):
    # Widths picked so the parameter count lands near 2.82M.
    return NetworkConfig(
        input_size=input_size,
        input_channels=input_channels,
        block_widths=(32, 48, 72, 104, 120),
        neck_width=96,
        preset="full",
        anchor_base_sizes=(32.0, 64.0, 128.0, 256.0),
    )


def desk_config(input_size=96, input_channels=3):
    # Narrower widths train boxes fine but leave orientation underfit in 2000 steps.
    return NetworkConfig(input_size=input_size, input_channels=input_channels)


PRESETS = {"full": full_config, "desk": desk_config}


class CBA(nn.Sequential):
    """Convolution, batch normalization, ReLU."""

    def __init__(self, c_in, c_out, kernel=3, stride=1):
        super().__init__(
            nn.Conv2d(c_in, c_out, kernel, stride=stride, padding=kernel // 2, bias=False),
            nn.BatchNorm2d(c_out),
            nn.ReLU(inplace=False),
        )


class Backbone(nn.Module):
    """Five CBA blocks (2 + 3 + 3 + 3 + 3); returns the stride 8/16/32 outputs."""

    def __init__(self, in_channels, widths):
        super().__init__()
        w1 = widths[0]
        blocks = [nn.Sequential(CBA(in_channels, w1, 7, 2), CBA(w1, w1))]
        c_in = w1
        for w in widths[1:]:
            blocks.append(nn.Sequential(CBA(c_in, w, 3, 2), CBA(w, w), CBA(w, 4 * w)))
            c_in = 4 * w
        self.blocks = nn.ModuleList(blocks)
        self.out_channels = tuple(4 * w for w in widths[2:])

    def forward(self, x):
        outs = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i >= 2:
                outs.append(x)
        return outs


class Neck(nn.Module):
    """Lateral projections, nearest-neighbour top-down additions, extra stride-64 map."""

    def __init__(self, in_channels, width):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(c, width, 1) for c in in_channels)
        self.smooth = nn.ModuleList(nn.Conv2d(width, width, 3, padding=1) for _ in in_channels)
        self.extra = nn.Conv2d(width, width, 3, stride=2, padding=1)

    def forward(self, feats):
        lat = [conv(f) for conv, f in zip(self.lateral, feats)]
        merged = [lat[-1]]
        for f in reversed(lat[:-1]):
            up = F.interpolate(merged[0], size=f.shape[-2:], mode="nearest")
            merged.insert(0, f + up)
        out = [conv(m) for conv, m in zip(self.smooth, merged)]
        out.append(self.extra(lat[-1]))
        return out


class Head(nn.Module):
    """One 3x3 convolution shared by all pyramid levels."""

    def __init__(self, width, anchors_per_cell):
        super().__init__()
        self.k = anchors_per_cell
        self.conv = nn.Conv2d(width, NUM_OUTPUTS * anchors_per_cell, 3, padding=1)

    def forward(self, maps):
        rows = []
        for m in maps:
            y = self.conv(m)
            n, _, h, w = y.shape
            rows.append(y.permute(0, 2, 3, 1).reshape(n, h * w * self.k, NUM_OUTPUTS))
        return torch.cat(rows, dim=1)


class LADRCNN(nn.Module):
    def __init__(self, config=None):
        super().__init__()
        self.config = (config or NetworkConfig()).validate()
        cfg = self.config
        self.backbone = Backbone(cfg.input_channels, cfg.block_widths)
        self.neck = Neck(self.backbone.out_channels, cfg.neck_width)
        self.head = Head(cfg.neck_width, cfg.anchors_per_cell)
        self.reset_parameters()

    def reset_parameters(self, obj_prior=0.01):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        # small head weights plus a background-favouring objectness bias keep
        # the first focal-loss steps from being dominated by easy negatives
        head = self.head.conv
        nn.init.normal_(head.weight, std=0.01)
        bias = head.bias.detach().view(self.config.anchors_per_cell, NUM_OUTPUTS)
        bias[:, 5] = math.log(obj_prior / (1.0 - obj_prior))

    def pyramid(self, x):
        return self.neck(self.backbone(x))

    def forward(self, x):
        """Raw predictions (N, num_anchors, 9) for images (N, C, S, S)."""
        return self.head(self.pyramid(x))

    def num_parameters(self):
        return sum(p.numel() for p in self.parameters())


def build_model(config=None, preset=None, seed=None):
    if config is None:
        config = PRESETS[preset or "desk"]()
    if seed is not None:
        torch.manual_seed(seed)
    return LADRCNN(config)


@torch.no_grad()
def calibrate_batchnorm(model, x):
    """Set every BN running mean/var to the (biased) statistics of batch ``x``.

    Afterwards train-mode and eval-mode forward passes on ``x`` agree.
    """
    stats = {}

    def hook(module, inputs, _output):
        inp = inputs[0]
        stats[module] = (inp.mean(dim=(0, 2, 3)), inp.var(dim=(0, 2, 3), unbiased=False))

    bns = [m for m in model.modules() if isinstance(m, nn.BatchNorm2d)]
    handles = [bn.register_forward_hook(hook) for bn in bns]
    was_training = model.training
    try:
        model.train()
        model(x)
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    for bn in bns:
        mean, var = stats[bn]
        bn.running_mean.copy_(mean)
        bn.running_var.copy_(var)
