"""Run configuration: one JSON file covering network, augmentation, losses, training and inference.

Layout::

    {
      "network": {"preset": "desk", ...NetworkConfig fields},
      "augment": {"ds1": {...AugmentProbs}, "ds2": {...AugmentProbs}},
      "loss":    {...LossWeights},
      "train":   {...TrainConfig scalars},
      "infer":   {...InferConfig}
    }

Every section and every key is optional; missing values take the defaults.
Keys starting with ``_`` are comments. Any other unknown key is an error.
"""

import json
from dataclasses import asdict, dataclass, field, fields, replace

from .data import AugmentProbs
from .errors import ConfigError
from .losses import LossWeights
from .network import PRESETS, NetworkConfig, full_config
from .trainer import TrainConfig

SECTIONS = ("network", "augment", "loss", "train", "infer")


@dataclass
class InferConfig:
    score_thresh: float = 0.5
    nms_iou: float = 0.5
    max_detections: int = 100
    normalize_size: int = 224
    normalize_margin: float = 0.1


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=full_config)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)

    def to_dict(self):
        t = self.train
        scalars = {f.name: getattr(t, f.name) for f in fields(TrainConfig)
                   if f.name not in ("weights", "aug_ds1", "aug_ds2")}
        scalars["betas"] = list(scalars["betas"])
        return {
            "network": self.network.to_dict(),
            "augment": {"ds1": asdict(t.aug_ds1), "ds2": asdict(t.aug_ds2)},
            "loss": asdict(t.weights),
            "train": scalars,
            "infer": asdict(self.infer),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


def _strip(d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    return {k: v for k, v in d.items() if not k.startswith("_")}


def _build(cls, d, where, base=None):
    d = _strip(d, where)
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")
    try:
        return replace(base, **d) if base is not None else cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value in {where}: {e}") from None


def from_dict(doc):
    doc = _strip(doc, "config")
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config sections: {unknown}")

    net = _strip(doc.get("network", {}), "network")
    preset = net.get("preset", "full")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    network = _build(NetworkConfig, net, "network", PRESETS[preset]()).validate()

    aug = _strip(doc.get("augment", {}), "augment")
    bad = sorted(set(aug) - {"ds1", "ds2"})
    if bad:
        raise ConfigError(f"unknown keys in augment: {bad}")
    base = TrainConfig()
    aug1 = _build(AugmentProbs, aug.get("ds1", {}), "augment.ds1", base.aug_ds1)
    aug2 = _build(AugmentProbs, aug.get("ds2", {}), "augment.ds2", base.aug_ds2)
    weights = _build(LossWeights, doc.get("loss", {}), "loss", LossWeights())

    tr = _strip(doc.get("train", {}), "train")
    for k in ("weights", "aug_ds1", "aug_ds2"):
        if k in tr:
            raise ConfigError(f"train.{k} is not allowed; use the loss/augment sections")
    train = _build(TrainConfig, tr, "train", base)
    train = replace(train, weights=weights, aug_ds1=aug1, aug_ds2=aug2, betas=tuple(train.betas))
    infer = _build(InferConfig, doc.get("infer", {}), "infer", InferConfig())
    return RunConfig(network, train, infer)


def load_config(path=None, overrides=()):
    """Read a JSON config (defaults when ``path`` is None) and apply ``section.key=value`` overrides."""
    doc = {}
    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from None
    for item in overrides:
        apply_override(doc, item)
    return from_dict(doc)


def apply_override(doc, item):
    """Set ``section.key=value`` (or ``augment.ds1.key=value``) in a raw config dict.

    The value is parsed as JSON when possible, otherwise kept as a string.
    """
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form section.key=value")
    path, raw = item.split("=", 1)
    keys = path.strip().split(".")
    if len(keys) < 2:
        raise ConfigError(f"override {item!r} needs a section and a key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {item!r} walks into a non-object")
    node[keys[-1]] = value
    return doc
