"""Rotation-aware one-stage face detector with angle-based face normalization."""

from .angles import (Direction, angle_distance, angle_from_keypoints, hflip_angle, merge,
                     rot90_angle, split, vflip_angle)
from .boxes import decode_boxes, encode_boxes, generate_anchors, iou, nms
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .data import AugmentProbs, GroundTruthObject, Sample, augment, dual_batch_iterator, load_dataset
from .errors import (CoincidentKeypoints, ConfigError, DegenerateBox, EmptyDataset, FormatError,
                     InvalidBox, MissingImage, NonFiniteLoss, ParseError)
from .evaluation import evaluate_model
from .inference import Detection, decode_predictions, detect, detect_and_render, normalize_face
from .losses import LossWeights, loss_total
from .metrics import EvalReport, average_precision, evaluate
from .network import LADRCNN, NetworkConfig, build_model, desk_config, full_config
from .synthetic import generate_synthetic, render_single
from .targets import assign_targets, sample_minibatch
from .trainer import TrainConfig, grad_check, train

__version__ = "0.1.0"
