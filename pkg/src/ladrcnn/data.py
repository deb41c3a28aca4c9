"""Samples, manifest I/O, augmentation and the dual-dataset batch stream.

Annotation coordinates are continuous pixel coordinates: the image spans
``[0, W] x [0, H]`` and pixel ``(i, j)`` covers ``[j, j+1] x [i, i+1]``.
"""

import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import List, Optional

import cv2
import numpy as np
from PIL import Image

from . import angles
from .errors import EmptyDataset, InvalidBox, MissingImage, ParseError
from .targets import Origin

PAD_VALUE = 0.5
MIN_BOX_EXTENT = 2.0


@dataclass
class GroundTruthObject:
    box: np.ndarray                         # (xmin, ymin, xmax, ymax)
    keypoints: Optional[np.ndarray] = None  # [[x_l, y_l], [x_r, y_r]]
    angle: Optional[float] = None

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=np.float64).reshape(4)
        if self.keypoints is not None:
            self.keypoints = np.asarray(self.keypoints, dtype=np.float64).reshape(2, 2)
            if self.angle is None:
                self.angle = angles.angle_from_keypoints(self.keypoints[0], self.keypoints[1])
        if self.angle is not None:
            self.angle = float(self.angle)


@dataclass
class Sample:
    image: np.ndarray                        # (H, W, C) float32 in [0, 1]
    objects: List[GroundTruthObject] = field(default_factory=list)
    origin: Origin = Origin.DS1
    sample_id: str = ""

    @property
    def height(self):
        return self.image.shape[0]

    @property
    def width(self):
        return self.image.shape[1]

    def boxes(self):
        if not self.objects:
            return np.zeros((0, 4))
        return np.stack([o.box for o in self.objects])

    def angles(self):
        return [o.angle for o in self.objects]


@dataclass
class AugmentProbs:
    p_hflip: float = 0.0
    p_vflip: float = 0.0
    p_rot90: float = 0.0
    p_tile2x2: float = 0.0
    p_tile3x3: float = 0.0

    def __post_init__(self):
        for k, v in vars(self).items():
            if not 0.0 <= float(v) <= 1.0:
                raise ValueError(f"{k}={v} is not a probability")


# --------------------------------------------------------------------------
# image helpers

def to_channels(image, channels):
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        image = image[:, :, None]
    c = image.shape[2]
    if c == channels:
        return image
    if channels == 1:
        gray = image[..., :3] @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
        return gray[:, :, None]
    if channels == 3 and c == 1:
        return np.repeat(image, 3, axis=2)
    raise ValueError(f"cannot convert {c} channels to {channels}")


def resize_image(image, width, height):
    c = image.shape[2]
    shrinking = width < image.shape[1] or height < image.shape[0]
    out = cv2.resize(image, (int(width), int(height)),
                     interpolation=cv2.INTER_AREA if shrinking else cv2.INTER_LINEAR)
    return out.reshape(int(height), int(width), c).astype(np.float32)


def read_image(path, channels=None):
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except FileNotFoundError as exc:
        raise MissingImage(f"image not found: {path}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return to_channels(arr, channels) if channels else arr


def write_image(path, image):
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path, format="PNG")


# --------------------------------------------------------------------------
# geometric transforms on samples

def _map_objects(sample, fn_points, swap, fn_angle):
    out = []
    for o in sample.objects:
        corners = fn_points(np.array([[o.box[0], o.box[1]], [o.box[2], o.box[3]]]))
        box = np.concatenate([corners.min(axis=0), corners.max(axis=0)])
        kp = None
        if o.keypoints is not None:
            kp = fn_points(o.keypoints)
            if swap:
                kp = kp[::-1].copy()
        angle = fn_angle(o.angle) if o.angle is not None else None
        out.append(GroundTruthObject(box, kp, angle))
    return out


def rot90(sample):
    """Rotate 90 degrees counterclockwise: (x, y) -> (y, W - x)."""
    w = sample.width

    def pts(p):
        return np.stack([p[:, 1], w - p[:, 0]], axis=1)

    image = np.ascontiguousarray(np.rot90(sample.image, 1, axes=(0, 1)))
    return replace(sample, image=image, objects=_map_objects(sample, pts, False, angles.rot90_angle))


def hflip(sample):
    w = sample.width

    def pts(p):
        return np.stack([w - p[:, 0], p[:, 1]], axis=1)

    image = np.ascontiguousarray(sample.image[:, ::-1])
    return replace(sample, image=image, objects=_map_objects(sample, pts, True, angles.hflip_angle))


def vflip(sample):
    h = sample.height

    def pts(p):
        return np.stack([p[:, 0], h - p[:, 1]], axis=1)

    image = np.ascontiguousarray(sample.image[::-1])
    return replace(sample, image=image, objects=_map_objects(sample, pts, True, angles.vflip_angle))


def scale_translate(sample_objects, scale, ox, oy):
    out = []
    for o in sample_objects:
        box = o.box * scale + np.array([ox, oy, ox, oy])
        kp = None if o.keypoints is None else o.keypoints * scale + np.array([ox, oy])
        out.append(GroundTruthObject(box, kp, o.angle))
    return out


def drop_tiny(objects, min_extent=MIN_BOX_EXTENT):
    return [o for o in objects if (o.box[2] - o.box[0]) >= min_extent and (o.box[3] - o.box[1]) >= min_extent]


def tile(samples, n):
    """Place ``n * n`` samples on an ``n x n`` grid the size of the first one.

    Each sample is scaled uniformly to fit its cell; annotations follow the
    same similarity transform, so angles are unchanged.
    """
    base = samples[0]
    h, w, c = base.image.shape
    canvas = np.full((h, w, c), PAD_VALUE, dtype=np.float32)
    xs = np.round(np.linspace(0, w, n + 1)).astype(int)
    ys = np.round(np.linspace(0, h, n + 1)).astype(int)
    objects = []
    for k, s in enumerate(samples[: n * n]):
        r, q = divmod(k, n)
        cw, ch = xs[q + 1] - xs[q], ys[r + 1] - ys[r]
        scale = min(cw / s.width, ch / s.height)
        nw, nh = max(1, round(s.width * scale)), max(1, round(s.height * scale))
        img = resize_image(to_channels(s.image, c), nw, nh)
        canvas[ys[r]:ys[r] + nh, xs[q]:xs[q] + nw] = img
        objects += scale_translate(s.objects, scale, xs[q], ys[r])
    return replace(base, image=canvas, objects=drop_tiny(objects))


def augment(sample, probs, rng, pool=None):
    """Randomly apply tiling, 90-degree rotation and flips.

    Each operation is triggered independently by its probability; when both
    tilings trigger, the 3x3 one is used. Tiling partners are drawn with
    replacement from ``pool`` (default: the sample itself).
    """
    rng = np.random.default_rng(rng)
    u = rng.random(5)
    pool = pool if pool else [sample]
    grid = 3 if u[4] < probs.p_tile3x3 else 2 if u[3] < probs.p_tile2x2 else 0
    if grid:
        picks = rng.integers(0, len(pool), size=grid * grid - 1)
        sample = tile([sample] + [pool[i] for i in picks], grid)
    if u[0] < probs.p_rot90:
        sample = rot90(sample)
    if u[1] < probs.p_hflip:
        sample = hflip(sample)
    if u[2] < probs.p_vflip:
        sample = vflip(sample)
    return sample


@dataclass(frozen=True)
class Letterbox:
    scale: float
    ox: float
    oy: float

    def to_original(self, boxes_xywh):
        b = np.asarray(boxes_xywh, dtype=np.float64).copy()
        b[..., 0] = (b[..., 0] - self.ox) / self.scale
        b[..., 1] = (b[..., 1] - self.oy) / self.scale
        b[..., 2:4] /= self.scale
        return b


def letterbox(sample, size, channels=None):
    """Aspect-preserving resize into a ``size x size`` canvas with gray padding."""
    image = sample.image if channels is None else to_channels(sample.image, channels)
    h, w = image.shape[:2]
    scale = size / max(h, w)
    if h == w == size:
        return replace(sample, image=image), Letterbox(1.0, 0.0, 0.0)
    nw, nh = max(1, round(w * scale)), max(1, round(h * scale))
    ox, oy = (size - nw) // 2, (size - nh) // 2
    canvas = np.full((size, size, image.shape[2]), PAD_VALUE, dtype=np.float32)
    canvas[oy:oy + nh, ox:ox + nw] = resize_image(image, nw, nh)
    objects = drop_tiny(scale_translate(sample.objects, scale, ox, oy), 1.0)
    return replace(sample, image=canvas, objects=objects), Letterbox(scale, float(ox), float(oy))


# --------------------------------------------------------------------------
# manifests

def _parse_point(value, line, what):
    try:
        x, y = (float(v) for v in value)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{what} must be [x, y]", line) from exc
    return [x, y]


def parse_record(record, line, image_shape=None):
    if not isinstance(record, dict) or "image" not in record:
        raise ParseError("record needs an 'image' field", line)
    objects = []
    for obj in record.get("objects", []):
        box = obj.get("box") if isinstance(obj, dict) else None
        try:
            box = [float(v) for v in box]
        except (TypeError, ValueError):
            raise InvalidBox(f"malformed box {box!r}", line) from None
        if len(box) != 4 or not all(math.isfinite(v) for v in box):
            raise InvalidBox(f"malformed box {box!r}", line)
        if image_shape is not None:
            h, w = image_shape[:2]
            box = [min(max(box[0], 0.0), w), min(max(box[1], 0.0), h),
                   min(max(box[2], 0.0), w), min(max(box[3], 0.0), h)]
        if not (box[0] < box[2] and box[1] < box[3]):
            raise InvalidBox(f"empty box {box!r}", line)
        kp = None
        if obj.get("left_eye") is not None and obj.get("right_eye") is not None:
            kp = [_parse_point(obj["left_eye"], line, "left_eye"),
                  _parse_point(obj["right_eye"], line, "right_eye")]
        angle = obj.get("angle")
        try:
            if angle is not None:
                angle = angles.check_angle(angle)
            objects.append(GroundTruthObject(box, kp, angle))
        except (ValueError, TypeError) as exc:
            raise ParseError(str(exc), line) from exc
    return objects


def load_dataset(manifest, channels=None, origin=Origin.DS1):
    """Stream samples from a JSON-lines manifest, in file order.

    Image paths are relative to the manifest's directory. Missing angles are
    derived from eye keypoints; box-only (DS2) samples drop angle data.
    """
    root = os.path.dirname(os.path.abspath(manifest))
    origin = Origin(origin)
    with open(manifest, "r", encoding="utf-8") as f:
        for lineno, text in enumerate(f, start=1):
            if not text.strip():
                continue
            try:
                record = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", lineno) from exc
            parse_record(record, lineno)  # validate before touching the image file
            image = read_image(os.path.join(root, record["image"]), channels)
            objects = parse_record(record, lineno, image.shape)
            if origin == Origin.DS2:
                objects = [GroundTruthObject(o.box) for o in objects]
            yield Sample(image, objects, origin, record["image"])


def object_record(obj):
    rec = {"box": [float(v) for v in obj.box]}
    if obj.keypoints is not None:
        rec["left_eye"] = [float(v) for v in obj.keypoints[0]]
        rec["right_eye"] = [float(v) for v in obj.keypoints[1]]
    if obj.angle is not None:
        rec["angle"] = float(obj.angle)
    return rec


def write_manifest(path, records):
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")


# --------------------------------------------------------------------------
# batching

class _Shuffler:
    def __init__(self, items, rng):
        self.items = items
        self.rng = rng
        self.order = []

    def next(self):
        if not self.order:
            self.order = list(self.rng.permutation(len(self.items)))[::-1]
        return self.items[self.order.pop()]


def dual_batch_iterator(ds1, ds2, batch1=7, batch2=5, seed=0, input_size=96, channels=None,
                        aug1=None, aug2=None):
    """Endless stream of mixed batches.

    Each step yields ``batch1`` augmented DS1 samples followed by ``batch2``
    DS2 samples, all letterboxed to ``input_size``. Datasets are reshuffled
    every epoch by a generator seeded with ``seed``.
    """
    ds1, ds2 = list(ds1), list(ds2)
    if batch1 > 0 and not ds1:
        raise EmptyDataset("dataset 1 is empty")
    if batch2 > 0 and not ds2:
        raise EmptyDataset("dataset 2 is empty")
    ds1 = [replace(s, origin=Origin.DS1) for s in ds1]
    ds2 = [replace(s, origin=Origin.DS2, objects=[GroundTruthObject(o.box) for o in s.objects]) for s in ds2]
    aug1 = aug1 or AugmentProbs()
    aug2 = aug2 or AugmentProbs()
    rng = np.random.default_rng(seed)
    streams = [(_Shuffler(ds1, rng), ds1, aug1, batch1), (_Shuffler(ds2, rng), ds2, aug2, batch2)]
    while True:
        batch = []
        for shuffler, pool, probs, n in streams:
            for _ in range(n):
                s = augment(shuffler.next(), probs, rng, pool)
                batch.append(letterbox(s, input_size, channels)[0])
        yield batch


def stack_images(samples):
    """(N, C, H, W) float32 array from letterboxed samples."""
    return np.ascontiguousarray(np.stack([s.image for s in samples]).transpose(0, 3, 1, 2))
