"""Synthetic oriented-face images with exact box, eye and angle annotations.

The glyph is an upright ellipse (taller than wide) with two dark eyes, a
nose wedge below them and a mouth bar; rotating it by ``theta * 180``
degrees counterclockwise gives a face whose eye line has angle ``theta``.
"""

import math
import os

import cv2
import numpy as np

from . import angles
from .boxes import iou_matrix_xyxy
from .data import GroundTruthObject, Sample, object_record, write_image, write_manifest

# glyph geometry in units of the face height
FACE_HALF_W = 0.40
FACE_HALF_H = 0.50
EYE_DX = 0.17
EYE_DY = -0.12
EYE_R = 0.07
NOSE = np.array([[0.0, -0.02], [-0.08, 0.20], [0.08, 0.20]])
MOUTH = (-0.12, 0.29, 0.12, 0.35)   # u0, v0, u1, v1

SUPERSAMPLE = 4


def _rotate(u, v, phi):
    """Upright glyph offsets -> image offsets for a counterclockwise turn ``phi``."""
    c, s = math.cos(phi), math.sin(phi)
    return u * c + v * s, -u * s + v * c


def _unrotate(dx, dy, phi):
    c, s = math.cos(phi), math.sin(phi)
    return dx * c - dy * s, dx * s + dy * c


def face_extent(size, theta):
    """Half width and half height of the rotated face ellipse."""
    phi = theta * math.pi
    a, b = FACE_HALF_W * size, FACE_HALF_H * size
    c, s = math.cos(phi), math.sin(phi)
    return math.sqrt((a * c) ** 2 + (b * s) ** 2), math.sqrt((a * s) ** 2 + (b * c) ** 2)


def face_annotation(cx, cy, size, theta):
    hw, hh = face_extent(size, theta)
    phi = theta * math.pi
    eyes = []
    for sign in (-1.0, 1.0):
        dx, dy = _rotate(sign * EYE_DX * size, EYE_DY * size, phi)
        eyes.append([cx + dx, cy + dy])
    return GroundTruthObject([cx - hw, cy - hh, cx + hw, cy + hh], eyes, theta)


def _inside_triangle(u, v, tri):
    def edge(p, q):
        return (q[0] - p[0]) * (v - p[1]) - (q[1] - p[1]) * (u - p[0])

    d1, d2, d3 = edge(tri[0], tri[1]), edge(tri[1], tri[2]), edge(tri[2], tri[0])
    neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
    pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
    return ~(neg & pos)


def draw_face(image, cx, cy, size, theta, face_color, eye_color=None, nose_color=None):
    """Composite one anti-aliased face glyph onto ``image`` in place."""
    h, w, c = image.shape
    face_color = np.broadcast_to(np.asarray(face_color, dtype=np.float32), (c,))
    eye_color = np.zeros(c, np.float32) + 0.08 if eye_color is None else np.asarray(eye_color, np.float32)
    nose_color = face_color * 0.55 if nose_color is None else np.asarray(nose_color, np.float32)
    hw, hh = face_extent(size, theta)
    x0, x1 = max(0, int(math.floor(cx - hw - 1))), min(w, int(math.ceil(cx + hw + 1)))
    y0, y1 = max(0, int(math.floor(cy - hh - 1))), min(h, int(math.ceil(cy + hh + 1)))
    if x0 >= x1 or y0 >= y1:
        return image
    ss = SUPERSAMPLE
    xs = x0 + (np.arange((x1 - x0) * ss) + 0.5) / ss
    ys = y0 + (np.arange((y1 - y0) * ss) + 0.5) / ss
    gx, gy = np.meshgrid(xs, ys)
    u, v = _unrotate(gx - cx, gy - cy, theta * math.pi)
    u, v = u / size, v / size

    face = (u / FACE_HALF_W) ** 2 + (v / FACE_HALF_H) ** 2 <= 1.0
    eye = ((np.abs(u) - EYE_DX) ** 2 + (v - EYE_DY) ** 2) <= EYE_R ** 2
    nose = _inside_triangle(u, v, NOSE)
    mouth = (u >= MOUTH[0]) & (u <= MOUTH[2]) & (v >= MOUTH[1]) & (v <= MOUTH[3])

    def coverage(mask):
        return mask.reshape(y1 - y0, ss, x1 - x0, ss).mean(axis=(1, 3))[..., None].astype(np.float32)

    region = image[y0:y1, x0:x1]
    for mask, color in ((face, face_color), (nose, nose_color), (eye | mouth, eye_color)):
        a = coverage(mask)
        region[:] = region * (1 - a) + a * color
    return image


def textured_background(rng, size, channels=3):
    coarse = rng.uniform(0.1, 0.6, size=(6, 6, channels)).astype(np.float32)
    img = cv2.resize(coarse, (size, size), interpolation=cv2.INTER_CUBIC).reshape(size, size, channels)
    img += rng.normal(0.0, 0.04, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def random_image(rng, image_size, channels=3, max_faces=3, max_tries=50):
    image = textured_background(rng, image_size, channels)
    n_faces = int(rng.integers(1, max_faces + 1))
    objects = []
    for _ in range(max_tries):
        if len(objects) == n_faces:
            break
        size = rng.uniform(0.2, 0.5) * image_size
        theta = angles.wrap_angle(rng.uniform(-1.0, 1.0))
        hw, hh = face_extent(size, theta)
        cx = rng.uniform(hw, image_size - hw)
        cy = rng.uniform(hh, image_size - hh)
        obj = face_annotation(cx, cy, size, theta)
        if objects:
            ious = iou_matrix_xyxy(obj.box[None], np.stack([o.box for o in objects]))
            if ious.max() >= 0.1:
                continue
        color = rng.uniform(0.65, 1.0, size=channels)
        draw_face(image, cx, cy, size, theta, color)
        objects.append(obj)
    return Sample(image, objects)


def render_single(image_size, theta, size, center=None, background=0.5, channels=3,
                  face_color=0.9):
    """One face on a flat background; used by normalization checks."""
    image = np.full((image_size, image_size, channels), background, dtype=np.float32)
    cx, cy = center if center is not None else (image_size / 2.0, image_size / 2.0)
    draw_face(image, cx, cy, size, theta, face_color)
    return Sample(image, [face_annotation(cx, cy, size, theta)])


def generate_synthetic(count, image_size, seed, out_dir, channels=3):
    """Render ``count`` images into ``out_dir`` and return the manifest path."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(count):
        sample = random_image(rng, image_size, channels)
        rel = f"images/{i:06d}.png"
        write_image(os.path.join(out_dir, rel), sample.image)
        records.append({"image": rel, "objects": [object_record(o) for o in sample.objects]})
    path = os.path.join(out_dir, "manifest.jsonl")
    write_manifest(path, records)
    return path
