"""Render one face at 16 orientations, normalize each, and compare with upright.

Normalization rotates the image about the box center by the face angle and
crops a square whose side is the box diagonal plus a margin, so the crop
scale does not depend on the orientation. The script writes a contact sheet
(top: inputs, bottom: normalized crops) and prints the correlation of each
crop with the upright one.

    python demos/04_normalize_faces.py [out.png]
"""

import sys

import numpy as np

from ladrcnn.boxes import xyxy_to_xywh
from ladrcnn.data import write_image
from ladrcnn.inference import Detection, normalize_face
from ladrcnn.synthetic import render_single


def crop(theta, size=64):
    s = render_single(128, theta, 56)
    o = s.objects[0]
    return s.image, normalize_face(s.image, Detection(tuple(xyxy_to_xywh(o.box)), 1.0, o.angle), size)


def ncc(a, b):
    a, b = a.ravel() - a.mean(), b.ravel() - b.mean()
    return float(a @ b / np.sqrt((a @ a) * (b @ b)))


_, upright = crop(0.0)
inputs, crops = [], []
for k in range(16):
    theta = -1.0 + 2.0 * (k + 1) / 16
    image, c = crop(theta)
    inputs.append(image[::2, ::2])
    crops.append(c)
    print(f"{theta * 180:+7.1f} deg  correlation with upright {ncc(c, upright):.4f}")

sheet = np.concatenate([np.concatenate(inputs, axis=1), np.concatenate(crops, axis=1)], axis=0)
out = sys.argv[1] if len(sys.argv) > 1 else "normalized_faces.png"
write_image(out, sheet)
print(f"wrote {out}")
