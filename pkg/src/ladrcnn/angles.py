"""Rotation-angle arithmetic.

Angles are plain floats ``theta`` in (-1, 1], where ``theta * 180`` is the
rotation in degrees and positive means counterclockwise as seen on screen
(image y axis pointing down).
"""

import enum
import math
from typing import NamedTuple

from .errors import CoincidentKeypoints

__all__ = [
    "Direction",
    "AngleParts",
    "KeypointPair",
    "check_angle",
    "wrap_angle",
    "angle_from_keypoints",
    "split",
    "merge",
    "angle_distance",
    "rot90_angle",
    "hflip_angle",
    "vflip_angle",
]


class Direction(enum.IntEnum):
    CW = 0
    CCW = 1


class AngleParts(NamedTuple):
    value: float
    direction: Direction


class KeypointPair(NamedTuple):
    left: tuple
    right: tuple


def check_angle(theta):
    theta = float(theta)
    if not (-1.0 < theta <= 1.0):
        raise ValueError(f"angle {theta!r} outside (-1, 1]")
    return theta


def wrap_angle(theta):
    """Map any real number into (-1, 1] by shifts of 2."""
    theta = math.fmod(float(theta), 2.0)
    if theta > 1.0:
        theta -= 2.0
    elif theta <= -1.0:
        theta += 2.0
    return theta


def angle_from_keypoints(left, right):
    """Angle of the left->right keypoint line against the +x axis.

    Coordinates are image coordinates (x right, y down). The branches are
    evaluated directly, so a vertical line never produces an infinite slope.
    """
    x_l, y_l = float(left[0]), float(left[1])
    x_r, y_r = float(right[0]), float(right[1])
    dx = x_r - x_l
    dy = y_l - y_r
    if dx == 0.0 and dy == 0.0:
        raise CoincidentKeypoints(f"left and right keypoints coincide at {(x_l, y_l)}")
    if dx > 0:
        return math.atan(dy / dx) / math.pi
    if dx == 0:
        return 0.5 if dy > 0 else -0.5
    k = abs(dy / dx)
    if dy >= 0:
        return 1.0 - math.atan(k) / math.pi
    return math.atan(k) / math.pi - 1.0


def split(theta):
    theta = check_angle(theta)
    direction = Direction.CCW if theta >= 0 else Direction.CW
    return AngleParts(abs(theta), direction)


def merge(parts):
    value, direction = float(parts[0]), Direction(parts[1])
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"angle value {value!r} outside [0, 1]")
    if direction == Direction.CCW or value == 1.0:
        return value
    # -0.0 collapses to 0.0
    return -value + 0.0


def angle_distance(a, b):
    diff = abs(float(a) - float(b))
    return diff if diff < 1.0 else 2.0 - diff


def rot90_angle(theta):
    """Angle after rotating the image 90 degrees counterclockwise."""
    theta = float(theta)
    if theta <= 0.5:
        return (theta * 180.0 + 90.0) / 180.0
    return (theta * 180.0 - 270.0) / 180.0


def hflip_angle(theta):
    """Angle after a horizontal mirror (left/right labels swapped)."""
    theta = float(theta)
    if theta == 1.0:
        return 1.0
    return -theta + 0.0


def vflip_angle(theta):
    """Angle after a vertical mirror (left/right labels swapped)."""
    theta = float(theta)
    if theta < 0:
        # a tiny negative angle can round to exactly -1, which is +1
        out = abs(theta) - 1.0
        return 1.0 if out <= -1.0 else out
    return 1.0 - theta
