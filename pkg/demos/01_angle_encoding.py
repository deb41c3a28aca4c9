"""Walk through the rotation-angle encoding and how it follows image transforms.

An angle lives in (-1, 1], one unit per 180 degrees, counterclockwise
positive. The network never regresses it directly: it predicts the magnitude
with a sigmoid and the direction with a two-way softmax, which avoids the
jump between +180 and -180 degrees.

    python demos/01_angle_encoding.py
"""

from ladrcnn.angles import (
    angle_distance,
    angle_from_keypoints,
    hflip_angle,
    merge,
    rot90_angle,
    split,
    vflip_angle,
)


def deg(theta):
    return f"{theta * 180:+7.1f} deg"


print("eye keypoints -> angle")
for left, right in [((0, 0), (10, 0)), ((5, 10), (5, 2)), ((10, 0), (0, 0)), ((0, 0), (10, 10))]:
    print(f"  left {left} right {right}: {deg(angle_from_keypoints(left, right))}")

print("\nsplit into (magnitude, direction) and back")
for theta in (0.25, -0.5, 1.0, -0.999):
    parts = split(theta)
    print(f"  {deg(theta)} -> value {parts.value:.3f}, {parts.direction.name} -> {deg(merge(parts))}")

print("\nwraparound distance: 171 deg and -171 deg are 18 deg apart")
print(f"  angle_distance(0.95, -0.95) * 180 = {angle_distance(0.95, -0.95) * 180:.1f}")

print("\nangles under the three augmentation transforms")
print(f"  {'theta':>12} {'rot90 ccw':>12} {'h-flip':>12} {'v-flip':>12}")
for theta in (0.0, 0.25, 0.75, -0.5, 1.0):
    print(f"  {deg(theta):>12} {deg(rot90_angle(theta)):>12} {deg(hflip_angle(theta)):>12} "
          f"{deg(vflip_angle(theta)):>12}")
