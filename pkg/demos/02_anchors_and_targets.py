"""Show how one synthetic image becomes training targets.

The desk network sees 96x96 inputs through four pyramid levels (strides 8,
16, 32, 64) with six anchors per cell. Each face is matched to the anchors
it overlaps, and a balanced subset of anchors is drawn for the loss.

    python demos/02_anchors_and_targets.py
"""

import numpy as np

from ladrcnn.network import desk_config
from ladrcnn.synthetic import random_image
from ladrcnn.targets import assign_targets, sample_minibatch

cfg = desk_config()
grid = cfg.anchors()
print(f"input {cfg.input_size}px, grids {grid.grid_sizes}, {len(grid)} anchors")
for level in range(4):
    wh = grid.boxes[grid.level == level, 2:]
    print(f"  level {level}: {int((grid.level == level).sum()):4d} anchors, "
          f"sizes {wh.min():.1f}..{wh.max():.1f}px")

rng = np.random.default_rng(3)
sample = random_image(rng, cfg.input_size)
print(f"\nsynthetic image with {len(sample.objects)} face(s)")
for o in sample.objects:
    print(f"  box {np.round(o.box, 1)}, angle {o.angle * 180:+.1f} deg")

t = assign_targets(sample.boxes(), grid.boxes, sample.angles())
print(f"\n{len(t.positives)} positive, {len(t.negatives)} negative, "
      f"{len(t) - len(t.positives) - len(t.negatives)} ignored anchors")
for a in t.positives:
    print(f"  anchor {a:4d} (level {grid.level[a]}) -> face {t.matched_gt[a]}, "
          f"value {t.angle_value[a]:.3f}, direction {'ccw' if t.direction[a] else 'cw'}, "
          f"offsets {np.round(t.box_targets[a], 2)}")

picked = sample_minibatch(t, rng)
print(f"\nmini-batch: {len(picked)} anchors, "
      f"{int(np.isin(picked, t.positives).sum())} of them positive")
