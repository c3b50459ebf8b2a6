"""
Expand and shrink on a single image
===================================

A toy image with one ground-truth box, three initial pseudo-labels and two
sets of new detections. Expand adds detections that cover nothing yet;
shrink keeps only pseudo-labels that a second detector agrees with.
"""

import matplotlib.pyplot as plt
from matplotlib.patches import Rectangle

from dynsup import Annotation, Box, Source, expand, shrink

gt = {0: [Annotation(Box(10, 10, 40, 50), 1)]}
initial = {
    0: [
        Annotation(Box(60, 10, 90, 40), 2, 0.7, Source.INITIAL),
        Annotation(Box(10, 60, 35, 90), 2, 0.3, Source.INITIAL),
        Annotation(Box(60, 60, 95, 95), 3, 0.5, Source.INITIAL),
    ]
}

# %%
# The expand detector finds one object nobody labeled and re-finds the
# ground-truth box and one existing pseudo-label.
expand_preds = {
    0: [
        Annotation(Box(11, 10, 40, 49), 2, 0.8),  # overlaps gt: dropped
        Annotation(Box(61, 11, 90, 41), 2, 0.9),  # overlaps a pseudo-label: dropped
        Annotation(Box(100, 20, 130, 60), 3, 0.6),  # new: added
    ]
}
expanded = expand(initial, expand_preds, gt, t_e=0.7)
for a in expanded[0]:
    print(f"{a.source.value:8s} cat={a.category} score={a.score:.1f} {a.box.as_tuple()}")

# %%
# The shrink detector confirms two of the four boxes.
shrink_preds = {0: [Annotation(Box(62, 12, 90, 40), 2, 0.4), Annotation(Box(100, 22, 128, 60), 3, 0.5)]}
final = shrink(expanded, shrink_preds, gt, t_s=0.5)
print(len(expanded[0]), "->", len(final[0]), "pseudo-labels")

# %%
# Ground truth in black, dropped pseudo-labels dashed, survivors solid.
fig, ax = plt.subplots(figsize=(6, 3.5))
kept = set(final[0])
for a in gt[0]:
    ax.add_patch(Rectangle((a.box.x1, a.box.y1), a.box.width, a.box.height, fill=False, lw=2, color="k"))
for a in expanded[0]:
    style = "-" if a in kept else "--"
    color = "tab:blue" if a.source is Source.INITIAL else "tab:orange"
    ax.add_patch(Rectangle((a.box.x1, a.box.y1), a.box.width, a.box.height, fill=False, ls=style, color=color))
ax.set_xlim(0, 140)
ax.set_ylim(100, 0)
ax.set_aspect("equal")
ax.set_title("blue: initial, orange: added by expand")
plt.show()
