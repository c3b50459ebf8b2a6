"""
Score signatures of hard- and soft-label detectors
==================================================

The two simulator presets stand in for a detector trained on hard labels
and one trained on soft labels. The hard one scores true positives high
and lets many confident false positives through; the soft one is shy.
"""

import matplotlib.pyplot as plt
import numpy as np

from dynsup.metrics import count_above, fraction_above, match_tp_fp, score_histogram
from dynsup.simulator import hard_profile, simulate_detector, soft_profile, synthetic_dataset

truth = synthetic_dataset(2000, [f"c{i}" for i in range(5)], seed=0)
reports = {
    name: match_tp_fp(simulate_detector(truth, truth.categories, profile(1)), truth.annotations)
    for name, profile in (("hard", hard_profile), ("soft", soft_profile))
}

# %%
for name, r in reports.items():
    print(
        f"{name}: {fraction_above(r, 0.2):.1%} of TP above 0.2, "
        f"{count_above(r, 0.2, tp=False)} FP above 0.2"
    )

# %%
fig, axes = plt.subplots(1, 2, figsize=(8, 3), sharey=True)
for ax, (name, r) in zip(axes, reports.items()):
    h = score_histogram(r, bins=20)
    centers = 0.5 * (h.edges[:-1] + h.edges[1:])
    ax.bar(centers, h.tp, width=0.05, label="TP")
    ax.bar(centers, h.fp, width=0.05, bottom=h.tp, label="FP")
    ax.axvline(0.2, color="k", lw=0.8)
    ax.set_title(name)
    ax.set_xlabel("score")
axes[0].legend()
plt.show()

# %%
# The score cut at 0.2 splits both populations very differently.
print(np.round([fraction_above(r, 0.2) for r in reports.values()], 3))
