"""Walk through pseudo-labels, thresholds, sharpening and alignment on small arrays.

Run: python3 demos/01_pseudo_labels_by_hand.py
"""

import numpy as np

from fixmatch.core import cross_entropy, softmax
from fixmatch.ssl import DaState, batch_stats, distribution_align, pseudo_label, sharpen

np.set_printoptions(precision=3, suppress=True)

# Four predictions on unlabeled images, three classes.
q = np.array([
    [0.97, 0.02, 0.01],
    [0.40, 0.35, 0.25],
    [0.05, 0.94, 0.01],
    [0.01, 0.03, 0.96],
])
true = np.array([0, 1, 1, 2])  # hidden labels, used only for diagnostics

print("predictions\n", q)
for tau in (0.25, 0.5, 0.95):
    labels, keep = pseudo_label(q, tau)
    stats = batch_stats(keep, labels.argmax(axis=1), true)
    imp = "n/a" if stats.impurity is None else f"{stats.impurity:.2f}"
    print(f"tau={tau:<4}  kept {keep.astype(int)}  mask rate {stats.mask_rate:.2f}  impurity {imp}")

# Raising the threshold keeps fewer labels but the kept ones are cleaner:
# row 2 (0.94 on the wrong class) survives 0.5 but not 0.95.

print("\nsharpening row 1 at decreasing temperature")
for t in (1.0, 0.5, 0.1, 0.0):
    print(f"  T={t:<4} {sharpen(q[1], t)}")

# Cross-entropy of a hard label against a strong-view prediction is what the
# unlabeled loss averages over kept rows.
strong_view_pred = softmax(np.array([2.0, 0.5, -1.0]))
print("\nH(one-hot class 0, strong prediction) =", round(float(cross_entropy([1, 0, 0], strong_view_pred)), 4))

# Alignment rescales each prediction by (labeled class marginal / running mean of predictions).
da = DaState(labeled_marginal=np.array([0.75, 0.25]), running=np.array([0.5, 0.5]))
print("\naligned [0.5, 0.5] ->", distribution_align([0.5, 0.5], da))
da_flat = DaState(np.array([0.2, 0.3, 0.5]), np.array([0.2, 0.3, 0.5]))
print("ratio of one leaves q unchanged:", distribution_align(q[1], da_flat))
