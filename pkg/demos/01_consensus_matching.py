"""Coarse matching with a 4D correlation volume and neighbourhood consensus.

Run: python demos/01_consensus_matching.py
"""
import numpy as np
from scipy.ndimage import gaussian_filter

from ncmatch import dataset, consensus, matching
from ncmatch.tensor4d import Conv4Stack

rng = np.random.default_rng(0)

# A smooth random texture, and a copy shifted left by exactly one 16 px block
img = gaussian_filter(rng.random((96, 176)), 2.0)
img = (img - img.min()) / (img.max() - img.min())
a, b = img[:, :160], img[:, 16:176]

# One 256-d descriptor per 16x16 block
fA = dataset.handcrafted_descriptor_map(a)
fB = dataset.handcrafted_descriptor_map(b)
print("descriptor maps:", fA, fB)

# All pairwise cell similarities: shape (hA, wA, hB, wB)
c = consensus.correlate(fA, fB)
print("correlation volume:", c.shape, "range", c.min().round(3), c.max().round(3))

# Symmetric 4D consensus with the seeded default stack, then soft mutual filtering
stack = Conv4Stack.seeded(0)
print("stack channels:", [(l.in_channels, l.out_channels) for l in stack.layers])
filtered = consensus.ncn_filter(c, stack)

# One match per A cell; interior cells should map one column to the left
ms = matching.coarse_matches(filtered)
interior = [m for m in ms if m.cellA[1] >= 1]
hits = sum(m.cellB == (m.cellA[0], m.cellA[1] - 1) for m in interior)
print(f"shift recovered on {hits}/{len(interior)} interior cells")
for m in ms[:4]:
    print("  ", m.cellA, "->", m.cellB, f"score {m.score:.3f}")

# Consensus sharpens: compare the share of each A-row's mass taken by its best B cell
def peak_share(v):
    v = np.maximum(v, 0).reshape(v.shape[0] * v.shape[1], -1)
    return float(np.mean(v.max(1) / np.maximum(v.sum(1), 1e-12)))

print(f"mean peak share: raw {peak_share(c):.3f}, filtered {peak_share(filtered):.3f}")

# Softmax scores and the weakly supervised loss
s = consensus.match_scores(filtered)
print("loss (mean over all cells):", consensus.pair_loss(s, 1))
print("loss (mean of slice maxima):", consensus.pair_loss(s, 1, reduction="max"))
