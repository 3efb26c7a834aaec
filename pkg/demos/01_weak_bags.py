# Building weakly labeled bags
# ============================
#
# A strongly labeled set of crops is the starting point: every crop knows
# whose it is. We pack them into bags, then make the labels weak by
# duplicating each crop into bags that belong to someone else.

import numpy as np

from cmil.bags import (
    NoiseSpec,
    compute_bag_statistics,
    dumps_manifest,
    factor_for_noise,
    generate_synthetic_weak_labels,
    strong_manifest_from_vectors,
)
from cmil.data import gaussian_identities

# 20 people, 50 vector crops each. The identity signal lives in an 8-dim
# subspace of R^32; the other 24 directions are nuisance.
x, ids = gaussian_identities(20, 50, 32, seed=1)
print(x.shape, ids[:3], ids[-1])

strong = strong_manifest_from_vectors(x, ids, crops_per_bag=10)
print(compute_bag_statistics(strong))

# Noise levels come as k/(k+1): each crop keeps its true bag and gains k copies
# elsewhere, so only 1 in k+1 placements is correct.
for noise in (0.5, 0.66, 0.75, 0.8):
    k = factor_for_noise(noise)
    weak = generate_synthetic_weak_labels(strong, NoiseSpec(k, seed=0))
    s = compute_bag_statistics(weak)
    print(f"noise {noise}: k={k} mean bag size {s.mean_bag_size:.0f}, measured noise {s.mean_noise:.4f}")

# Duplicates keep the original crop id with a #dupN suffix.
weak = generate_synthetic_weak_labels(strong, NoiseSpec(1, seed=0))
bag = weak.bags[0]
crops = weak.crop_index()
print(bag.bag_id, bag.label, [(c, crops[c].true_identity) for c in bag.crop_ids[:12]])

# The manifest is plain JSON.
print(dumps_manifest(weak)[:300])

# Bag sizes per label, just to see the spread
sizes = np.array([len(b.crop_ids) for b in weak.bags])
print(sizes.min(), sizes.mean(), sizes.max())
