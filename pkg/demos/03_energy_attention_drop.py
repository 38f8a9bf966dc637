"""
Energy-based attention and the drop branch
==========================================

Low-energy neurons stand out from their channel and receive high
attention. The drop branch zeroes the joints and frames whose
(min-max scaled) attention exceeds ``keep_margin`` and rescales the rest
so the total weight is unchanged.
"""

import numpy as np

from aimclr import eadm

# a channel that alternates around its mean: every neuron sits one std away
x = np.array([1.0, -1.0, 1.0, -1.0]).reshape(1, 4, 1)
print("energy of [1,-1,1,-1]:", eadm.energy(x).ravel().round(5))

# a constant channel has energy exactly 2 everywhere
print("energy of a constant channel:", eadm.energy(np.full((1, 3, 2), 5.0)).ravel())

# a feature map [C, T, V] with one joint and one frame that stand out
rng = np.random.default_rng(0)
fmap = rng.normal(scale=0.1, size=(4, 6, 5))
fmap[:, :, 2] += 3.0
fmap[:, 4, :] += 2.0
att = eadm.attention(eadm.energy(fmap))
ms, mt = eadm.drop_masks(att, keep_margin=0.7)
print("\nspatial mask  (1 = keep):", ms.astype(int))
print("temporal mask (1 = keep):", mt.astype(int))

dropped = eadm.mask_and_scale(fmap, ms, mt)
weights = eadm.mask_and_scale(np.ones_like(fmap), ms, mt)
print("kept weight per channel:", weights.sum(axis=(1, 2)), "of", fmap.shape[1] * fmap.shape[2])

# batched form used in training; degenerate masks fall back to identity
batch = rng.normal(size=(3, 4, 6, 5))
out, (ms_b, mt_b) = eadm.eadm(batch)
print("\nbatched spatial masks:\n", ms_b.astype(int))
