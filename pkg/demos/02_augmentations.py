"""
Normal and extreme augmentations
================================

Two normal views (shear then crop) and one extreme view (all eight
transforms in a fixed order) are drawn for every training sample. Each
draw is fully described by an ``AugmentParams`` record, so views can be
replayed exactly.
"""

import numpy as np

from aimclr import augment as ag
from aimclr.skeleton import default_graph, synthetic_arrays

graph = default_graph()
data, labels = synthetic_arrays(2, 1, T=30, seed=0)
seq = data[0].astype(np.float64)  # [C, T, V, P]
print("sequence shape", seq.shape)

# identity parameters leave the sequence untouched for both pipelines
for pipe in (ag.normal_pipeline(), ag.extreme_pipeline()):
    same = np.array_equal(ag.apply_pipeline(seq, pipe, ag.identity_params(), graph), seq)
    print(f"{len(pipe.kinds)}-step pipeline with identity params is identity: {same}")

# sample one extreme view and look at what was drawn
rng = np.random.default_rng(1)
params = ag.sample_params(ag.extreme_pipeline(), rng, seq.shape[1])
print("\nsampled extreme parameters:")
for name, value in vars(params).items():
    print(f"  {name:14s} {value}")

view = ag.apply_pipeline(seq, ag.extreme_pipeline(), params, graph)
print("\nmean displacement from the source: %.3f" % np.abs(view - seq).mean())

# individual transforms have simple closed forms
p = np.zeros((3, 1, 1, 1))
p[0] = 1
print("\nrotate (1,0,0) by pi/6 about Z:", ag.rotate(p, "Z", (0, 0, np.pi / 6)).ravel().round(4))
print("shear a12=1 applied to (0,1,0):", ag.shear(np.eye(3)[1].reshape(3, 1, 1, 1), (1, 0, 0, 0, 0, 0)).ravel())
print("crop padding for T=60:", ag.crop_padding(60), "frames each side")

# noise has variance 0.01
noise = ag.gaussian_noise(np.zeros((1, 100_000, 1, 1)), seed=3)
print("noise variance over 1e5 draws: %.5f" % noise.var())
