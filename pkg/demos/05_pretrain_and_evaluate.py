"""
Pretraining and evaluation on the synthetic set
===============================================

A short version of the desk benchmark: four synthetic action classes,
a few epochs of two-stage pretraining, then KNN and linear probes on the
frozen encoder. The full benchmark (30 epochs) lives in the acceptance
tests; the same steps are available from the command line::

    aimclr synth --out data --classes 4 --per-class 64 --test-per-class 32 --seed 7
    aimclr pretrain --data data/manifest.json --out run
    aimclr eval-knn --ckpt run/ep30 --train data/manifest.json --test data/test_manifest.json
"""

import tempfile
import time

import numpy as np

from aimclr import evaluation as ev
from aimclr import training as tr
from aimclr.skeleton import default_graph, split_arrays, synthetic_arrays

graph = default_graph()
data, labels = synthetic_arrays(4, 96, seed=7)
train, test = split_arrays(data.astype(np.float64), labels, 4, 96, 32)
print("train", train[0].shape, "test", test[0].shape)

# a shortened schedule: stage 2 (neighbour mining) starts at epoch 10
config = tr.TrainConfig(epochs=14, stage_switch_epoch=10, lr_drop_epoch=12)
print("config: lr %g, bank %d, tau %g, key momentum %g" % (config.lr, config.bank_size, config.tau, config.momentum))

before = ev.knn_eval(tr.init_state(config, graph), train, test)
print("random-init encoder KNN: %.3f" % before.accuracy)

with tempfile.TemporaryDirectory() as out:
    t0 = time.perf_counter()
    last, history = tr.run_pretraining(config, None, graph, out, data=train[0])
    print("pretraining took %.0fs" % (time.perf_counter() - t0))
    for epoch in range(config.epochs):
        rows = [m for m in history if m["epoch"] == epoch]
        main = "L_N" if "L_N" in rows[0] else "L_Info"
        print(f"  epoch {epoch}  {main} {np.mean([m[main] for m in rows]):.3f}"
              f"  D3M {np.mean([m['L_d1'] + m['L_d2'] for m in rows]) / 2:.3f}")
    state = tr.load_checkpoint(last)

knn = ev.knn_eval(state, train, test)
linear = ev.linear_eval(state, train, test)
print()
print(knn.table())
print()
print(linear.table())
