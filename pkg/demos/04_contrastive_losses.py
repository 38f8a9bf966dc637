"""
Memory bank and contrastive losses
==================================

InfoNCE scores a query against its positive key and every bank entry.
The neighbour-mining loss promotes the most similar bank entries to extra
positives, and the distributional loss pulls the extreme views' bank
distributions toward the (fixed) distribution of the normal view.
"""

import numpy as np

from aimclr import contrastive as cc


def unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


rng = np.random.default_rng(0)

# the bank is a FIFO queue of unit vectors
bank = cc.MemoryBank(capacity=4, dim=2)
for angle in range(5):
    bank.enqueue([np.cos(angle), np.sin(angle)])
print("bank holds the last four pushes, oldest first:\n", bank.contents().round(3))

# when every similarity is equal InfoNCE is log(M + 1)
q = unit(rng.normal(size=8))
for m in (1, 2, 7):
    print(f"uniform similarities, M={m}: loss {cc.info_nce(q, q, np.tile(q, (m, 1)), 0.2).data:.6f}"
          f"  log(M+1) {np.log(m + 1):.6f}")

# neighbour mining: with no extra positives the loss is InfoNCE exactly
queries, keys, entries = unit(rng.normal(size=(4, 8))), unit(rng.normal(size=(4, 8))), unit(rng.normal(size=(32, 8)))
nbrs = cc.mine_neighbors(queries, entries, k=1)
print("\nmined neighbours:", nbrs.ravel())
print("InfoNCE            %.4f" % cc.info_nce(queries, keys, entries, 0.2).data)
print("NNM, no positives  %.4f" % cc.nnm_loss(queries, keys, entries, 0.2, [[]] * 4).data)
print("NNM, mined         %.4f" % cc.nnm_loss(queries, keys, entries, 0.2, list(nbrs)).data)
print("NNM, whole bank    %.4f" % (cc.nnm_loss(queries, keys, entries, 0.2, [np.arange(32)] * 4).data + 0.0))

# distributional loss: cross-entropy from a fixed target, never below the target entropy
p = rng.dirichlet(np.ones(5))
a, b = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5))
print("\nD3M %.4f >= entropy of target %.4f" % (cc.d3m_loss(p, a, b).data, -(p * np.log(p)).sum()))
