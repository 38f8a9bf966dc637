"""Memory bank and the contrastive losses (InfoNCE, D3M, NNM).

All losses accept a single query ``[D]`` or a batch ``[N, D]``; batched
losses are averaged over the batch. Positives ``z`` and the bank are
constants; only the queries carry gradient.
"""

import numpy as np

from . import autodiff as ad

DEFAULT_TAU = 0.07


class EmptyBankError(ValueError):
    pass


class MemoryBank:
    """Fixed-capacity FIFO queue of unit-norm embeddings, oldest first."""

    def __init__(self, capacity, dim, renormalize=True, dtype=np.float64):
        if capacity < 1:
            raise ValueError("bank capacity must be >= 1")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self.renormalize = renormalize
        self._buf = np.zeros((self.capacity, self.dim), dtype=dtype)
        self._cursor = 0  # next write slot
        self._size = 0

    def __len__(self):
        return self._size

    @property
    def cursor(self):
        return self._cursor

    def contents(self):
        """Stored embeddings ordered oldest first, shape ``[size, D]``."""
        if self._size < self.capacity:
            return self._buf[: self._size].copy()
        return np.concatenate([self._buf[self._cursor:], self._buf[: self._cursor]])

    def enqueue(self, z):
        z = np.atleast_2d(np.asarray(z, dtype=self._buf.dtype))
        if z.shape[1] != self.dim:
            raise ValueError(f"embedding dim {z.shape[1]} != bank dim {self.dim}")
        norms = np.linalg.norm(z, axis=1, keepdims=True)
        if self.renormalize:
            z = z / np.maximum(norms, 1e-12)
        elif np.any(np.abs(norms - 1) > 1e-5):
            raise ValueError("bank only accepts unit-norm embeddings")
        if len(z) >= self.capacity:
            self._buf[:] = z[-self.capacity:]
            self._cursor = 0
            self._size = self.capacity
            return
        for row in z:
            self._buf[self._cursor] = row
            self._cursor = (self._cursor + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)

    def load(self, contents):
        """Replace the bank with ``contents`` (oldest first), stored verbatim."""
        contents = np.asarray(contents, dtype=self._buf.dtype).reshape(-1, self.dim)
        if len(contents) > self.capacity:
            raise ValueError(f"{len(contents)} rows exceed bank capacity {self.capacity}")
        self._buf[:] = 0
        self._buf[: len(contents)] = contents
        self._size = len(contents)
        self._cursor = self._size % self.capacity

    @classmethod
    def random(cls, capacity, dim, rng, dtype=np.float64):
        bank = cls(capacity, dim, dtype=dtype)
        bank.enqueue(rng.normal(size=(capacity, dim)))
        return bank


def _bank_array(bank):
    arr = bank.contents() if isinstance(bank, MemoryBank) else np.asarray(bank)
    if arr.size == 0:
        raise EmptyBankError("memory bank is empty")
    return arr


def _check_tau(tau):
    if tau <= 0:
        raise ValueError("temperature must be > 0")


def logits(q, z, bank, tau=DEFAULT_TAU):
    """``[q.z, q.m_1, ..., q.m_M] / tau`` with the positive at index 0."""
    _check_tau(tau)
    q = q if isinstance(q, ad.Tensor) else ad.Tensor(q)
    m = _bank_array(bank)
    squeeze = q.ndim == 1
    if squeeze:
        q = ad.reshape(q, (1, -1))
    z = np.atleast_2d(np.asarray(z.data if isinstance(z, ad.Tensor) else z, dtype=q.dtype))
    pos = ad.sum(ad.mul(q, z), axis=1, keepdims=True)
    neg = ad.matmul(q, ad.Tensor(m.T, dtype=q.dtype))
    out = ad.div(ad.concat([pos, neg], axis=1), tau)
    return out, squeeze


def conditional_distribution(q, z, bank, tau=DEFAULT_TAU):
    """Softmax over the positive and every bank entry; entry 0 is p(z | q)."""
    lg, squeeze = logits(q, z, bank, tau)
    p = ad.softmax(lg, axis=1)
    return ad.reshape(p, (-1,)) if squeeze else p


def log_distribution(q, z, bank, tau=DEFAULT_TAU):
    lg, squeeze = logits(q, z, bank, tau)
    lp = ad.log_softmax(lg, axis=1)
    return ad.reshape(lp, (-1,)) if squeeze else lp


def info_nce(q, z, bank, tau=DEFAULT_TAU):
    """-log p(z | q), batch-averaged."""
    return nnm_loss(q, z, bank, tau, None)


def _positive_mask(n_plus, n_rows, bank_size):
    """Boolean ``[N, M+1]`` mask; column 0 (the positive) is always set."""
    mask = np.zeros((n_rows, bank_size + 1), dtype=bool)
    mask[:, 0] = True
    if n_plus is None:
        return mask
    if n_rows == 1 and (len(n_plus) == 0 or np.isscalar(next(iter(n_plus)))):
        n_plus = [n_plus]
    if len(n_plus) != n_rows:
        raise ValueError(f"need one neighbour set per query, got {len(n_plus)} for {n_rows}")
    for r, idx in enumerate(n_plus):
        idx = np.fromiter(idx, dtype=np.int64) if not isinstance(idx, np.ndarray) else idx.astype(np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= bank_size):
            raise IndexError(f"neighbour index out of range for bank of size {bank_size}")
        mask[r, idx + 1] = True
    return mask


def nnm_loss(q, z, bank, tau=DEFAULT_TAU, n_plus=None):
    """Nearest-neighbour-augmented InfoNCE.

    ``n_plus`` holds bank indices treated as extra positives (one iterable per
    query when batched). With no extra positives this is exactly InfoNCE.
    """
    lg, _ = logits(q, z, bank, tau)
    mask = _positive_mask(n_plus, lg.shape[0], lg.shape[1] - 1)
    lse_all = ad.logsumexp(lg, axis=1)
    if mask[:, 1:].any():
        shift = np.where(mask, 0.0, -np.inf)
        lse_pos = ad.logsumexp(ad.add(lg, shift), axis=1)
    else:
        lse_pos = ad.take(lg, (slice(None), 0))
    return ad.neg(ad.mean(ad.sub(lse_pos, lse_all)))


def d3m_loss(p_hat, p_tilde, p_drop, return_parts=False):
    """Mean of the two cross-entropies from the fixed target ``p_hat``.

    ``p_hat`` is a plain array (detached target). ``p_tilde`` and ``p_drop``
    may be probability tensors or, preferably, the output of
    :func:`log_distribution` wrapped in :class:`LogProb`.
    """
    target = np.asarray(p_hat.data if isinstance(p_hat, ad.Tensor) else p_hat)
    parts = []
    for other in (p_tilde, p_drop):
        size = (other.tensor if isinstance(other, LogProb) else np.asarray(getattr(other, "data", other))).shape[-1]
        if size != target.shape[-1]:
            raise ValueError(f"support sizes differ: {target.shape[-1]} vs {size}")
        logp = _as_log(other, target)
        t = ad.Tensor(target, dtype=logp.dtype)
        ce = ad.neg(ad.sum(ad.mul(t, logp), axis=-1))
        parts.append(ad.mean(ce))
    total = ad.mul(ad.add(parts[0], parts[1]), 0.5)
    return (total, parts[0], parts[1]) if return_parts else total


class LogProb:
    """Marks a tensor as already holding log-probabilities."""

    __slots__ = ("tensor",)

    def __init__(self, tensor):
        self.tensor = tensor


def _as_log(p, target):
    if isinstance(p, LogProb):
        return p.tensor
    p = p if isinstance(p, ad.Tensor) else ad.Tensor(p)
    # entries with zero target weight do not enter the loss; keep 0 * log 0 finite
    return ad.log(ad.add(p, (np.asarray(target) == 0).astype(p.dtype)))


def mine_neighbors(q, bank, k=1):
    """Indices of the ``k`` bank entries most similar to ``q`` (ties -> lower index)."""
    m = _bank_array(bank)
    q = np.asarray(q.data if isinstance(q, ad.Tensor) else q)
    sims = np.atleast_2d(q) @ m.T
    k = min(int(k), m.shape[0])
    # stable sort on -sim keeps lower indices first among ties
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    return order[0] if q.ndim == 1 else order


def union_neighbors(*index_sets):
    """Row-wise union of several ``[N, k]`` index arrays as sorted arrays."""
    rows = zip(*[np.atleast_2d(s) for s in index_sets])
    return [np.unique(np.concatenate(r)) for r in rows]
