"""Energy-based attention-guided drop on encoder feature maps.

Feature maps are ``[C, T, V]`` (or batched ``[N, C, T, V]``). Energies and
masks are computed on plain arrays; only the mask-and-scale step touches the
tape, and the masks are constants there.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

DEFAULT_LAMBDA = 1e-4
DEFAULT_KEEP_MARGIN = 0.7


class DegenerateMaskError(ValueError):
    """Every joint (or every frame) would be dropped."""


def energy(x, lam=DEFAULT_LAMBDA):
    """Minimal neuron energy per element; statistics are per channel over (T, V)."""
    if lam <= 0:
        raise ValueError("energy regulariser lambda must be > 0")
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=(-2, -1), keepdims=True)
    d2 = (x - mu) ** 2
    var = d2.mean(axis=(-2, -1), keepdims=True)
    return 4 * (var + lam) / (d2 + 2 * var + 2 * lam)


def _sigmoid(x):
    return 0.5 * (1 + np.tanh(0.5 * x))


@dataclass
class AttentionMap:
    values: np.ndarray
    lam: float = DEFAULT_LAMBDA
    keep_margin: float = DEFAULT_KEEP_MARGIN


def attention(e, lam=DEFAULT_LAMBDA, keep_margin=DEFAULT_KEEP_MARGIN):
    return AttentionMap(_sigmoid(1.0 / np.asarray(e)), lam, keep_margin)


def _threshold_mask(importance, keep_margin):
    """1 = keep. Drops locations whose min-max scaled importance exceeds ``keep_margin``.

    Raw attention lives in (sigmoid(0.5), 1); thresholding it unscaled against
    the max drops everything for margins much below 1. A flat profile drops
    nothing.
    """
    lo = importance.min(axis=-1, keepdims=True)
    span = importance.max(axis=-1, keepdims=True) - lo
    scaled = np.divide(importance - lo, span, out=np.zeros_like(importance), where=span > 0)
    return (scaled <= keep_margin).astype(np.float64)


def drop_masks(att, keep_margin=DEFAULT_KEEP_MARGIN):
    """Spatial mask ``[..., V]`` and temporal mask ``[..., T]`` from attention ``[..., C, T, V]``.

    Importance per joint is the attention averaged over (C, T); per frame,
    averaged over (C, V).
    """
    if not 0 < keep_margin <= 1:
        raise ValueError("keep_margin must lie in (0, 1]")
    a = att.values if isinstance(att, AttentionMap) else np.asarray(att)
    ms = _threshold_mask(a.mean(axis=(-3, -2)), keep_margin)
    mt = _threshold_mask(a.mean(axis=(-3, -1)), keep_margin)
    _check_nonempty(ms, mt)
    return ms, mt


def _check_nonempty(ms, mt):
    if np.any(np.sum(ms, axis=-1) == 0):
        raise DegenerateMaskError("spatial mask drops every joint")
    if np.any(np.sum(mt, axis=-1) == 0):
        raise DegenerateMaskError("temporal mask drops every frame")


def mask_and_scale(x, ms, mt):
    """Apply spatial then temporal masks with count/count_ones renormalisation."""
    ms = np.asarray(ms, dtype=np.float64)
    mt = np.asarray(mt, dtype=np.float64)
    _check_nonempty(ms, mt)
    scale_s = ms.shape[-1] / ms.sum(axis=-1)
    scale_t = mt.shape[-1] / mt.sum(axis=-1)
    # broadcast [.., V] over (C, T) and [.., T] over (C, V)
    s_full = (ms * scale_s[..., None])[..., None, None, :]
    t_full = (mt * scale_t[..., None])[..., None, :, None]
    if isinstance(x, ad.Tensor):
        return ad.masked_mul(ad.masked_mul(x, s_full), t_full)
    return np.asarray(x) * s_full * t_full


def drop(x, att, keep_margin=DEFAULT_KEEP_MARGIN):
    """Mask-and-scale ``x`` by the attention-derived masks.

    Raises :class:`DegenerateMaskError` when a mask would drop everything.
    """
    ms, mt = drop_masks(att, keep_margin)
    return mask_and_scale(x, ms, mt)


def eadm(x, lam=DEFAULT_LAMBDA, keep_margin=DEFAULT_KEEP_MARGIN):
    """Energy, attention and drop for a batch ``[N, C, T, V]``.

    Samples whose masks degenerate pass through unchanged.
    """
    data = x.data if isinstance(x, ad.Tensor) else np.asarray(x)
    att = attention(energy(data, lam), lam, keep_margin).values
    n, _, t, v = data.shape
    ms = np.ones((n, v))
    mt = np.ones((n, t))
    for i in range(n):
        try:
            ms[i], mt[i] = drop_masks(att[i], keep_margin)
        except DegenerateMaskError:
            pass
    return mask_and_scale(x, ms, mt), (ms, mt)
