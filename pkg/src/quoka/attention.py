"""Dense causal attention, chunked attention and GQA head bookkeeping.

The dense path is the exact reference that every sparse selector is asked to
approximate.  Chunked attention processes a sequence in fixed-size blocks
against an append-only cache; without a selection hook it reproduces the
dense output up to float32 reassociation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .cache import KVCache
from .errors import BoundsError, DimensionError, ValidationError
from .linalg import DTYPE, MASK_SENTINEL, _require_finite, gather_rows


@dataclass(frozen=True)
class HeadLayout:
    """Head-group geometry: n_q query heads sharing n_kv key/value heads."""

    n_q: int
    n_kv: int
    d: int

    def __post_init__(self):
        if self.n_q < 1 or self.n_kv < 1 or self.d < 1:
            raise ValidationError("head counts and head dim must be >= 1")
        if self.n_q % self.n_kv != 0:
            raise ValidationError(f"n_q={self.n_q} is not a multiple of n_kv={self.n_kv}")

    @property
    def group_size(self) -> int:
        return self.n_q // self.n_kv

    def to_json(self) -> dict:
        return {"n_q": self.n_q, "n_kv": self.n_kv, "d": self.d}

    @classmethod
    def from_json(cls, obj: dict) -> "HeadLayout":
        extra = set(obj) - {"n_q", "n_kv", "d"}
        if extra:
            raise ValidationError(f"unknown layout fields: {sorted(extra)}")
        return cls(int(obj["n_q"]), int(obj["n_kv"]), int(obj["d"]))


def group_of(query_head: int, layout: HeadLayout) -> int:
    """KV-head index serving the given query head."""
    if not 0 <= query_head < layout.n_q:
        raise BoundsError(f"query head {query_head} outside [0, {layout.n_q})")
    return query_head // layout.group_size


@dataclass(frozen=True)
class AttentionBatch:
    """One attention call: queries plus the keys/values they may attend.

    ``causal_offset`` is the number of already-cached positions preceding the
    first query; query i may attend key j iff j < causal_offset + i + 1.
    """

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    layout: HeadLayout
    causal_offset: int = 0

    def __post_init__(self):
        lay = self.layout
        if self.q.ndim != 3 or self.q.shape[0] != lay.n_q or self.q.shape[2] != lay.d:
            raise DimensionError(f"Q shape {self.q.shape} does not match layout {lay}")
        if self.k.shape != (lay.n_kv, self.k.shape[1], lay.d) or self.v.shape != self.k.shape:
            raise DimensionError(f"K/V shapes {self.k.shape}/{self.v.shape} do not match layout {lay}")
        if self.q.shape[1] < 1:
            raise DimensionError("need at least one query position")
        if self.causal_offset < 0 or self.k.shape[1] < self.causal_offset:
            raise DimensionError(f"causal_offset {self.causal_offset} outside [0, {self.k.shape[1]}]")


def _causal_scores(q, k, layout: HeadLayout, offset: int) -> np.ndarray:
    """Scaled, causally masked scores (n_kv, g, t_q, t_k), masked in place.

    Keys at positions 0..offset-1 are visible to every query; from position
    ``offset`` on, query i sees exactly the first i+1 tail columns.  Hidden
    entries carry the mask sentinel.
    """
    t_q = q.shape[1]
    t_k = k.shape[1]
    g = layout.group_size
    scale = DTYPE(1.0 / math.sqrt(layout.d))
    q2 = q.reshape(layout.n_q * t_q, layout.d)
    scores = np.empty((layout.n_kv, g, t_q, t_k), dtype=DTYPE)
    for kv in range(layout.n_kv):
        block = q2[kv * g * t_q : (kv + 1) * g * t_q] @ k[kv].T
        scores[kv] = block.reshape(g, t_q, t_k)
    _require_finite(scores, "attention scores")
    scores *= scale
    if t_k > offset:
        hidden = np.triu(np.ones((t_q, t_k - offset), dtype=bool), k=1)
        scores[..., offset:][..., hidden] = MASK_SENTINEL
    return scores


def _softmax_last_inplace(scores: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, in place; sentinel entries become exact 0.

    Relies on float32 exp underflow: exp(sentinel - rowmax) is 0.0 whenever
    any non-sentinel entry is present in the row, which the causal structure
    guarantees (every query sees at least key 0).
    """
    m = scores.max(axis=-1, keepdims=True)
    np.subtract(scores, m, out=scores)
    np.exp(scores, out=scores)
    denom = scores.sum(axis=-1, keepdims=True)
    np.divide(scores, denom, out=scores)
    return scores


def _attend(q, k, v, layout: HeadLayout, offset: int) -> np.ndarray:
    """Grouped scaled-dot-product attention core.

    ``q`` is (n_q, t_q, d); ``k``/``v`` are (n_kv, t_k, d); ``offset`` is the
    number of leading key positions visible to every query.
    """
    t_q = q.shape[1]
    probs = _softmax_last_inplace(_causal_scores(q, k, layout, offset))
    g = layout.group_size
    out = np.empty((layout.n_q, t_q, layout.d), dtype=DTYPE)
    flat = out.reshape(layout.n_kv, g * t_q, layout.d)
    for kv in range(layout.n_kv):
        flat[kv] = probs[kv].reshape(g * t_q, k.shape[1]) @ v[kv]
    return out


def dense_attention(batch: AttentionBatch) -> np.ndarray:
    """Causal attention over the full key/value set, (n_q, t_q, d) output."""
    return _attend(batch.q, batch.k, batch.v, batch.layout, batch.causal_offset)


# A selection hook maps (chunk queries, cached keys) to a Selection (see
# quoka.selectors) or None for full attention; layer/chunk index the call so
# stochastic hooks stay reproducible.
SelectionHook = Callable[..., Optional[object]]


def attend_with_cache(cache: KVCache, layer: int, q_chunk, k_chunk, v_chunk,
                      layout: HeadLayout, hook: SelectionHook | None = None,
                      chunk_index: int = 0):
    """Attend one chunk against (selected cache | current chunk).

    The hook, if any, only ever reduces keys/values cached from *prior*
    chunks; the current chunk is always attended in full.  Returns
    ``(out, selection)`` where ``selection`` is None when no reduction
    happened.  The caller appends the chunk to the cache afterwards.
    """
    t_cached = cache.length(layer)
    selection = None
    if hook is not None and t_cached > 0:
        selection = hook(q_chunk, cache.keys(layer), layer=layer, chunk=chunk_index)
    if selection is None:
        k_sel = cache.keys(layer)
        v_sel = cache.values(layer)
    else:
        k_cached = cache.keys(layer)
        v_cached = cache.values(layer)
        k_sel = np.stack([gather_rows(k_cached[h], selection.indices[h]) for h in range(layout.n_kv)])
        v_sel = np.stack([gather_rows(v_cached[h], selection.indices[h]) for h in range(layout.n_kv)])
    n_visible = k_sel.shape[1]
    k_ctx = np.concatenate([k_sel, k_chunk], axis=1) if n_visible else k_chunk
    v_ctx = np.concatenate([v_sel, v_chunk], axis=1) if n_visible else v_chunk
    out = _attend(q_chunk, k_ctx, v_ctx, layout, n_visible)
    return out, selection


def chunked_attention(q_all, k_all, v_all, layout: HeadLayout, chunk_size: int,
                      selector: SelectionHook | None = None):
    """Process a full sequence in blocks of ``chunk_size`` positions.

    Returns ``(out, cache)``: the concatenated (n_q, T, d) output and the
    final append-only cache, which always ends up holding all T positions
    regardless of the selector.  The last block may be ragged.
    """
    if chunk_size < 1:
        raise ValidationError("chunk_size must be >= 1")
    seq_len = q_all.shape[1]
    if k_all.shape[1] != seq_len or v_all.shape[1] != seq_len:
        raise DimensionError("Q, K and V must cover the same positions")
    cache = KVCache(1, layout.n_kv, layout.d, capacity=seq_len)
    outs = []
    for ci, start in enumerate(range(0, seq_len, chunk_size)):
        stop = min(start + chunk_size, seq_len)
        qc = q_all[:, start:stop]
        kc = k_all[:, start:stop]
        vc = v_all[:, start:stop]
        out, _ = attend_with_cache(cache, 0, qc, kc, vc, layout, selector, chunk_index=ci)
        cache.append(0, kc, vc)
        outs.append(out)
    return np.concatenate(outs, axis=1), cache


def expand_weights(probs_grouped: np.ndarray, layout: HeadLayout) -> np.ndarray:
    """Reshape (n_kv, g, t_q, t_k) attention weights to (n_q, t_q, t_k)."""
    n_kv, g, t_q, t_k = probs_grouped.shape
    if (n_kv, g) != (layout.n_kv, layout.group_size):
        raise DimensionError("weight shape does not match layout")
    return probs_grouped.reshape(layout.n_q, t_q, t_k)


def attention_weights(batch: AttentionBatch) -> np.ndarray:
    """Row-stochastic attention matrix (n_q, t_q, t_k) of the dense path."""
    probs = _softmax_last_inplace(
        _causal_scores(batch.q, batch.k, batch.layout, batch.causal_offset))
    return expand_weights(probs, batch.layout)
