"""Independent 64-bit reference implementations.

These oracles deliberately avoid the float32 fast path: plain loops and
float64 numpy, with their own tie-break logic (stable argsort).  They exist
so the production kernels can be checked against something that shares no
code with them.
"""

from __future__ import annotations

import math

import numpy as np

from .attention import HeadLayout


def matmul_reference(a, b_transposed) -> np.ndarray:
    """Triple-loop float64 product a @ b_transposed.T (small inputs only)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b_transposed, dtype=np.float64)
    m, k = a.shape
    n = b.shape[0]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[j, t]
            out[i, j] = acc
    return out


def softmax_reference(row) -> np.ndarray:
    """Float64 softmax of one finite row."""
    row = np.asarray(row, dtype=np.float64)
    e = np.exp(row - row.max())
    return e / e.sum()


def topk_reference(scores, k: int) -> np.ndarray:
    """Top-k indices by full stable sort; ties go to the lower index."""
    s = np.asarray(scores)
    order = np.argsort(-s, kind="stable")
    return np.sort(order[: min(k, s.size)]).astype(np.int64)


def attention_reference(q, k, v, layout: HeadLayout, causal_offset: int = 0) -> np.ndarray:
    """Per-element float64 causal attention, one query row at a time."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    t_q = q.shape[1]
    out = np.zeros((layout.n_q, t_q, layout.d))
    scale = 1.0 / math.sqrt(layout.d)
    for h in range(layout.n_q):
        kv = h // (layout.n_q // layout.n_kv)
        for i in range(t_q):
            visible = min(causal_offset + i + 1, k.shape[1])
            logits = k[kv, :visible] @ q[h, i] * scale
            probs = softmax_reference(logits)
            out[h, i] = probs @ v[kv, :visible]
    return out


def _unit_rows(x: np.ndarray, eps: float) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norms, eps)


def subselect_reference(q64: np.ndarray, max_queries: int, eps: float) -> np.ndarray:
    """Float64 query subselection: full sort of cosine-to-mean, per head."""
    n_heads, t_q, _ = q64.shape
    if t_q <= max_queries:
        return q64
    kept = []
    for h in range(n_heads):
        mean_q = q64[h].mean(axis=0)
        mean_unit = mean_q / max(np.linalg.norm(mean_q), eps)
        sim = _unit_rows(q64[h], eps) @ mean_unit
        order = np.argsort(sim, kind="stable")      # smallest similarity first
        keep = np.sort(order[:max_queries])
        kept.append(q64[h][keep])
    return np.stack(kept)


def select_reference(q, k_cache, cfg, layout: HeadLayout, seed: int | None = None) -> tuple:
    """Brute-force float64 run of the selection pipeline, no shortcuts.

    Scores every (query head, slot, key) triple explicitly and averages the
    per-head scores across each KV group instead of pre-aggregating queries.
    Returns per-kv-head sorted index arrays.
    """
    q64 = np.asarray(q, dtype=np.float64)
    k64 = np.asarray(k_cache, dtype=np.float64)
    t_k = k64.shape[1]
    if t_k == 0:
        return tuple(np.empty(0, np.int64) for _ in range(layout.n_kv))

    if cfg.query_subselection == "keydiff":
        q_sub = subselect_reference(q64, cfg.N_Q, cfg.eps)
    elif cfg.query_subselection == "uniform":
        t_q = q64.shape[1]
        if t_q > cfg.N_Q:
            rng = np.random.default_rng(seed)
            keep = np.sort(rng.choice(t_q, size=cfg.N_Q, replace=False))
            q_sub = q64[:, keep]
        else:
            q_sub = q64
    else:
        q_sub = q64

    if cfg.scoring == "cosine":
        q_sub = _unit_rows(q_sub, cfg.eps)
        k64 = _unit_rows(k64, cfg.eps)

    g = layout.group_size
    m = q_sub.shape[1]
    picks = []
    for kv in range(layout.n_kv):
        grouped = np.zeros((m, t_k))
        for within in range(g):
            h = kv * g + within
            for s in range(m):
                grouped[s] += k64[kv] @ q_sub[h, s]
        grouped /= g
        agg = grouped.max(axis=0) if cfg.query_aggregation == "max" else grouped.mean(axis=0)
        picks.append(topk_reference(agg, cfg.B_SA))
    return tuple(picks)
