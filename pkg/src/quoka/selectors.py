"""KV-selection scoring functions.

The canonical pipeline scores cached keys in four steps: keep the queries
least cosine-similar to the mean query, L2-normalize queries and keys,
average the normalized queries within each KV group (pre-aggregation, exact
by linearity of the mean), then take the per-key maximum of the cosine
scores over the retained query slots and keep the top ``B_SA`` positions per
kv head.  Every other scoring/aggregation/subselection combination is an
ablation arm of the same pipeline.  Simplified channel-subselection (SparQ
style), down-projection (Loki style) and layer-gated scoring baselines live
here too.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields

import numpy as np

from .attention import HeadLayout
from .errors import DimensionError, ValidationError
from .linalg import (
    DTYPE,
    _require_finite,
    _stacked_product,
    cosine_sim,
    gather_rows,
    l2_normalize_rows,
    reduce,
    topk_indices,
)

SCORING_KINDS = ("cosine", "dot")
AGGREGATION_KINDS = ("max", "mean")
SUBSELECTION_KINDS = ("keydiff", "uniform", "none")


@dataclass(frozen=True)
class SelectorConfig:
    """Knobs of the selection pipeline.

    The defaults are the canonical configuration: cosine scoring, max
    aggregation over query slots, mean-to-average-query ("keydiff") query
    subselection and GQA pre-aggregation enabled.
    """

    B_SA: int
    N_Q: int
    scoring: str = "cosine"
    query_aggregation: str = "max"
    query_subselection: str = "keydiff"
    gqa_preaggregate: bool = True
    eps: float = 1e-12

    def __post_init__(self):
        if self.B_SA < 1 or self.N_Q < 1:
            raise ValidationError("B_SA and N_Q must be >= 1")
        if self.scoring not in SCORING_KINDS:
            raise ValidationError(f"scoring must be one of {SCORING_KINDS}")
        if self.query_aggregation not in AGGREGATION_KINDS:
            raise ValidationError(f"query_aggregation must be one of {AGGREGATION_KINDS}")
        if self.query_subselection not in SUBSELECTION_KINDS:
            raise ValidationError(f"query_subselection must be one of {SUBSELECTION_KINDS}")
        if self.eps <= 0:
            raise ValidationError("eps must be positive")

    @property
    def canonical(self) -> bool:
        return (self.scoring, self.query_aggregation, self.query_subselection,
                self.gqa_preaggregate) == ("cosine", "max", "keydiff", True)

    def to_json(self) -> dict:
        return {
            "B_SA": self.B_SA,
            "N_Q": self.N_Q,
            "scoring": self.scoring,
            "query_aggregation": self.query_aggregation,
            "query_subselection": self.query_subselection,
            "gqa_preaggregate": self.gqa_preaggregate,
            "eps": self.eps,
        }

    @classmethod
    def from_json(cls, obj) -> "SelectorConfig":
        if isinstance(obj, str):
            obj = json.loads(obj)
        known = {f.name for f in fields(cls)}
        extra = set(obj) - known
        if extra:
            raise ValidationError(f"unknown selector config fields: {sorted(extra)}")
        if "B_SA" not in obj or "N_Q" not in obj:
            raise ValidationError("selector config requires B_SA and N_Q")
        return cls(**obj)


@dataclass(frozen=True)
class Selection:
    """Per-kv-head sorted, unique indices into the cached positions."""

    indices: tuple
    budget_used: int

    def __post_init__(self):
        frozen = []
        for arr in self.indices:
            arr = np.asarray(arr, dtype=np.int64)
            if arr.ndim != 1:
                raise DimensionError("each per-head index list must be flat")
            if arr.size != self.budget_used:
                raise ValidationError("per-head lists must all use the same budget")
            if arr.size and (np.diff(arr) <= 0).any():
                raise ValidationError("indices must be strictly increasing")
            if arr.size and arr[0] < 0:
                raise ValidationError("indices must be non-negative")
            arr.flags.writeable = False
            frozen.append(arr)
        object.__setattr__(self, "indices", tuple(frozen))

    @classmethod
    def full(cls, n_kv: int, t_k: int) -> "Selection":
        idx = np.arange(t_k, dtype=np.int64)
        return cls(tuple(idx.copy() for _ in range(n_kv)), t_k)

    def is_full(self, t_k: int) -> bool:
        return self.budget_used == t_k

    def __eq__(self, other) -> bool:
        if not isinstance(other, Selection):
            return NotImplemented
        return (self.budget_used == other.budget_used
                and len(self.indices) == len(other.indices)
                and all(np.array_equal(a, b) for a, b in zip(self.indices, other.indices)))


def subselect_queries(q: np.ndarray, max_queries: int, eps: float = 1e-12) -> np.ndarray:
    """Keep, per head, the queries least cosine-similar to that head's mean query.

    ``q`` is (n_heads, t_q, d).  When t_q <= max_queries the input is
    returned unchanged.  Retained queries keep their temporal order.
    """
    n_heads, t_q, _ = q.shape
    if t_q <= max_queries:
        return q
    kept = np.empty((n_heads, max_queries, q.shape[2]), dtype=DTYPE)
    for h in range(n_heads):
        mean_q = np.mean(q[h], axis=0, dtype=DTYPE)
        sim = cosine_sim(q[h], mean_q[None, :], eps)[:, 0]
        keep = topk_indices(-sim, max_queries)
        kept[h] = gather_rows(q[h], keep)
    return kept


def subselect_queries_uniform(q: np.ndarray, max_queries: int, seed: int) -> np.ndarray:
    """Sample ``max_queries`` query positions uniformly without replacement.

    One seeded draw of positions is shared by all heads.  Identity when
    t_q <= max_queries.
    """
    t_q = q.shape[1]
    if t_q <= max_queries:
        return q
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(t_q, size=max_queries, replace=False))
    return q[:, keep]


def preaggregate_queries(q_normalized: np.ndarray, layout: HeadLayout) -> np.ndarray:
    """Average already-normalized queries across each KV group.

    (n_q, m, d) in, (n_kv, m, d) out.  Because the mean is linear, dotting
    the group mean with any key equals the group mean of the per-head dots.
    """
    if q_normalized.ndim != 3 or q_normalized.shape[0] != layout.n_q:
        raise DimensionError(f"expected (n_q={layout.n_q}, m, d) queries, got {q_normalized.shape}")
    m, d = q_normalized.shape[1:]
    grouped = q_normalized.reshape(layout.n_kv, layout.group_size, m, d)
    return np.mean(grouped, axis=1, dtype=DTYPE)


def _aggregate_scores(q_scored: np.ndarray, k_scored: np.ndarray, cfg: SelectorConfig,
                      layout: HeadLayout) -> np.ndarray:
    """Per-kv-head score of every cached key, (n_kv, t_k)."""
    if cfg.gqa_preaggregate:
        q_bar = preaggregate_queries(q_scored, layout)
        scores = _stacked_product(q_bar, k_scored)             # (n_kv, m, t_k)
    else:
        m = q_scored.shape[1]
        per_head = _stacked_product(
            q_scored.reshape(layout.n_kv, layout.group_size, m, layout.d),
            k_scored[:, None])                                 # (n_kv, g, m, t_k)
        scores = np.mean(per_head, axis=1, dtype=DTYPE)
    return reduce(scores, axis=1, kind=cfg.query_aggregation)


def select_kv(q: np.ndarray, k_cache: np.ndarray, cfg: SelectorConfig,
              layout: HeadLayout, seed: int | None = None) -> Selection:
    """Run the selection pipeline under an arbitrary config.

    ``q`` is the chunk's queries (n_q, t_q, d); ``k_cache`` the cached keys
    (n_kv, t_k, d).  ``seed`` is required for uniform query subselection and
    ignored otherwise.  An empty cache yields an empty Selection.
    """
    t_k = k_cache.shape[1]
    if t_k == 0:
        return Selection(tuple(np.empty(0, np.int64) for _ in range(layout.n_kv)), 0)

    if cfg.query_subselection == "keydiff":
        q_sub = subselect_queries(q, cfg.N_Q, cfg.eps)
    elif cfg.query_subselection == "uniform":
        if seed is None:
            raise ValidationError("uniform query subselection needs a seed")
        q_sub = subselect_queries_uniform(q, cfg.N_Q, seed)
    else:
        q_sub = q

    if cfg.scoring == "cosine":
        q_scored = l2_normalize_rows(q_sub, cfg.eps)
        k_scored = l2_normalize_rows(k_cache, cfg.eps)
    else:
        q_scored, k_scored = q_sub, k_cache

    agg = _aggregate_scores(q_scored, k_scored, cfg, layout)
    picks = tuple(topk_indices(agg[h], cfg.B_SA) for h in range(layout.n_kv))
    return Selection(picks, min(cfg.B_SA, t_k))


def quoka_select(q: np.ndarray, k_cache: np.ndarray, cfg: SelectorConfig,
                 layout: HeadLayout) -> Selection:
    """Canonical selection pipeline; rejects ablation configs."""
    if not cfg.canonical:
        raise ValidationError("quoka_select requires the canonical config; use select_kv for ablation arms")
    return select_kv(q, k_cache, cfg, layout)


def sparq_select(q: np.ndarray, k_cache: np.ndarray, layout: HeadLayout,
                 d_l: int, b_sa: int) -> Selection:
    """Channel-subselection baseline (single-pass, simplified).

    Per kv head: keep the ``d_l`` channels with the largest mean absolute
    query magnitude over the group's queries, score keys by the truncated
    dot product and aggregate by the mean over queries.  With d_l == d this
    reduces to the dot-scoring, mean-aggregation, no-subselection arm.
    """
    if not 1 <= d_l <= layout.d:
        raise ValidationError(f"d_l must be in [1, {layout.d}]")
    t_k = k_cache.shape[1]
    if t_k == 0:
        return Selection(tuple(np.empty(0, np.int64) for _ in range(layout.n_kv)), 0)
    g = layout.group_size
    picks = []
    for kv in range(layout.n_kv):
        q_group = q[kv * g : (kv + 1) * g]                      # (g, t_q, d)
        magnitude = np.mean(np.abs(q_group), axis=(0, 1), dtype=DTYPE)
        channels = topk_indices(magnitude, d_l)
        scores = _stacked_product(q_group[..., channels], k_cache[kv][:, channels][None])
        agg = np.mean(scores, axis=(0, 1), dtype=DTYPE)
        picks.append(topk_indices(agg, b_sa))
    return Selection(tuple(picks), min(b_sa, t_k))


def loki_select(q: np.ndarray, k_cache: np.ndarray, layout: HeadLayout,
                projection: np.ndarray, b_sa: int) -> Selection:
    """Down-projection baseline: score in a caller-supplied orthonormal basis.

    ``projection`` is (d, d_l) with orthonormal columns (checked to 1e-5).
    Scores are the projected dot products, mean-aggregated over queries.
    """
    if projection.ndim != 2 or projection.shape[0] != layout.d:
        raise DimensionError(f"projection must be ({layout.d}, d_l), got {projection.shape}")
    gram = projection.astype(np.float64).T @ projection.astype(np.float64)
    if np.abs(gram - np.eye(projection.shape[1])).max() > 1e-5:
        raise ValidationError("projection columns are not orthonormal within 1e-5")
    t_k = k_cache.shape[1]
    if t_k == 0:
        return Selection(tuple(np.empty(0, np.int64) for _ in range(layout.n_kv)), 0)
    proj = projection.astype(DTYPE, copy=False)
    g = layout.group_size
    picks = []
    for kv in range(layout.n_kv):
        q_low = _require_finite(q[kv * g : (kv + 1) * g] @ proj, "projection")
        k_low = _require_finite(k_cache[kv] @ proj, "projection")
        scores = _stacked_product(q_low, k_low[None])
        agg = np.mean(scores, axis=(0, 1), dtype=DTYPE)
        picks.append(topk_indices(agg, b_sa))
    return Selection(tuple(picks), min(b_sa, t_k))


def random_orthonormal(d: int, d_l: int, seed: int) -> np.ndarray:
    """Seeded random (d, d_l) matrix with orthonormal columns (QR, sign-fixed)."""
    if not 1 <= d_l <= d:
        raise ValidationError(f"d_l must be in [1, {d}]")
    rng = np.random.default_rng(seed)
    basis, r = np.linalg.qr(rng.standard_normal((d, d_l)))
    basis = basis * np.sign(np.diag(r))
    return basis.astype(DTYPE)


def less_is_more_gate(layer_index: int, scoring_layers) -> bool:
    """True iff this layer recomputes selection scores.

    Layers outside ``scoring_layers`` reuse the most recent Selection
    produced by a scoring layer for the same chunk; if no scoring layer has
    run yet, the full cache is attended.
    """
    return layer_index in scoring_layers


__all__ = [
    "AGGREGATION_KINDS",
    "SCORING_KINDS",
    "SUBSELECTION_KINDS",
    "Selection",
    "SelectorConfig",
    "less_is_more_gate",
    "loki_select",
    "preaggregate_queries",
    "quoka_select",
    "random_orthonormal",
    "select_kv",
    "sparq_select",
    "subselect_queries",
    "subselect_queries_uniform",
]
