"""The selection pipeline, one stage at a time.

Given a chunk of queries and a cache of keys, the canonical pipeline
 1. keeps the queries least cosine-similar to the mean query,
 2. L2-normalizes queries and keys,
 3. averages the normalized queries within each KV group (exact by
    linearity of the mean),
 4. scores every cached key by cosine similarity, takes the max over the
    retained query slots, and keeps the top B_SA positions per kv head.
"""

import numpy as np

from quoka import (
    HeadLayout,
    SelectorConfig,
    gen_random_qkv,
    preaggregate_queries,
    quoka_select,
    subselect_queries,
)
from quoka.linalg import l2_normalize_rows, reduce, topk_indices

layout = HeadLayout(n_q=4, n_kv=2, d=16)
t_chunk, t_cache = 12, 40
q, _, _ = gen_random_qkv(layout, t_chunk, seed=1)
_, k_cache, _ = gen_random_qkv(layout, t_cache, seed=2)
cfg = SelectorConfig(B_SA=8, N_Q=4)

q_sub = subselect_queries(q, cfg.N_Q, cfg.eps)
print(f"1. query subselection: {q.shape[1]} queries -> {q_sub.shape[1]} per head")

q_norm = l2_normalize_rows(q_sub, cfg.eps)
k_norm = l2_normalize_rows(k_cache, cfg.eps)
print(f"2. normalized: every row has unit norm "
      f"(max deviation {np.abs(np.linalg.norm(q_norm, axis=-1) - 1).max():.1e})")

q_bar = preaggregate_queries(q_norm, layout)
print(f"3. pre-aggregation: {layout.n_q} query heads -> {layout.n_kv} group means, "
      f"shape {q_bar.shape}")

scores = np.stack([q_bar[kv] @ k_norm[kv].T for kv in range(layout.n_kv)])
top = reduce(scores, axis=1, kind="max")
print(f"4. cosine scores {scores.shape} -> per-key max {top.shape}")
for kv in range(layout.n_kv):
    print(f"   kv head {kv}: top-{cfg.B_SA} positions {topk_indices(top[kv], cfg.B_SA).tolist()}")

selection = quoka_select(q, k_cache, cfg, layout)
print(f"\nquoka_select agrees: {[idx.tolist() for idx in selection.indices]}")

full = quoka_select(q, k_cache, SelectorConfig(B_SA=t_cache, N_Q=4), layout)
print(f"full budget selects every cached position: {full.is_full(t_cache)}")
