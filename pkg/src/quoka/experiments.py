"""Ablation and benchmark runners behind the command-line interface.

The ablation grid runs every selector arm over shared planted-needle
workloads and reports output error, mass recall, needle recall and wall
time per (arm, budget, query-count, seed) cell.  The bench runner wraps the
complexity probe.
"""

from __future__ import annotations

import time

import numpy as np

from .attention import AttentionBatch, HeadLayout, attention_weights, chunked_attention, dense_attention
from .errors import ConfigError
from .harness import (
    NeedleWorkload,
    attention_error,
    complexity_probe,
    gen_needle_workload,
    kv_recall,
    needle_recall,
)
from .prefill import build_selector
from .selectors import SelectorConfig

METRICS_SCHEMA = "quoka-metrics-v1"
METRICS_COLUMNS = ("selector", "T", "B_CP", "B_SA", "N_Q", "seed",
                   "output_l2_error", "kv_recall", "needle_recall", "time_ms")
BENCH_SCHEMA = "quoka-bench-v1"
BENCH_COLUMNS = ("selector", "mode", "T", "B_CP", "B_SA", "N_Q", "repeats", "median_s")

PIPELINE_ARMS = {
    "cosine-max": dict(scoring="cosine", query_aggregation="max"),
    "cosine-mean": dict(scoring="cosine", query_aggregation="mean"),
    "dot-max": dict(scoring="dot", query_aggregation="max"),
    "dot-mean": dict(scoring="dot", query_aggregation="mean"),
    "sample-attention": dict(scoring="dot", query_aggregation="mean",
                             query_subselection="uniform", gqa_preaggregate=False),
}


def arm_selector_spec(arm: str, b_sa: int, n_q: int, layout: HeadLayout, options: dict):
    """Selector spec for a named ablation/baseline arm."""
    if arm in PIPELINE_ARMS:
        return SelectorConfig(B_SA=b_sa, N_Q=n_q, **PIPELINE_ARMS[arm])
    if arm == "sparq":
        return {"kind": "sparq", "d_l": int(options.get("sparq_d_l", max(1, layout.d // 2))),
                "B_SA": b_sa}
    if arm == "loki":
        return {"kind": "loki", "d_l": int(options.get("loki_d_l", max(1, layout.d // 2))),
                "B_SA": b_sa}
    if arm == "less-is-more":
        base = SelectorConfig(B_SA=b_sa, N_Q=n_q)
        return {"kind": "less_is_more",
                "scoring_layers": list(options.get("scoring_layers", [0])),
                "base": {"kind": "quoka", **base.to_json()}}
    raise ConfigError(f"unknown selector arm {arm!r}")


def needle_instance(section: dict, seed: int):
    """Shared per-seed workload for every arm of the grid."""
    t = int(section["T"])
    b_cp = int(section["B_CP"])
    count = int(section.get("needles", 4))
    rng = np.random.default_rng(seed)
    cacheable = t - b_cp                # needles must predate the final chunk
    positions = tuple(int(p) for p in rng.choice(cacheable, size=count, replace=False))
    spec = NeedleWorkload(T=t, needle_positions=positions,
                          alignment=float(section.get("alignment", 0.9)),
                          noise_scale=float(section.get("noise_scale", 0.6)),
                          seed=seed)
    layout = HeadLayout.from_json(section["layout"])
    return gen_needle_workload(spec, layout), layout


def run_ablation(config: dict) -> list[dict]:
    """Run the arm x B_SA x N_Q x seed grid; one metrics row per cell."""
    section = config["ablate"]
    arms = list(section["arms"])
    b_sa_grid = [int(b) for b in section["B_SA_grid"]]
    n_q_grid = [int(n) for n in section["N_Q_grid"]]
    seeds = int(section["seeds"])
    if not arms or not b_sa_grid or not n_q_grid or seeds < 1:
        raise ConfigError("ablation grid is empty")
    base_seed = int(config.get("seed", 0))
    t = int(section["T"])
    b_cp = int(section["B_CP"])
    rows = []
    for i in range(seeds):
        seed = base_seed + i
        (q, k, v, needles), layout = needle_instance(section, seed)
        dense = dense_attention(AttentionBatch(q, k, v, layout))
        t_cached = (t - 1) // b_cp * b_cp          # positions cached before the final chunk
        final_chunk = (t - 1) // b_cp
        q_final = q[:, t_cached:]
        weights = attention_weights(
            AttentionBatch(q_final, k, v, layout, causal_offset=t_cached))[:, :, :t_cached]
        for arm in arms:
            for b_sa in b_sa_grid:
                for n_q in n_q_grid:
                    spec = arm_selector_spec(arm, b_sa, n_q, layout, section)
                    hook = build_selector(spec, layout, seed)
                    t0 = time.perf_counter()
                    sparse, _ = chunked_attention(q, k, v, layout, b_cp, hook)
                    elapsed_ms = (time.perf_counter() - t0) * 1e3
                    selection = hook(q_final, k[:, :t_cached], layer=0, chunk=final_chunk)
                    rows.append({
                        "selector": arm,
                        "T": t,
                        "B_CP": b_cp,
                        "B_SA": b_sa,
                        "N_Q": n_q,
                        "seed": seed,
                        "output_l2_error": attention_error(dense, sparse),
                        "kv_recall": kv_recall(selection, weights, b_sa, layout),
                        "needle_recall": needle_recall(selection, needles),
                        "time_ms": elapsed_ms,
                    })
    return rows


def run_bench(config: dict):
    """Run the complexity probe; returns (rows, slopes, speedup)."""
    section = config["bench"]
    layout = HeadLayout.from_json(section["layout"])
    b_sa = int(section["B_SA"])
    n_q = int(section["N_Q"])
    b_cp = int(section["B_CP"])
    arm_names = list(section.get("arms", ["quoka"]))
    arm_specs = {}
    for arm in arm_names:
        name = "quoka" if arm == "quoka" else arm
        spec_arm = "cosine-max" if arm == "quoka" else arm
        arm_specs[name] = arm_selector_spec(spec_arm, b_sa, n_q, layout, section)
    probe = complexity_probe(section["T_list"], layout, b_cp, arm_specs,
                             repeats=int(section.get("repeats", 3)),
                             seed=int(config.get("seed", 0)))
    rows = []
    for (arm, mode), per_t in sorted(probe.medians.items()):
        for t_val, med in sorted(per_t.items()):
            rows.append({
                "selector": arm, "mode": mode, "T": t_val, "B_CP": b_cp,
                "B_SA": b_sa, "N_Q": n_q, "repeats": probe.repeats, "median_s": med,
            })
    slopes = {f"{arm}/{mode}": s for (arm, mode), s in sorted(probe.slopes.items())}
    speedup = probe.speedup("quoka") if ("quoka", "full_prefill") in probe.medians else None
    return rows, slopes, speedup
