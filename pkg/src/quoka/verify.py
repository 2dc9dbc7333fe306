"""Cross-module invariant suite.

Each check runs over seeded random instances and reports the first
reproducing seed on failure.  The suite backs the ``verify`` command and the
acceptance tests: chunked attention must match dense, a full selection
budget must be an identity, group pre-aggregation must be linear, the fast
selection path must match the 64-bit brute-force pipeline, and the cosine
bound behind query subselection must hold in Monte-Carlo.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttentionBatch, HeadLayout, chunked_attention, dense_attention
from .harness import attention_error, check_theorem_bound, gen_random_qkv
from .linalg import DTYPE, l2_normalize_rows
from .prefill import build_selector
from .reference import select_reference
from .selectors import SelectorConfig, preaggregate_queries, select_kv

HEAD_CHOICES = ((4, 1), (4, 2), (4, 4), (8, 1), (8, 2), (8, 4))
DIM_CHOICES = (8, 16)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    failing_seed: int | None = None

    def metrics_row(self) -> dict:
        row = {"check": self.name, "passed": self.passed, "detail": self.detail}
        if self.failing_seed is not None:
            row["failing_seed"] = self.failing_seed
        return row


def random_instance(seed: int, max_t: int = 64):
    """Seeded random (layout, q, k, v) with T <= max_t."""
    rng = np.random.default_rng(seed)
    n_q, n_kv = HEAD_CHOICES[rng.integers(len(HEAD_CHOICES))]
    d = DIM_CHOICES[rng.integers(len(DIM_CHOICES))]
    layout = HeadLayout(n_q, n_kv, d)
    seq_len = int(rng.integers(1, max_t + 1))
    q, k, v = gen_random_qkv(layout, seq_len, int(rng.integers(2**63)))
    return layout, q, k, v


def check_chunked_equals_dense(instances: int, tolerance: float, seed: int = 0,
                               max_t: int = 64) -> CheckResult:
    """Chunked attention without selection is exact for every chunk size."""
    worst = 0.0
    for i in range(instances):
        inst_seed = seed + i
        layout, q, k, v = random_instance(inst_seed, max_t)
        seq_len = q.shape[1]
        dense = dense_attention(AttentionBatch(q, k, v, layout))
        for b_cp in sorted({1, 2, 3, seq_len}):
            chunked, _ = chunked_attention(q, k, v, layout, b_cp)
            err = float(np.abs(chunked - dense).max())
            worst = max(worst, err)
            if err > tolerance:
                return CheckResult(
                    "chunked_equals_dense", False,
                    f"max abs error {err:.3e} > {tolerance:.1e} at B_CP={b_cp}", inst_seed)
    return CheckResult("chunked_equals_dense", True,
                       f"{instances} instances, worst abs error {worst:.3e}")


def check_full_budget_identity(instances: int, tolerance: float, seed: int = 0,
                               max_t: int = 64) -> CheckResult:
    """A selection budget covering the whole cache reproduces dense output."""
    worst = 0.0
    for i in range(instances):
        inst_seed = seed + i
        layout, q, k, v = random_instance(inst_seed, max_t)
        seq_len = q.shape[1]
        cfg = SelectorConfig(B_SA=seq_len, N_Q=8)
        hook = build_selector(cfg, layout)
        dense = dense_attention(AttentionBatch(q, k, v, layout))
        b_cp = max(1, seq_len // 3)
        sparse, _ = chunked_attention(q, k, v, layout, b_cp, hook)
        err = attention_error(dense, sparse)
        worst = max(worst, err)
        if err > tolerance:
            return CheckResult("full_budget_identity", False,
                               f"relative error {err:.3e} > {tolerance:.1e}", inst_seed)
    return CheckResult("full_budget_identity", True,
                       f"{instances} instances, worst relative error {worst:.3e}")


def check_preaggregation_linearity(draws: int, tolerance: float, seed: int = 0) -> CheckResult:
    """Dot-of-mean equals mean-of-dots for normalized query groups.

    The identity itself is evaluated in float64 on the float32 pipeline
    outputs, so only the pipeline's own rounding is measured.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(draws):
        g = int(rng.integers(1, 9))
        d = int(rng.integers(2, 65))
        layout = HeadLayout(n_q=g, n_kv=1, d=d)
        q = l2_normalize_rows(rng.standard_normal((g, 1, d), dtype=DTYPE))
        key = rng.standard_normal(d, dtype=DTYPE)
        q_bar = preaggregate_queries(q, layout)[0, 0]
        dot_of_mean = float(q_bar.astype(np.float64) @ key.astype(np.float64))
        mean_of_dots = float(np.mean(q[:, 0].astype(np.float64) @ key.astype(np.float64)))
        err = abs(dot_of_mean - mean_of_dots)
        worst = max(worst, err)
        if err > tolerance:
            return CheckResult("preaggregation_linearity", False,
                               f"|dot-of-mean - mean-of-dots| = {err:.3e} > {tolerance:.1e}",
                               seed + i)
    return CheckResult("preaggregation_linearity", True,
                       f"{draws} draws, worst gap {worst:.3e}")


def check_selection_oracle_equivalence(instances: int, seed: int = 0,
                                       max_t: int = 64) -> CheckResult:
    """Fast float32 selection matches the 64-bit brute-force pipeline exactly."""
    for i in range(instances):
        inst_seed = seed + i
        rng = np.random.default_rng(inst_seed)
        layout, q_full, k_full, _ = random_instance(inst_seed, max_t)
        t_k = k_full.shape[1]
        t_q = int(rng.integers(1, 17))
        q, _, _ = gen_random_qkv(layout, t_q, inst_seed + 1)
        cfg = SelectorConfig(B_SA=int(rng.integers(1, t_k + 1)), N_Q=int(rng.integers(1, 9)))
        got = select_kv(q, k_full, cfg, layout)
        want = select_reference(q, k_full, cfg, layout)
        for kv in range(layout.n_kv):
            if not np.array_equal(got.indices[kv], want[kv]):
                return CheckResult(
                    "selection_oracle_equivalence", False,
                    f"kv head {kv}: fast {got.indices[kv].tolist()} != oracle {want[kv].tolist()}",
                    inst_seed)
    return CheckResult("selection_oracle_equivalence", True,
                       f"{instances} instances, index sets identical")


def check_theorem_monte_carlo(trials: int, dims, seed: int = 0,
                              tolerance: float = 1e-5) -> CheckResult:
    """Zero violations of the cosine bound across dimensions."""
    details = []
    for d in dims:
        report = check_theorem_bound(trials, d, seed, tolerance)
        details.append(f"d={d}: {report.violations} violations, worst margin {report.worst_margin:.2e}")
        if report.violations:
            return CheckResult("theorem_bound_monte_carlo", False, "; ".join(details), seed)
    return CheckResult("theorem_bound_monte_carlo", True, "; ".join(details))


def run_verify_suite(config: dict) -> list[CheckResult]:
    """Run every invariant check per the ``verify`` config section."""
    seed = int(config.get("seed", 0))
    section = config["verify"]
    tol = config["tolerances"]
    return [
        check_chunked_equals_dense(section["instances"], tol["chunked_vs_dense"],
                                   seed, section.get("max_T", 64)),
        check_full_budget_identity(section["instances"], tol["full_budget"],
                                   seed, section.get("max_T", 64)),
        check_preaggregation_linearity(section.get("linearity_draws", 1000),
                                       tol["preaggregation"], seed),
        check_selection_oracle_equivalence(section["oracle_instances"], seed,
                                           section.get("max_T", 64)),
        check_theorem_monte_carlo(section["theorem_trials"], section["theorem_dims"],
                                  seed, tol.get("theorem", 1e-5)),
    ]
