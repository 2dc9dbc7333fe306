"""Synthetic workloads, approximation metrics and scaling probes.

The needle workloads plant unit-norm key directions at chosen positions and
append queries that point at them, so a selector's ability to recover the
planted positions is measurable against ground truth.  The metrics cover
the relative output error of sparse vs dense attention, recall of the
dense-attention mass ranking, a Monte-Carlo check of the cosine bound that
motivates query subselection, and wall-clock scaling fits.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .attention import HeadLayout, attend_with_cache
from .cache import KVCache
from .errors import DimensionError, MeasurementError, ValidationError
from .linalg import DTYPE, topk_indices
from .prefill import ArrayQKVStream, PrefillConfig, build_selector, prefill
from .selectors import Selection, random_orthonormal


def gen_random_qkv(layout: HeadLayout, seq_len: int, seed: int):
    """I.i.d. standard-normal Q/K/V for one layer, deterministic per seed."""
    if seq_len < 1:
        raise ValidationError("seq_len must be >= 1")
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((layout.n_q, seq_len, layout.d), dtype=DTYPE)
    k = rng.standard_normal((layout.n_kv, seq_len, layout.d), dtype=DTYPE)
    v = rng.standard_normal((layout.n_kv, seq_len, layout.d), dtype=DTYPE)
    return q, k, v


def random_stream(layout: HeadLayout, seq_len: int, layers: int, seed: int) -> ArrayQKVStream:
    """Multi-layer random stream with per-layer derived seeds."""
    ss = np.random.SeedSequence(seed)
    layer_seeds = ss.generate_state(layers)
    return ArrayQKVStream(
        [gen_random_qkv(layout, seq_len, int(s)) for s in layer_seeds], layout)


@dataclass(frozen=True)
class NeedleWorkload:
    """Planted-retrieval instance description.

    ``alignment`` is the exact cosine between each planted key and the query
    planted for it near the end of the sequence.
    """

    T: int
    needle_positions: tuple
    alignment: float
    noise_scale: float
    seed: int

    def __post_init__(self):
        pos = tuple(int(p) for p in self.needle_positions)
        object.__setattr__(self, "needle_positions", pos)
        if len(set(pos)) != len(pos):
            raise ValidationError("needle positions must be distinct")
        if pos and (min(pos) < 0 or max(pos) >= self.T):
            raise ValidationError("needle positions must lie in [0, T)")
        if not 0 < self.alignment <= 1:
            raise ValidationError("alignment must be in (0, 1]")
        if self.noise_scale < 0:
            raise ValidationError("noise_scale must be >= 0")
        if self.T < 1:
            raise ValidationError("T must be >= 1")


def gen_needle_workload(spec: NeedleWorkload, layout: HeadLayout):
    """Build Q/K/V with planted retrievable positions.

    Keys at needle positions are mutually orthonormal unit vectors; every
    other key is scaled Gaussian noise with its components along the needle
    directions removed.  Non-planted queries cluster around one shared unit
    direction (orthogonal to all needles); for needle j the query at
    position T-1-j points at that needle with cosine exactly ``alignment``
    and away from the cluster, in every query head.  The whole query field
    is scaled so the final planted query's dense softmax mass concentrates
    on its needle even at long T.  Returns (q, k, v, needle_positions).
    """
    m = len(spec.needle_positions)
    if m + 1 > layout.d:
        raise ValidationError(
            f"{m} needles need {m + 1} orthogonal directions, head dim is only {layout.d}")
    if m > spec.T:
        raise ValidationError("more needles than positions")
    rng = np.random.default_rng(spec.seed)
    basis = random_orthonormal(layout.d, m + 1, int(rng.integers(2**63))).astype(np.float64)
    needles = basis[:, :m].T                    # (m, d) orthonormal key directions
    cluster = basis[:, m]                       # unit direction of the query crowd

    k = rng.standard_normal((layout.n_kv, spec.T, layout.d)) * spec.noise_scale
    k -= (k @ needles.T) @ needles              # decorrelate noise keys from needle directions
    for j, pos in enumerate(spec.needle_positions):
        k[:, pos] = needles[j]

    gain = math.sqrt(layout.d) * (math.log(max(spec.T, 2)) + 4.0) / spec.alignment
    q = cluster + spec.noise_scale * rng.standard_normal((layout.n_q, spec.T, layout.d))
    beta = math.sqrt(max(1.0 - spec.alignment**2, 0.0))
    for j in range(m):
        planted = spec.alignment * needles[j] - beta * cluster
        q[:, spec.T - 1 - j] = planted
    q *= gain

    v = rng.standard_normal((layout.n_kv, spec.T, layout.d))
    return (q.astype(DTYPE), k.astype(DTYPE), v.astype(DTYPE),
            np.array(sorted(spec.needle_positions), dtype=np.int64))


@dataclass
class Metrics:
    """One run's scores; timings are excluded from determinism guarantees."""

    output_l2_error: float
    kv_recall: float
    theorem_violations: int = 0
    timings: dict = field(default_factory=dict)
    needle_recall: float | None = None

    def __post_init__(self):
        if self.output_l2_error < 0:
            raise ValidationError("output_l2_error must be >= 0")
        if not (math.isnan(self.kv_recall) or 0.0 <= self.kv_recall <= 1.0):
            raise ValidationError("kv_recall must lie in [0, 1]")


def attention_error(dense_out, sparse_out, eps: float = 1e-12) -> float:
    """Relative Frobenius error ||dense - sparse|| / max(||dense||, eps)."""
    dense_out = np.asarray(dense_out, dtype=np.float64)
    sparse_out = np.asarray(sparse_out, dtype=np.float64)
    if dense_out.shape != sparse_out.shape:
        raise DimensionError(f"shape mismatch: {dense_out.shape} vs {sparse_out.shape}")
    ref = np.linalg.norm(dense_out)
    return float(np.linalg.norm(dense_out - sparse_out) / max(ref, eps))


def kv_recall(selection: Selection, dense_weights: np.ndarray, b_sa: int,
              layout: HeadLayout) -> float:
    """Fraction of the dense top-``b_sa`` mass positions the selection found.

    ``dense_weights`` is the row-stochastic (n_q, t_q, t_cached) attention
    matrix restricted to cached positions; the oracle set per kv head is the
    ``b_sa`` positions with the largest total mass over the group's queries.
    """
    g = layout.group_size
    total = 0.0
    for kv in range(layout.n_kv):
        mass = dense_weights[kv * g : (kv + 1) * g].sum(axis=(0, 1), dtype=np.float64)
        oracle = topk_indices(mass, b_sa)
        hits = np.intersect1d(selection.indices[kv], oracle).size
        total += hits / oracle.size
    return total / layout.n_kv


def needle_recall(selection: Selection, needles: np.ndarray) -> float:
    """Fraction of planted positions present in the selection (NaN if none)."""
    if needles.size == 0:
        return float("nan")
    per_head = [np.intersect1d(idx, needles).size / needles.size for idx in selection.indices]
    return float(np.mean(per_head))


@dataclass
class TheoremReport:
    trials: int
    d: int
    violations: int
    worst_margin: float          # max of cos - bound; negative means slack
    samples: list                # (alpha, beta, cos, bound) for the worst few


def check_theorem_bound(trials: int, d: int, seed: int, tolerance: float = 1e-5) -> TheoremReport:
    """Monte-Carlo check of the query-subselection cosine bound.

    Samples a unit key k, a unit query q* with cos(k, q*) = beta > 0, and a
    unit mean-query direction M with cos(M, k) = alpha < 0 (two-plane
    construction plus random orthogonal completion; the bound depends on the
    mean query only through its direction, and the fixed query and the
    scored query are the same sampled vector).  Verifies
    cos(M, q*) <= 1 + alpha*beta - alpha^2/2 - beta^2/2 within tolerance.
    """
    if d < 2:
        raise ValidationError("need d >= 2")
    if trials < 1:
        raise ValidationError("need trials >= 1")
    rng = np.random.default_rng(seed)
    alpha = -(1.0 - rng.random(trials))          # [-1, 0): includes -1, excludes 0
    beta = 1.0 - rng.random(trials)              # (0, 1]

    def unit(x):
        return x / np.linalg.norm(x, axis=1, keepdims=True)

    k = unit(rng.standard_normal((trials, d)))

    def unit_orthogonal_to(k_rows):
        g = rng.standard_normal((trials, d))
        g -= np.sum(g * k_rows, axis=1, keepdims=True) * k_rows
        return unit(g)

    r1 = unit_orthogonal_to(k)
    r2 = unit_orthogonal_to(k)
    q_star = beta[:, None] * k + np.sqrt(1.0 - beta**2)[:, None] * r1
    m_q = alpha[:, None] * k + np.sqrt(1.0 - alpha**2)[:, None] * r2
    cos = np.sum(m_q * q_star, axis=1)
    bound = 1.0 + alpha * beta - 0.5 * alpha**2 - 0.5 * beta**2
    margin = cos - bound
    violations = int((margin > tolerance).sum())
    worst = np.argsort(-margin)[: min(5, trials)]
    samples = [(float(alpha[i]), float(beta[i]), float(cos[i]), float(bound[i])) for i in worst]
    return TheoremReport(trials, d, violations, float(margin.max()), samples)


@dataclass
class ProbeResult:
    """Median seconds per (arm, mode, T) plus fitted log-log slopes.

    ``mode`` is "per_step" (one chunk against a cache of length T) or
    "full_prefill" (the whole chunked pass over a length-T sequence); the
    two answer different scaling questions and are reported side by side.
    """

    medians: dict                # (arm, mode) -> {T: seconds}
    slopes: dict                 # (arm, mode) -> float
    repeats: int

    def speedup(self, arm: str = "quoka", mode: str = "full_prefill") -> float:
        """Dense-over-arm wall-clock ratio at the largest probed T."""
        dense = self.medians[("dense", mode)]
        sparse = self.medians[(arm, mode)]
        top = max(dense)
        return dense[top] / sparse[top]


def _median_time(fn, repeats: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def fit_loglog_slope(sizes, seconds) -> float:
    """Least-squares slope of log(seconds) against log(size)."""
    return float(np.polyfit(np.log(np.asarray(sizes, float)),
                            np.log(np.asarray(seconds, float)), 1)[0])


def complexity_probe(t_list, layout: HeadLayout, chunk_size: int, arm_specs: dict,
                     repeats: int = 3, seed: int = 0, warmup: int = 1) -> ProbeResult:
    """Time attention arms across cache/sequence lengths.

    ``arm_specs`` maps an arm name to its selector spec (None for dense
    attention); a "dense" arm is always included.  For each T, "per_step"
    times one chunk of ``chunk_size`` fresh positions attending a prefilled
    cache of length T, and "full_prefill" times an entire chunked pass over
    a length-T sequence.  Slopes are fit over the upper half of ``t_list``.
    """
    t_list = [int(t) for t in t_list]
    if len(t_list) < 4 or any(b <= a for a, b in zip(t_list, t_list[1:])):
        raise ValidationError("t_list must be ascending with at least 4 entries")
    if repeats < 3:
        raise ValidationError("need repeats >= 3")
    resolution = time.get_clock_info("perf_counter").resolution
    arm_specs = {"dense": None, **arm_specs}
    hooks = {name: build_selector(spec, layout, seed) for name, spec in arm_specs.items()}
    medians: dict = {(arm, mode): {} for arm in arm_specs for mode in ("per_step", "full_prefill")}

    for t in t_list:
        q, k, v = gen_random_qkv(layout, t + chunk_size, seed)
        # per-step: cache the first t positions outright, attend one fresh chunk
        cache = KVCache(1, layout.n_kv, layout.d, capacity=t)
        cache.append(0, k[:, :t], v[:, :t])
        q_chunk = q[:, t : t + chunk_size]
        k_chunk = k[:, t : t + chunk_size]
        v_chunk = v[:, t : t + chunk_size]
        for arm, hook in hooks.items():
            med = _median_time(
                lambda: attend_with_cache(cache, 0, q_chunk, k_chunk, v_chunk,
                                          layout, hook, chunk_index=0),
                repeats, warmup)
            medians[(arm, "per_step")][t] = med

        stream = ArrayQKVStream([(q[:, :t], k[:, :t], v[:, :t])], layout)
        for arm, spec in arm_specs.items():
            cfg = PrefillConfig(B_CP=chunk_size, layout=layout, selector=spec, layers=1, seed=seed)
            med = _median_time(lambda: prefill(stream, cfg), repeats, warmup)
            medians[(arm, "full_prefill")][t] = med

    floor = min(min(per_t.values()) for per_t in medians.values())
    if floor < 10 * resolution:
        raise MeasurementError(
            f"median {floor:.3e}s is below 10x clock resolution {resolution:.3e}s")

    upper = t_list[len(t_list) // 2 :]
    slopes = {
        key: fit_loglog_slope(upper, [per_t[t] for t in upper])
        for key, per_t in medians.items()
    }
    return ProbeResult(medians=medians, slopes=slopes, repeats=repeats)
