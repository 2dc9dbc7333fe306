"""Query-aware top-k KV-cache subselection for chunked-prefill attention.

The package is organized as a small numpy library: float32 kernels
(:mod:`quoka.linalg`), dense and chunked attention (:mod:`quoka.attention`),
the selection pipeline with ablation arms and baselines
(:mod:`quoka.selectors`), a multi-layer prefill engine
(:mod:`quoka.prefill`), synthetic workloads and metrics
(:mod:`quoka.harness`), 64-bit reference oracles (:mod:`quoka.reference`)
and a ``verify|ablate|bench`` CLI (:mod:`quoka.cli`).
"""

from .attention import (
    AttentionBatch,
    HeadLayout,
    attention_weights,
    chunked_attention,
    dense_attention,
    group_of,
)
from .cache import KVCache
from .errors import (
    BoundsError,
    ConfigError,
    DegenerateInputError,
    DimensionError,
    MeasurementError,
    QuokaError,
    StreamError,
    ValidationError,
)
from .harness import (
    Metrics,
    NeedleWorkload,
    attention_error,
    check_theorem_bound,
    complexity_probe,
    gen_needle_workload,
    gen_random_qkv,
    kv_recall,
    needle_recall,
    random_stream,
)
from .prefill import ArrayQKVStream, PrefillConfig, PrefillStats, build_selector, decode_step, prefill
from .selectors import (
    Selection,
    SelectorConfig,
    less_is_more_gate,
    loki_select,
    preaggregate_queries,
    quoka_select,
    random_orthonormal,
    select_kv,
    sparq_select,
    subselect_queries,
)

__version__ = "0.1.0"

__all__ = [
    "ArrayQKVStream",
    "AttentionBatch",
    "BoundsError",
    "ConfigError",
    "DegenerateInputError",
    "DimensionError",
    "HeadLayout",
    "KVCache",
    "MeasurementError",
    "Metrics",
    "NeedleWorkload",
    "PrefillConfig",
    "PrefillStats",
    "QuokaError",
    "Selection",
    "SelectorConfig",
    "StreamError",
    "ValidationError",
    "attention_error",
    "attention_weights",
    "build_selector",
    "check_theorem_bound",
    "chunked_attention",
    "complexity_probe",
    "decode_step",
    "dense_attention",
    "gen_needle_workload",
    "gen_random_qkv",
    "group_of",
    "kv_recall",
    "less_is_more_gate",
    "loki_select",
    "needle_recall",
    "prefill",
    "preaggregate_queries",
    "quoka_select",
    "random_orthonormal",
    "random_stream",
    "select_kv",
    "sparq_select",
    "subselect_queries",
]
