"""Chunked-prefill driver over a multi-layer QKV stream.

Layers here are independent attention instances fed by a supplier (there is
no FFN or residual stream); they share only the chunk schedule and the
selector.  The same per-chunk core backs single-step decoding, so running
``decode_step`` position by position is bit-identical to ``prefill`` with a
chunk size of 1.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .attention import HeadLayout, SelectionHook, attend_with_cache
from .cache import KVCache
from .errors import ConfigError, StreamError, ValidationError
from .selectors import (
    SelectorConfig,
    less_is_more_gate,
    loki_select,
    random_orthonormal,
    select_kv,
    sparq_select,
)


class ArrayQKVStream:
    """QKV supplier backed by in-memory per-layer arrays."""

    def __init__(self, layers_qkv, layout: HeadLayout):
        if not layers_qkv:
            raise StreamError("stream needs at least one layer")
        self.layout = layout
        seq_len = layers_qkv[0][0].shape[1]
        for li, (q, k, v) in enumerate(layers_qkv):
            if q.shape != (layout.n_q, seq_len, layout.d):
                raise StreamError(f"layer {li}: Q shape {q.shape} mismatches layer 0 length {seq_len}")
            if k.shape != (layout.n_kv, seq_len, layout.d) or v.shape != k.shape:
                raise StreamError(f"layer {li}: K/V shapes {k.shape}/{v.shape} inconsistent")
        self._layers = list(layers_qkv)
        self.seq_len = seq_len

    @property
    def layers(self) -> int:
        return len(self._layers)

    def chunk(self, layer: int, start: int, stop: int):
        q, k, v = self._layers[layer]
        return q[:, start:stop], k[:, start:stop], v[:, start:stop]


@dataclass
class PrefillConfig:
    """Chunk size, selector variant, layer count, head layout and run seed."""

    B_CP: int
    layout: HeadLayout
    selector: object = None      # None | SelectorConfig | {"kind": ...} dict
    layers: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.B_CP < 1:
            raise ValidationError("B_CP must be >= 1")
        if self.layers < 1:
            raise ValidationError("layers must be >= 1")

    def to_json(self) -> dict:
        sel = self.selector
        if isinstance(sel, SelectorConfig):
            sel = {"kind": "quoka", **sel.to_json()}
        return {
            "B_CP": self.B_CP,
            "layout": self.layout.to_json(),
            "selector": sel,
            "layers": self.layers,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PrefillConfig":
        known = {"B_CP", "layout", "selector", "layers", "seed"}
        extra = set(obj) - known
        if extra:
            raise ConfigError(f"unknown prefill config fields: {sorted(extra)}")
        return cls(
            B_CP=int(obj["B_CP"]),
            layout=HeadLayout.from_json(obj["layout"]),
            selector=obj.get("selector"),
            layers=int(obj.get("layers", 1)),
            seed=int(obj.get("seed", 0)),
        )


@dataclass
class PrefillStats:
    """Per-chunk accounting: selected-KV counts, scoring op estimates, timings.

    ``selected`` is [layer][chunk]; an entry of -1 means the chunk attended
    the full cache (no selector fired).  Wall times are excluded from all
    determinism guarantees.
    """

    chunk_bounds: list = field(default_factory=list)
    selected: list = field(default_factory=list)
    scoring_ops_measured: list = field(default_factory=list)
    scoring_ops_predicted: list = field(default_factory=list)
    chunk_seconds: list = field(default_factory=list)
    wall_seconds: float = 0.0


def _derived_seed(seed: int, layer: int, chunk: int) -> int:
    state = np.random.SeedSequence(entropy=seed, spawn_key=(layer, chunk)).generate_state(2)
    return int(state[0]) << 32 | int(state[1])


def build_selector(spec, layout: HeadLayout, seed: int = 0) -> SelectionHook | None:
    """Turn a selector spec into a per-chunk hook.

    Accepts None / "none" (dense), a SelectorConfig (pipeline arms), or a
    dict tagged by "kind": {"quoka", "sparq", "loki", "less_is_more"}.
    """
    if spec is None or spec == "none":
        return None
    if isinstance(spec, SelectorConfig):
        cfg = spec

        def hook(q_chunk, k_cached, *, layer=0, chunk=0):
            call_seed = None
            if cfg.query_subselection == "uniform":
                call_seed = _derived_seed(seed, layer, chunk)
            return select_kv(q_chunk, k_cached, cfg, layout, seed=call_seed)

        return hook
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError(f"selector spec must be None, a SelectorConfig or a kind-tagged dict, got {spec!r}")
    kind = spec["kind"]
    rest = {k: v for k, v in spec.items() if k != "kind"}
    if kind == "quoka":
        return build_selector(SelectorConfig.from_json(rest), layout, seed)
    if kind == "sparq":
        d_l = int(rest.pop("d_l"))
        b_sa = int(rest.pop("B_SA"))
        if rest:
            raise ConfigError(f"unknown sparq fields: {sorted(rest)}")
        return lambda q, k, *, layer=0, chunk=0: sparq_select(q, k, layout, d_l, b_sa)
    if kind == "loki":
        d_l = int(rest.pop("d_l"))
        b_sa = int(rest.pop("B_SA"))
        proj_seed = int(rest.pop("seed", seed))
        if rest:
            raise ConfigError(f"unknown loki fields: {sorted(rest)}")
        projection = random_orthonormal(layout.d, d_l, proj_seed)
        return lambda q, k, *, layer=0, chunk=0: loki_select(q, k, layout, projection, b_sa)
    if kind == "less_is_more":
        scoring_layers = frozenset(int(i) for i in rest.pop("scoring_layers"))
        base = build_selector(rest.pop("base"), layout, seed)
        if rest:
            raise ConfigError(f"unknown less_is_more fields: {sorted(rest)}")
        state = {"chunk": None, "selection": None}

        def gated(q_chunk, k_cached, *, layer=0, chunk=0):
            if state["chunk"] != chunk:
                state["chunk"] = chunk
                state["selection"] = None
            if less_is_more_gate(layer, scoring_layers):
                state["selection"] = base(q_chunk, k_cached, layer=layer, chunk=chunk)
            return state["selection"]    # None until a scoring layer ran: full cache

        return gated
    raise ConfigError(f"unknown selector kind {kind!r}")


def _quoka_predicted_ops(cfg: SelectorConfig, layout: HeadLayout, b_cp: int, t_cached: int) -> int:
    # Scoring-cost model for the canonical pipeline: B_CP + N_Q(1 + d n_kv) T.
    return b_cp + cfg.N_Q * (1 + layout.d * layout.n_kv) * t_cached


def _quoka_measured_ops(cfg: SelectorConfig, layout: HeadLayout, t_q: int, t_cached: int) -> int:
    m = min(cfg.N_Q, t_q)
    subsel = layout.n_q * t_q * layout.d if t_q > cfg.N_Q else 0
    normalize = (layout.n_kv * t_cached + layout.n_q * m) * layout.d
    score = layout.n_kv * m * t_cached * layout.d
    aggregate = layout.n_kv * m * t_cached
    return subsel + normalize + score + aggregate


def prefill(stream, cfg: PrefillConfig):
    """Run chunked prefill over every layer of ``stream``.

    Returns ``(outputs, cache, stats)``: per-layer (n_q, T, d) outputs, the
    final lossless cache (length T in every layer) and per-chunk stats.
    """
    if stream.layers != cfg.layers:
        raise StreamError(f"stream has {stream.layers} layers, config says {cfg.layers}")
    if stream.layout != cfg.layout:
        raise StreamError("stream layout does not match config layout")
    seq_len = stream.seq_len
    if seq_len < 1:
        raise StreamError("stream is empty")
    hook = build_selector(cfg.selector, cfg.layout, cfg.seed)
    cache = KVCache(cfg.layers, cfg.layout.n_kv, cfg.layout.d, capacity=seq_len)
    outs = [[] for _ in range(cfg.layers)]
    stats = PrefillStats()
    t_start = time.perf_counter()
    quoka_cfg = cfg.selector if isinstance(cfg.selector, SelectorConfig) else None
    stats.selected = [[] for _ in range(cfg.layers)]
    for ci, start in enumerate(range(0, seq_len, cfg.B_CP)):
        t_chunk = time.perf_counter()
        stop = min(start + cfg.B_CP, seq_len)
        stats.chunk_bounds.append((start, stop))
        measured = predicted = 0
        for layer in range(cfg.layers):
            qc, kc, vc = stream.chunk(layer, start, stop)
            out, selection = attend_with_cache(cache, layer, qc, kc, vc, cfg.layout, hook, chunk_index=ci)
            t_cached = start
            if quoka_cfg is not None and t_cached > 0:
                measured += _quoka_measured_ops(quoka_cfg, cfg.layout, stop - start, t_cached)
                predicted += _quoka_predicted_ops(quoka_cfg, cfg.layout, cfg.B_CP, t_cached)
            cache.append(layer, kc, vc)
            outs[layer].append(out)
            stats.selected[layer].append(selection.budget_used if selection is not None else -1)
        stats.scoring_ops_measured.append(measured)
        stats.scoring_ops_predicted.append(predicted)
        stats.chunk_seconds.append(time.perf_counter() - t_chunk)
    stats.wall_seconds = time.perf_counter() - t_start
    outputs = [np.concatenate(chunks, axis=1) for chunks in outs]
    return outputs, cache, stats


def decode_step(qkv_step, cache: KVCache, cfg: PrefillConfig):
    """Process one position per layer against the running cache.

    ``qkv_step`` is a list of per-layer (q, k, v) arrays of one position
    each.  Query subselection is bypassed naturally (one query never exceeds
    N_Q).  This is exactly the prefill chunk path with B_CP = 1, so driving
    it position by position matches such a prefill bit for bit.
    """
    if len(qkv_step) != cfg.layers:
        raise StreamError(f"step covers {len(qkv_step)} layers, config says {cfg.layers}")
    hook = build_selector(cfg.selector, cfg.layout, cfg.seed)
    position = cache.length(0)
    outs = []
    for layer, (q, k, v) in enumerate(qkv_step):
        out, _ = attend_with_cache(cache, layer, q, k, v, cfg.layout, hook, chunk_index=position)
        cache.append(layer, k, v)
        outs.append(out)
    return outs, cache
