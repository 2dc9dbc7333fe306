"""Multi-layer chunked prefill with a selection budget, then decoding.

The engine runs layers as independent attention instances over a shared
chunk schedule, keeps a lossless per-layer cache, and records how many
cached positions each chunk actually attended.  Decoding is the same code
path with one-position chunks, so it continues a prefilled cache exactly.
"""

from quoka import HeadLayout, PrefillConfig, SelectorConfig, decode_step, prefill, random_stream

layout = HeadLayout(n_q=4, n_kv=2, d=16)
T, layers = 40, 3
stream = random_stream(layout, T, layers, seed=7)

cfg = PrefillConfig(B_CP=8, layout=layout, selector=SelectorConfig(B_SA=12, N_Q=4),
                    layers=layers, seed=0)
outputs, cache, stats = prefill(stream, cfg)

print(f"prefilled {T} positions in {len(stats.chunk_bounds)} chunks of {cfg.B_CP}")
print(f"cache length per layer: {[cache.length(i) for i in range(layers)]} (lossless)")
print("attended cached positions per chunk (-1 = no cache yet):")
print(f"  layer 0: {stats.selected[0]}")
print(f"scoring work, measured vs modeled (ops per chunk):")
for i, (m, p) in enumerate(zip(stats.scoring_ops_measured, stats.scoring_ops_predicted)):
    ratio = m / p if p else float("nan")
    print(f"  chunk {i}: {m:>8} vs {p:>8}  (ratio {ratio:.2f})")

# continue generating two positions with the same budget
extra = random_stream(layout, 2, layers, seed=8)
for pos in range(2):
    step = [extra.chunk(layer, pos, pos + 1) for layer in range(layers)]
    outs, cache = decode_step(step, cache, cfg)
print(f"\nafter two decode steps the cache holds {cache.length(0)} positions")
print(f"decode output shape per layer: {outs[0].shape}")
