"""Wall-clock scaling: quadratic dense prefill vs near-linear selection.

A budgeted selector does O(budget) attention per chunk plus O(cache)
scoring, so whole-prefill cost grows roughly linearly where dense attention
grows quadratically.  This demo uses a reduced grid; the acceptance suite
probes up to T=32768.
"""

from quoka import HeadLayout, SelectorConfig, complexity_probe

layout = HeadLayout(n_q=2, n_kv=1, d=32)
t_list = [1024, 2048, 4096, 8192]
probe = complexity_probe(t_list, layout, chunk_size=128,
                         arm_specs={"quoka": SelectorConfig(B_SA=512, N_Q=16)},
                         repeats=3, seed=0)

print(f"{'T':>6} | {'dense full prefill':>20} | {'budgeted full prefill':>22}")
for t in t_list:
    d = probe.medians[("dense", "full_prefill")][t]
    s = probe.medians[("quoka", "full_prefill")][t]
    print(f"{t:>6} | {d * 1e3:>17.1f} ms | {s * 1e3:>19.1f} ms")

print(f"\nfitted log-log slopes (upper half of the grid):")
for (arm, mode), slope in sorted(probe.slopes.items()):
    print(f"  {arm:<6} {mode:<13} {slope:.2f}")
print(f"\nspeedup at T={t_list[-1]}: {probe.speedup('quoka'):.1f}x")
