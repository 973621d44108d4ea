"""Measure the linear-time redundancy path and the cost of the blend.

Run:  python demos/05_performance.py
"""

import statistics
import time

from threadpoolctl import threadpool_limits

from kvcompress import (
    CompressionPolicy,
    SynthHeadParams,
    gen_cache,
    gen_head,
    head_redundancy_fast,
    head_redundancy_naive,
    mixing_overhead,
    uniform_grid,
)


def median_ms(fn, reps=7, batch=10):
    samples = []
    for _ in range(reps):
        start = time.perf_counter()
        for _ in range(batch):
            fn()
        samples.append((time.perf_counter() - start) / batch)
    return statistics.median(samples) * 1e3


print("redundancy wall time, fast mean-key path vs T^2 similarity matrix:")
with threadpool_limits(limits=1):
    for seq_len in (1024, 2048, 4096, 8192):
        params = SynthHeadParams(seq_len=seq_len, dim=64, n_clusters=8,
                                 spread=0.4, seed=0, window_len=32)
        head, _ = gen_head(params)
        fast = median_ms(lambda: head_redundancy_fast(head))
        naive = median_ms(
            lambda: head_redundancy_naive(head, max_seq_len=8192), reps=3, batch=1)
        print(f"  T={seq_len:<6} fast={fast:8.3f} ms   naive={naive:10.2f} ms   "
              f"naive/fast={naive / fast:8.1f}x")

print("\nblend overhead on one 4-head cache at T=8192 (median stage times):")
params = SynthHeadParams(seq_len=8192, dim=64, n_clusters=8, spread=0.4,
                         seed=0, window_len=32)
cache, windows = gen_cache(uniform_grid(params, 1, 4))
policy = CompressionPolicy("snapkv", budget=64, window_len=32)
ratio, off, on = mixing_overhead(cache, windows, policy, repetitions=5)
for label, timings in (("blend off", off), ("blend on ", on)):
    stages = "  ".join(f"{stage}={timings.median(stage) * 1e3:7.3f}ms"
                       for stage in ("scoring", "diversity", "redundancy", "selection"))
    print(f"  {label}: {stages}")
print(f"  overall mixing overhead ratio: {ratio:.3f}")
