"""Head redundancy across generator regimes, and how it steers the blend.

Run:  python demos/03_redundancy_and_mixing.py
"""

import numpy as np

from kvcompress import (
    SynthHeadParams,
    diversity_scores,
    extrinsic_importance,
    gen_head,
    head_redundancy_fast,
    head_redundancy_naive,
    mix_scores,
)
from kvcompress.cache import HeadKV

print("redundancy r_bar by generator regime (fast path vs T^2 oracle):")
for label, n_clusters, spread in (
    ("one tight cluster ", 1, 0.0),
    ("four tight clusters", 4, 0.1),
    ("four loose clusters", 4, 0.6),
    ("pure noise         ", 64, 1.5),
):
    params = SynthHeadParams(seq_len=512, dim=32, n_clusters=n_clusters,
                             spread=spread, seed=1, window_len=8)
    head, _ = gen_head(params)
    fast = head_redundancy_fast(head)
    naive = head_redundancy_naive(head)
    print(f"  {label}: r_bar={fast.r_bar:.4f}  |fast-naive|={abs(fast.raw - naive.raw):.2e}")

# The blend weight is the redundancy itself: a redundant head leans on
# diversity, a diverse head keeps its importance ranking.
params = SynthHeadParams(seq_len=64, dim=16, n_clusters=2, spread=0.1,
                         hot_clusters=1, query_sharpness=6.0, seed=3, window_len=8)
head, window = gen_head(params)
sub = HeadKV(head.keys[:56], head.values[:56])
s_imp = extrinsic_importance(sub, window)
s_div = diversity_scores(sub)
red = head_redundancy_fast(sub)

print(f"\nblend demo: r_bar={red.r_bar:.3f}")
for r in (0.0, red.r_bar, 1.0):
    mixed = mix_scores(s_imp, s_div, r)
    top = np.argsort(mixed.scores)[-6:][::-1]
    print(f"  weight={r:.3f} -> top positions {top.tolist()}")
print("(weight 0 reproduces the importance ranking exactly; weight 1 the "
      "rescaled diversity ranking)")
