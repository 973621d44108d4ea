"""Tour of the per-position scorers on one head.

Run:  python demos/02_scoring_tour.py
"""

import numpy as np

from kvcompress import (
    SynthHeadParams,
    diversity_scores,
    extrinsic_importance,
    gen_head,
    integrated_importance,
    knorm_scores,
    minmax_normalize,
    match_scale,
    vnorm_scores,
)

params = SynthHeadParams(seq_len=24, dim=16, n_clusters=3, spread=0.2,
                         hot_clusters=1, query_sharpness=4.0, seed=7, window_len=4)
head, window = gen_head(params)

# Extrinsic importance: how much attention each position receives from the
# window queries. A probability vector over positions.
s_ex = extrinsic_importance(head, window)
print(f"extrinsic: sum={s_ex.scores.sum():.6f} "
      f"top3={np.argsort(s_ex.scores)[-3:][::-1].tolist()}")

# Intrinsic importance from vector geometry alone. Synthetic keys are unit
# norm by construction, so knorm is flat here; values are not normalized.
print(f"knorm (negated key norms): range "
      f"[{knorm_scores(head).scores.min():.3f}, {knorm_scores(head).scores.max():.3f}]")
print(f"vnorm (value norms):       range "
      f"[{vnorm_scores(head).scores.min():.3f}, {vnorm_scores(head).scores.max():.3f}]")

# The integration recipe: min-max normalize the intrinsic scores, rescale
# them to the extrinsic mean, then add. Both terms end up the same size.
s_int = integrated_importance(head, window, intrinsic_kind="vnorm")
scaled = match_scale(minmax_normalize(vnorm_scores(head)), float(s_ex.scores.mean()))
print(f"\nintegrated = extrinsic + scaled vnorm")
print(f"  mean extrinsic    {s_ex.scores.mean():.6f}")
print(f"  mean scaled vnorm {scaled.scores.mean():.6f}")
print(f"  reconstruction max err "
      f"{np.abs(s_int.scores - s_ex.scores - scaled.scores).max():.2e}")

# Diversity: negative cosine against the mean normalized key. Positions far
# from the head's dominant direction score high.
s_div = diversity_scores(head)
print(f"\ndiversity: range [{s_div.scores.min():.3f}, {s_div.scores.max():.3f}], "
      f"most distinctive position {int(s_div.scores.argmax())}")
