"""KV-cache compression policies that mix importance with diversity.

The library scores the key/value pairs of multi-head attention caches
(extrinsic attention from an observation window, intrinsic key/value norms,
and key diversity), quantifies per-head semantic redundancy in linear time,
and retains a budgeted subset per head. A synthetic workload generator and
an evaluation harness make the behavior measurable without a real model.
"""

from .cache import (
    DumpFormatError,
    HeadKV,
    KVCache,
    LayerCache,
    LoadedDump,
    ObservationWindow,
    ValidationError,
    Violation,
    cache_from_heads,
    load_dump,
    save_dump,
    validate_cache,
)
from .compression import (
    BASES,
    CompressedCache,
    CompressedHead,
    CompressionPolicy,
    allocate_budgets_adaptive,
    allocate_budgets_pyramid,
    compress_cache,
    compress_head,
    compression_report,
    load_compressed_dump,
    save_compressed_dump,
    score_head,
    top_b_select,
)
from .evaluation import (
    EvalReport,
    StageTimings,
    attention_output,
    bench_stage_timings,
    coverage_gap,
    evaluate_cache,
    fidelity,
    mixing_overhead,
)
from .redundancy import (
    HeadRedundancy,
    head_redundancy_fast,
    head_redundancy_naive,
    mix_scores,
)
from .scoring import (
    DEFAULT_EPS,
    ScoreVector,
    diversity_scores,
    extrinsic_importance,
    integrated_importance,
    knorm_scores,
    match_scale,
    minmax_normalize,
    vnorm_scores,
)
from .synth import (
    SynthHeadParams,
    gen_cache,
    gen_eval_queries,
    gen_head,
    uniform_grid,
)

__version__ = "0.1.0"
