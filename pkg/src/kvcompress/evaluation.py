"""What compression costs: attention fidelity, coverage, memory, timings.

Fidelity compares exact attention outputs computed on the full cache
against the retained subset (softmax renormalizes over whatever keys
remain). Coverage measures how well the retained keys span the original
key distribution: the mean, over all original keys, of one minus the best
cosine similarity to any retained key.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, replace
from typing import Mapping, Optional

import numpy as np

from .cache import HeadKV, KVCache, ObservationWindow
from .compression import (
    ATTENTION_BASES,
    CompressedCache,
    CompressedHead,
    CompressionPolicy,
    top_b_select,
)
from .redundancy import mix_scores, redundancy_from_geometry
from .scoring import (
    DEFAULT_EPS,
    diversity_from_geometry,
    extrinsic_importance,
    integrated_importance,
    key_geometry,
    knorm_scores,
    vnorm_scores,
)

STAGES = ("scoring", "diversity", "redundancy", "selection")


def attention_output(queries, keys, values) -> np.ndarray:
    """Exact scaled-dot-product attention, one output row per query."""
    queries = np.asarray(queries, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if keys.shape[0] < 1:
        raise ValueError("attention needs at least one key")
    if queries.shape[1] != keys.shape[1] or keys.shape[0] != values.shape[0]:
        raise ValueError("inconsistent attention shapes")
    logits = queries @ keys.T / np.sqrt(keys.shape[1])
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    return probs @ values


def fidelity(
    head: HeadKV,
    compressed: CompressedHead,
    eval_queries,
    eps: float = DEFAULT_EPS,
) -> tuple[float, float]:
    """Mean L2 and cosine distance between full and compressed attention outputs."""
    full = attention_output(eval_queries, head.keys, head.values)
    comp = attention_output(eval_queries, compressed.keys, compressed.values)
    diff = np.linalg.norm(full - comp, axis=1)
    norms = np.linalg.norm(full, axis=1) * np.linalg.norm(comp, axis=1)
    cos = np.sum(full * comp, axis=1) / np.maximum(norms, eps)
    cos_dist = 1.0 - cos
    # Identical outputs mean cosine exactly 1; don't let rounding say otherwise.
    cos_dist[diff == 0.0] = 0.0
    return float(diff.mean()), float(cos_dist.mean())


def coverage_gap(head: HeadKV, retained, eps: float = DEFAULT_EPS) -> float:
    """Mean over all keys of (1 - best cosine similarity to a retained key)."""
    retained = np.asarray(retained, dtype=np.int64)
    if retained.size == 0:
        raise ValueError("retained set must be non-empty")
    keys = head.keys.astype(np.float64)
    khat = keys / np.maximum(np.linalg.norm(keys, axis=1, keepdims=True), eps)
    best = (khat @ khat[retained].T).max(axis=1)
    gaps = np.maximum(1.0 - best, 0.0)
    gaps[retained] = 0.0  # a retained key covers itself exactly
    return float(gaps.mean())


@dataclass(frozen=True)
class EvalReport:
    """Cache-level means of the per-head metrics.

    ``timings`` carries per-stage medians when the caller benchmarked the
    run; metric tables never include them (they are not deterministic).
    """

    fidelity_l2: float
    fidelity_cos: float
    coverage_gap: float
    memory_ratio: float
    timings: Optional[dict[str, float]] = None


def evaluate_cache(
    cache: KVCache,
    compressed: CompressedCache,
    eval_queries,
    eps: float = DEFAULT_EPS,
) -> tuple[EvalReport, list[dict]]:
    """Evaluate every head; returns the aggregate report and per-head rows."""
    if (compressed.n_layers, compressed.n_heads) != (cache.n_layers, cache.n_heads):
        raise ValueError("compressed cache does not match the source grid")
    if compressed.seq_len != cache.seq_len:
        raise ValueError("compressed cache seq_len does not match the source")
    rows = []
    for l in range(cache.n_layers):
        for h in range(cache.n_heads):
            head = cache.head(l, h)
            chead = compressed.head(l, h)
            fid_l2, fid_cos = fidelity(head, chead, eval_queries, eps)
            rows.append({
                "layer": l,
                "head": h,
                "r_bar": chead.r_bar,
                "fidelity_l2": fid_l2,
                "fidelity_cos": fid_cos,
                "coverage_gap": coverage_gap(head, chead.retained, eps),
                "memory_ratio": chead.n_retained / cache.seq_len,
            })
    report = EvalReport(
        fidelity_l2=sum(r["fidelity_l2"] for r in rows) / len(rows),
        fidelity_cos=sum(r["fidelity_cos"] for r in rows) / len(rows),
        coverage_gap=sum(r["coverage_gap"] for r in rows) / len(rows),
        memory_ratio=compressed.compression_ratio,
    )
    return report, rows


@dataclass(frozen=True)
class StageTimings:
    """Wall-time samples per pipeline stage, one sample per repetition."""

    samples: dict[str, list[float]]

    def median(self, stage: str) -> float:
        return statistics.median(self.samples[stage])

    def total_median(self) -> float:
        return sum(self.median(stage) for stage in STAGES)

    def as_rows(self) -> list[tuple[str, float, list[float]]]:
        return [(stage, self.median(stage), self.samples[stage]) for stage in STAGES]


def stage_overhead(off: StageTimings, on: StageTimings, stage: str) -> float:
    """Relative extra cost of one stage between two benchmark runs."""
    base = off.median(stage)
    return (on.median(stage) - base) / base


def _limit_threads():
    try:
        from threadpoolctl import threadpool_limits
        return threadpool_limits(limits=1)
    except ImportError:  # pragma: no cover - threadpoolctl is a direct dependency
        import contextlib
        return contextlib.nullcontext()


def bench_stage_timings(
    cache: KVCache,
    windows: Optional[Mapping[tuple[int, int], ObservationWindow]],
    policy: CompressionPolicy,
    repetitions: int = 5,
) -> StageTimings:
    """Median wall time per stage over ``repetitions``, single-threaded.

    Each stage is repeated back to back on warmed inputs so a sample
    measures the stage itself, not allocator churn from its neighbors.
    Stages not executed by the policy (diversity and redundancy when the
    blend is off) report zero. The blend arithmetic and the top-k slice are
    counted under "selection"; redundancy reuses the normalized-key
    geometry computed by diversity, so it is timed at its marginal cost.
    """
    if repetitions < 3:
        raise ValueError("repetitions must be >= 3")
    samples = {stage: [0.0] * repetitions for stage in STAGES}
    heads = [(cache.head(l, h), windows[(l, h)] if windows is not None else None)
             for l in range(cache.n_layers) for h in range(cache.n_heads)]
    w = policy.window_len

    def timed(stage, fn):
        out = None
        for r in range(repetitions):
            start = time.perf_counter()
            out = fn()
            samples[stage][r] += time.perf_counter() - start
        return out

    with _limit_threads():
        for head, window in heads:
            t = head.seq_len
            sub = HeadKV(head.keys[: t - w], head.values[: t - w]) if w else head

            def run_scoring():
                if policy.base in ATTENTION_BASES:
                    if policy.intrinsic_kind == "none":
                        return extrinsic_importance(sub, window, policy.pool_size)
                    return integrated_importance(
                        sub, window, policy.intrinsic_kind, policy.eps, policy.pool_size)
                if policy.base == "knorm":
                    return knorm_scores(sub)
                return vnorm_scores(sub)

            def run_diversity():
                keys, norms = key_geometry(sub)
                return keys, norms, diversity_from_geometry(keys, norms, policy.eps)

            s_imp = timed("scoring", run_scoring)
            scores, s_div, red = s_imp, None, None
            if policy.mix:
                keys, norms, s_div = timed("diversity", run_diversity)
                red = timed("redundancy",
                            lambda: redundancy_from_geometry(keys, norms, policy.eps))

            def run_selection():
                ranked = (mix_scores(s_imp, s_div, red, policy.eps)
                          if policy.mix else scores)
                retained = top_b_select(ranked, t, min(policy.budget, t), w)
                return head.keys[retained], head.values[retained]

            timed("selection", run_selection)
    return StageTimings(samples)


def mixing_overhead(
    cache: KVCache,
    windows: Optional[Mapping[tuple[int, int], ObservationWindow]],
    policy: CompressionPolicy,
    repetitions: int = 5,
) -> tuple[float, StageTimings, StageTimings]:
    """Relative extra cost of the blend on identical inputs.

    Runs the stage benchmark with the blend off and on (resetting the
    intrinsic default for each variant) and returns
    (t_on - t_off) / t_off over the total stage medians. The two variants
    are measured in alternating rounds after a warmup pass, so machine-load
    drift hits both sides alike.
    """
    base_off = replace(policy, mix=False, intrinsic_kind=None)
    base_on = replace(policy, mix=True, intrinsic_kind=None)
    bench_stage_timings(cache, windows, base_off, 3)  # warmup, discarded
    bench_stage_timings(cache, windows, base_on, 3)

    half = max(3, (repetitions + 1) // 2)
    rounds = [(bench_stage_timings(cache, windows, base_off, half),
               bench_stage_timings(cache, windows, base_on, half))
              for _ in range(2)]
    off = StageTimings({s: rounds[0][0].samples[s] + rounds[1][0].samples[s]
                        for s in STAGES})
    on = StageTimings({s: rounds[0][1].samples[s] + rounds[1][1].samples[s]
                       for s in STAGES})
    ratio = (on.total_median() - off.total_median()) / off.total_median()
    return ratio, off, on
