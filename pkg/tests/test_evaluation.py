import time

import numpy as np
import pytest

from kvcompress import (
    CompressionPolicy,
    SynthHeadParams,
    attention_output,
    bench_stage_timings,
    compress_cache,
    compress_head,
    coverage_gap,
    evaluate_cache,
    fidelity,
    gen_cache,
    gen_eval_queries,
    head_redundancy_fast,
    uniform_grid,
)
from kvcompress.compression import CompressedHead
from kvcompress.evaluation import STAGES, mixing_overhead

import oracles
from conftest import make_head

EPS = 1e-6


def manual_compressed(head, retained):
    retained = np.asarray(retained, dtype=np.int64)
    return CompressedHead(
        retained=retained,
        keys=head.keys[retained],
        values=head.values[retained],
        r_bar=0.0,
        scores_used=None,
        budget_effective=len(retained),
    )


class TestAttentionOutput:
    def test_single_pair_returns_its_value(self, rng):
        keys = rng.standard_normal((1, 4))
        values = np.array([[1.0, 2.0, 3.0, 4.0]])
        queries = rng.standard_normal((5, 4))
        out = attention_output(queries, keys, values)
        np.testing.assert_allclose(out, np.tile(values, (5, 1)), atol=1e-12)

    def test_identical_values_convexity(self, rng):
        keys = rng.standard_normal((6, 3))
        values = np.tile([0.5, -1.0, 2.0], (6, 1))
        out = attention_output(rng.standard_normal((4, 3)), keys, values)
        np.testing.assert_allclose(out, np.tile([0.5, -1.0, 2.0], (4, 1)), atol=1e-12)

    def test_empty_keys_rejected(self, rng):
        with pytest.raises(ValueError):
            attention_output(rng.standard_normal((2, 3)), np.zeros((0, 3)), np.zeros((0, 3)))

    def test_matches_loop_oracle(self, rng):
        keys = rng.standard_normal((5, 3))
        values = rng.standard_normal((5, 3))
        queries = rng.standard_normal((2, 3))
        got = attention_output(queries, keys, values)
        for i, q in enumerate(queries):
            probs = oracles.attention_probs(tuple(q), [tuple(k) for k in keys])
            want = sum(p * v for p, v in zip(probs, values))
            np.testing.assert_allclose(got[i], want, atol=1e-9)


class TestFidelity:
    def test_identity_compression_exactly_zero(self, rng):
        head = make_head(rng.standard_normal((12, 4)), rng.standard_normal((12, 4)))
        comp = manual_compressed(head, np.arange(12))
        l2, cos = fidelity(head, comp, rng.standard_normal((6, 4)))
        assert l2 == 0.0
        assert cos == 0.0

    def test_dropping_negligible_key_negligible_error(self):
        # key 3 is anti-aligned with every query: softmax weight ~ e^-40
        keys = np.array([[1, 0, 0, 0], [0.9, 0.1, 0, 0], [0.8, -0.1, 0, 0],
                         [-1, 0, 0, 0]], dtype=np.float32)
        values = np.array([[1, 1, 1, 1], [2, 2, 2, 2], [3, 3, 3, 3],
                           [50, 50, 50, 50]], dtype=np.float32)
        head = make_head(keys, values)
        queries = np.tile([40.0, 0.0, 0.0, 0.0], (4, 1))
        weights_full = attention_output(queries, keys, np.eye(4))
        assert weights_full[:, 3].max() <= 1e-9
        l2, _ = fidelity(head, manual_compressed(head, [0, 1, 2]), queries)
        assert l2 <= 1e-6 * np.linalg.norm(values, axis=1).max()

    def test_peaked_query_single_key_bound(self):
        keys = np.array([[1, 0], [0, 1], [-1, 0]], dtype=np.float32)
        values = np.array([[2.0, 0.5], [-1.0, 3.0], [4.0, 4.0]], dtype=np.float32)
        head = make_head(keys, values)
        queries = np.array([[30.0, 0.0]])
        probs = attention_output(queries, keys, np.eye(3))
        assert probs[0, 0] >= 0.999
        l2, _ = fidelity(head, manual_compressed(head, [0]), queries)
        o_full = attention_output(queries, keys, values)
        assert l2 <= 0.01 * np.linalg.norm(o_full)


class TestCoverageGap:
    def test_retain_all_exactly_zero(self, rng):
        head = make_head(rng.standard_normal((9, 5)))
        assert coverage_gap(head, np.arange(9)) == 0.0

    def test_worked_example_one_third(self):
        head = make_head([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        got = coverage_gap(head, [0])
        assert got == pytest.approx(1.0 / 3.0, abs=1e-6)
        assert got == pytest.approx(
            oracles.coverage_gap([(1, 0), (1, 0), (0, 1)], {0}, EPS), abs=1e-9)

    def test_twin_coverage_zero(self):
        head = make_head([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        assert coverage_gap(head, [0, 2]) == 0.0

    def test_superset_never_worse(self, rng):
        for _ in range(30):
            head = make_head(rng.standard_normal((16, 4)))
            small = sorted(rng.choice(16, size=4, replace=False).tolist())
            extra = sorted(set(small) | set(rng.choice(16, size=4, replace=False).tolist()))
            assert coverage_gap(head, extra) <= coverage_gap(head, small) + 1e-12

    def test_empty_retained_rejected(self, rng):
        with pytest.raises(ValueError):
            coverage_gap(make_head(rng.standard_normal((3, 2))), [])


class TestEvaluateCache:
    def test_identity_rows_zero(self):
        params = SynthHeadParams(seq_len=24, dim=4, n_clusters=3, spread=0.2,
                                 seed=1, window_len=4)
        cache, windows = gen_cache(uniform_grid(params, 1, 2))
        out = compress_cache(cache, windows, CompressionPolicy("snapkv", budget=24, window_len=4))
        report, rows = evaluate_cache(cache, out, gen_eval_queries(params, 8))
        assert report.fidelity_l2 == 0.0
        assert report.coverage_gap == 0.0
        assert report.memory_ratio == 1.0
        assert len(rows) == 2
        assert all(r["memory_ratio"] == 1.0 for r in rows)

    def test_aggregate_is_mean_of_rows(self):
        params = SynthHeadParams(seq_len=32, dim=8, n_clusters=4, spread=0.4,
                                 seed=5, window_len=4)
        cache, windows = gen_cache(uniform_grid(params, 2, 2))
        out = compress_cache(cache, windows,
                             CompressionPolicy("snapkv", mix=True, budget=8, window_len=4))
        report, rows = evaluate_cache(cache, out, gen_eval_queries(params, 8))
        assert report.fidelity_l2 == pytest.approx(
            np.mean([r["fidelity_l2"] for r in rows]))
        assert report.coverage_gap == pytest.approx(
            np.mean([r["coverage_gap"] for r in rows]))


class TestBench:
    def _setup(self, seq_len=256, n_heads=1):
        params = SynthHeadParams(seq_len=seq_len, dim=16, n_clusters=4, spread=0.3,
                                 seed=2, window_len=8)
        cache, windows = gen_cache(uniform_grid(params, 1, n_heads))
        return cache, windows

    def test_mix_off_skips_diversity_and_redundancy(self):
        cache, windows = self._setup()
        timings = bench_stage_timings(
            cache, windows, CompressionPolicy("snapkv", budget=32, window_len=8), 3)
        assert timings.median("diversity") == 0.0
        assert timings.median("redundancy") == 0.0
        assert timings.median("scoring") > 0.0
        assert timings.median("selection") > 0.0

    def test_sample_bookkeeping(self):
        cache, windows = self._setup()
        timings = bench_stage_timings(
            cache, windows, CompressionPolicy("snapkv", mix=True, budget=32, window_len=8), 5)
        for stage in STAGES:
            assert len(timings.samples[stage]) == 5

    def test_repetition_floor(self):
        cache, windows = self._setup()
        with pytest.raises(ValueError):
            bench_stage_timings(
                cache, windows, CompressionPolicy("snapkv", budget=32, window_len=8), 2)

    def test_mixing_overhead_reports_both_runs(self):
        cache, windows = self._setup(seq_len=512)
        ratio, off, on = mixing_overhead(
            cache, windows, CompressionPolicy("snapkv", budget=32, window_len=8), 3)
        assert np.isfinite(ratio)
        assert off.median("diversity") == 0.0
        assert on.median("diversity") > 0.0


class TestTimingScaling:
    def test_doubling_t_roughly_doubles_redundancy_time(self):
        from kvcompress import gen_head

        heads = {}
        for seq_len in (4096, 8192):
            params = SynthHeadParams(seq_len=seq_len, dim=64, n_clusters=8,
                                     spread=0.4, seed=0, window_len=8)
            heads[seq_len], _ = gen_head(params)

        def batch(seq_len, n=20):
            start = time.perf_counter()
            for _ in range(n):
                head_redundancy_fast(heads[seq_len])
            return time.perf_counter() - start

        batch(4096), batch(8192)  # warmup
        # interleave the two sizes so load drift cancels in the ratio
        small, big = [], []
        for _ in range(11):
            small.append(batch(4096))
            big.append(batch(8192))
        ratio = float(np.median(big)) / float(np.median(small))
        assert 1.5 <= ratio <= 3.0, ratio

    def test_stage_times_monotone_in_t(self):
        sizes = [1024 * i for i in range(1, 11)]
        setups = []
        for seq_len in sizes:
            params = SynthHeadParams(seq_len=seq_len, dim=64, n_clusters=4, spread=0.4,
                                     seed=0, window_len=8)
            setups.append(gen_cache(uniform_grid(params, 1, 4)))
        policy = CompressionPolicy("snapkv", mix=True, budget=64, window_len=8)
        # interleaved ladder passes so machine drift straddles all sizes
        samples = {stage: [[] for _ in sizes] for stage in ("scoring", "diversity")}
        for _ in range(4):
            for i, (cache, windows) in enumerate(setups):
                timings = bench_stage_timings(cache, windows, policy, 5)
                for stage in samples:
                    samples[stage][i].extend(timings.samples[stage])
        for stage, per_size in samples.items():
            series = [float(np.median(s)) for s in per_size]
            inversions = sum(series[i + 1] < series[i] for i in range(len(series) - 1))
            assert inversions <= 1, f"{stage}: {series}"
