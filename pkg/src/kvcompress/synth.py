"""Synthetic KV-cache generator with controllable redundancy.

Keys are sampled around cluster centers on the unit sphere: few clusters and
a small spread give heads whose keys are highly similar to each other, many
clusters or a large spread give diverse heads. Window queries aim at a
subset of "hot" clusters so extrinsic importance concentrates there, which
is the regime where importance-only selection loses coverage.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .cache import HeadKV, KVCache, ObservationWindow, cache_from_heads

# Stream tag separating evaluation queries from everything the cache holds.
_EVAL_STREAM = 0x45564151


@dataclass(frozen=True)
class SynthHeadParams:
    seq_len: int
    dim: int
    n_clusters: int = 1
    spread: float = 0.0
    value_scale: float = 1.0
    hot_clusters: int = 1
    query_sharpness: float = 1.0
    seed: int = 0
    window_len: int = 32
    group_size: int = 1
    orthonormal_centers: bool = False
    cluster_weights: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        if self.seq_len < 1 or self.dim < 1:
            raise ValueError("seq_len and dim must be >= 1")
        if not 1 <= self.n_clusters <= self.seq_len:
            raise ValueError("need 1 <= n_clusters <= seq_len")
        if self.spread < 0:
            raise ValueError("spread must be >= 0")
        if self.value_scale <= 0:
            raise ValueError("value_scale must be > 0")
        if not 0 <= self.hot_clusters <= self.n_clusters:
            raise ValueError("need 0 <= hot_clusters <= n_clusters")
        if self.query_sharpness <= 0:
            raise ValueError("query_sharpness must be > 0")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")
        if self.window_len < 1:
            raise ValueError("window_len must be >= 1")
        if self.window_len >= self.seq_len:
            raise ValueError("window_len must be < seq_len")
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")
        if self.orthonormal_centers and self.n_clusters > self.dim:
            raise ValueError("orthonormal centers need n_clusters <= dim")
        if self.cluster_weights is not None:
            weights = tuple(float(w) for w in self.cluster_weights)
            if len(weights) != self.n_clusters or any(w <= 0 for w in weights):
                raise ValueError("cluster_weights must give a positive weight per cluster")
            object.__setattr__(self, "cluster_weights", weights)


def _unit_rows(mat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    return mat / np.maximum(norms, 1e-12)


def _block_assignment(params: SynthHeadParams) -> np.ndarray:
    """Cluster of each position: contiguous blocks, sized by cluster_weights.

    Contiguous blocks model how semantically similar tokens arrive together;
    with no weights the blocks are equal.
    """
    t, n = params.seq_len, params.n_clusters
    if params.cluster_weights is None:
        return np.arange(t) * n // t
    cum = np.cumsum(params.cluster_weights, dtype=np.float64)
    bounds = np.rint(cum / cum[-1] * t).astype(np.int64)
    sizes = np.diff(np.concatenate([[0], bounds]))
    if (sizes < 1).any():
        raise ValueError("cluster_weights leave some cluster without positions")
    return np.repeat(np.arange(n), sizes)


def _centers(params: SynthHeadParams, rng: np.random.Generator) -> np.ndarray:
    if params.orthonormal_centers:
        q, _ = np.linalg.qr(rng.standard_normal((params.dim, params.n_clusters)))
        return np.ascontiguousarray(q[:, : params.n_clusters].T)
    return _unit_rows(rng.standard_normal((params.n_clusters, params.dim)))


def _aimed_queries(
    centers: np.ndarray, params: SynthHeadParams, rng: np.random.Generator, n: int
) -> np.ndarray:
    if params.hot_clusters > 0:
        target = centers[np.arange(n) % params.hot_clusters]
        raw = target + params.spread * rng.standard_normal((n, params.dim))
    else:
        raw = rng.standard_normal((n, params.dim))
    return params.query_sharpness * _unit_rows(raw)


def gen_head(
    params: SynthHeadParams, layer_index: int = 0, head_index: int = 0
) -> tuple[HeadKV, ObservationWindow]:
    """Generate one head and its observation window, bit-deterministically.

    The RNG stream is derived from (seed, layer_index, head_index), so a grid
    built from a shared seed still gives every head independent draws.
    """
    rng = np.random.default_rng(
        np.random.SeedSequence([params.seed, layer_index, head_index]))
    centers = _centers(params, rng)
    assign = _block_assignment(params)
    keys = _unit_rows(
        centers[assign] + params.spread * rng.standard_normal((params.seq_len, params.dim)))
    values = params.value_scale * rng.standard_normal((params.seq_len, params.dim))
    queries = _aimed_queries(centers, params, rng, params.window_len * params.group_size)
    head = HeadKV(keys.astype(np.float32), values.astype(np.float32))
    window = ObservationWindow(queries.astype(np.float32), layer_index, head_index)
    return head, window


def gen_cache(
    grid: Sequence[Sequence[SynthHeadParams]],
) -> tuple[KVCache, dict[tuple[int, int], ObservationWindow]]:
    """Generate a full cache with embedded windows from an L x H params grid."""
    if not grid or not all(len(row) and len(row) == len(grid[0]) for row in grid):
        raise ValueError("grid must be a non-empty rectangular layer x head table")
    first = grid[0][0]
    shared = ("seq_len", "dim", "window_len", "group_size")
    for row in grid:
        for p in row:
            if any(getattr(p, name) != getattr(first, name) for name in shared):
                raise ValueError(f"all heads must share {shared}")

    heads, windows = [], {}
    for l, row in enumerate(grid):
        layer_heads = []
        for h, p in enumerate(row):
            head, window = gen_head(p, l, h)
            layer_heads.append(head)
            windows[(l, h)] = window
        heads.append(layer_heads)
    return cache_from_heads(heads, window_len=first.window_len), windows


def uniform_grid(params: SynthHeadParams, n_layers: int, n_heads: int):
    """An L x H grid sharing one parameter set (seed mixing keeps heads distinct)."""
    if n_layers < 1 or n_heads < 1:
        raise ValueError("need n_layers >= 1 and n_heads >= 1")
    return [[params for _ in range(n_heads)] for _ in range(n_layers)]


def gen_eval_queries(params: SynthHeadParams, n_queries: int) -> np.ndarray:
    """Held-out queries drawn by the window recipe from a disjoint seed stream."""
    if n_queries < 1:
        raise ValueError("n_queries must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([params.seed, _EVAL_STREAM]))
    centers = _centers(params, rng)
    return _aimed_queries(centers, params, rng, n_queries).astype(np.float32)


def params_from_dict(raw: dict) -> SynthHeadParams:
    """Build params from a manifest/config mapping, ignoring unknown keys."""
    known = {f for f in SynthHeadParams.__dataclass_fields__}
    return SynthHeadParams(**{k: v for k, v in raw.items() if k in known})


def override_grid(grid, overrides: Sequence[dict]):
    """Apply per-head field overrides ({"layer": l, "head": h, field: value})."""
    grid = [list(row) for row in grid]
    for entry in overrides:
        entry = dict(entry)
        l, h = entry.pop("layer"), entry.pop("head")
        grid[l][h] = replace(grid[l][h], **entry)
    return grid
