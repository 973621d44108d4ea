"""Budgeted retention policies over scored KV heads.

A policy names a base scorer (snapkv / knorm / vnorm / pyramidkv / adakv),
whether the importance/diversity blend is applied on top, and the per-head
budget. The trailing observation-window positions never compete: they are
excluded from scoring and retained unconditionally whenever the budget
allows, exactly like the non-window/window split of the underlying methods.

The pyramidkv and adakv budget allocators are documented approximations:
a linear descending layer schedule and a proportional-to-mass head split
with a floor. Both conserve their totals exactly via largest-remainder
rounding (ties resolved toward the lower index).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .cache import (
    DTYPE_TOKEN,
    DUMP_VERSION,
    HeadKV,
    KVCache,
    ObservationWindow,
    DumpFormatError,
    ValidationError,
    read_header,
    validate_cache,
    write_header,
)
from .redundancy import HeadRedundancy, mix_scores, redundancy_from_geometry
from .scoring import (
    DEFAULT_EPS,
    ScoreVector,
    diversity_from_geometry,
    extrinsic_importance,
    integrated_importance,
    key_geometry,
    knorm_scores,
    vnorm_scores,
)

BASES = ("snapkv", "knorm", "vnorm", "pyramidkv", "adakv")
ATTENTION_BASES = frozenset({"snapkv", "pyramidkv", "adakv"})
INTRINSIC_KINDS = ("none", "knorm", "vnorm")


@dataclass(frozen=True)
class CompressionPolicy:
    """Declarative description of scorer, blend flag, and budget allocator.

    ``intrinsic_kind`` defaults to "vnorm" when the blend is on and "none"
    otherwise; pass it explicitly to override (e.g. importance integration
    without the blend).
    """

    base: str
    mix: bool = False
    budget: int = 128
    window_len: int = 32
    eps: float = DEFAULT_EPS
    intrinsic_kind: Optional[str] = None
    pyramid_slope: float = 0.5
    adaptive_floor: Optional[int] = None
    pool_size: int = 0
    allocate_with_mixed_scores: bool = False

    def __post_init__(self):
        if self.base not in BASES:
            raise ValueError(f"unknown base {self.base!r}, expected one of {BASES}")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if self.window_len < 0:
            raise ValueError("window_len must be >= 0")
        if self.intrinsic_kind is None:
            object.__setattr__(self, "intrinsic_kind", "vnorm" if self.mix else "none")
        if self.intrinsic_kind not in INTRINSIC_KINDS:
            raise ValueError(f"unknown intrinsic kind {self.intrinsic_kind!r}")
        if not 0.0 <= self.pyramid_slope <= 1.0:
            raise ValueError("pyramid_slope must lie in [0, 1]")
        if self.adaptive_floor is not None and self.adaptive_floor < self.window_len + 1:
            raise ValueError("adaptive_floor must be >= window_len + 1")

    @property
    def needs_window(self) -> bool:
        return self.base in ATTENTION_BASES

    def to_dict(self) -> dict:
        return {
            "base": self.base,
            "mix": self.mix,
            "budget": self.budget,
            "window_len": self.window_len,
            "eps": self.eps,
            "intrinsic_kind": self.intrinsic_kind,
            "pyramid_slope": self.pyramid_slope,
            "adaptive_floor": self.adaptive_floor,
            "pool_size": self.pool_size,
            "allocate_with_mixed_scores": self.allocate_with_mixed_scores,
        }


@dataclass(frozen=True)
class CompressedHead:
    """Retained positions plus the sliced matrices and audit metadata."""

    retained: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    r_bar: float
    scores_used: Optional[ScoreVector]
    budget_effective: int

    def __post_init__(self):
        idx = np.ascontiguousarray(self.retained, dtype=np.int64)
        idx.setflags(write=False)
        object.__setattr__(self, "retained", idx)

    @property
    def n_retained(self) -> int:
        return self.retained.shape[0]


def top_b_select(
    scores, seq_len: int, budget: int, window_len: int
) -> np.ndarray:
    """Pick retained positions: the whole window plus the top non-window scores.

    ``scores`` covers only the non-window positions (length seq_len -
    window_len). If the budget does not even cover the window, the last
    ``budget`` positions are kept instead. Ties break toward the earlier
    position; the result is sorted ascending.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if window_len >= seq_len:
        raise ValueError("window_len must be < seq_len")
    vec = scores.scores if isinstance(scores, ScoreVector) else np.asarray(scores, dtype=np.float64)
    n_scored = seq_len - window_len
    if vec.shape[0] != n_scored:
        raise ValueError(f"expected {n_scored} scores, got {vec.shape[0]}")
    b = min(budget, seq_len)
    if b <= window_len:
        return np.arange(seq_len - b, seq_len, dtype=np.int64)
    # Stable argsort on negated scores keeps the earlier index first on ties.
    order = np.argsort(-vec, kind="stable")[: b - window_len]
    window = np.arange(seq_len - window_len, seq_len, dtype=np.int64)
    return np.sort(np.concatenate([order.astype(np.int64), window]))


@dataclass(frozen=True)
class _ScoredHead:
    scores: ScoreVector            # what selection ranks on
    importance: ScoreVector        # pre-blend importance (allocator masses)
    redundancy: HeadRedundancy


def _score_with_stats(
    head: HeadKV,
    window: Optional[ObservationWindow],
    policy: CompressionPolicy,
    r_bar: Optional[float] = None,
) -> _ScoredHead:
    t = head.seq_len
    w = policy.window_len
    if w >= t:
        raise ValueError(f"window_len {w} must be < head seq_len {t}")
    sub = HeadKV(head.keys[: t - w], head.values[: t - w]) if w else head

    if policy.base in ATTENTION_BASES:
        if window is None:
            raise ValueError(f"policy base {policy.base!r} needs an observation window")
        if policy.intrinsic_kind == "none":
            s_imp = extrinsic_importance(sub, window, pool_size=policy.pool_size)
        else:
            s_imp = integrated_importance(
                sub, window, policy.intrinsic_kind, policy.eps, policy.pool_size)
    elif policy.base == "knorm":
        s_imp = knorm_scores(sub)
    else:
        s_imp = vnorm_scores(sub)

    if not policy.mix:
        return _ScoredHead(s_imp, s_imp, HeadRedundancy(0.0, 0.0, sub.seq_len))

    keys64, norms = key_geometry(sub)
    red = (HeadRedundancy(float(r_bar), float(r_bar), sub.seq_len)
           if r_bar is not None else redundancy_from_geometry(keys64, norms, policy.eps))
    s_div = diversity_from_geometry(keys64, norms, policy.eps)
    mixed = mix_scores(s_imp, s_div, red, policy.eps)
    return _ScoredHead(mixed, s_imp, red)


def score_head(
    head: HeadKV,
    window: Optional[ObservationWindow],
    policy: CompressionPolicy,
    r_bar: Optional[float] = None,
) -> ScoreVector:
    """Scores for the non-window positions of ``head`` under ``policy``."""
    return _score_with_stats(head, window, policy, r_bar).scores


def _largest_remainder(targets: Sequence[float], total: int) -> list[int]:
    floors = [math.floor(t) for t in targets]
    rems = [t - f for t, f in zip(targets, floors)]
    missing = total - sum(floors)
    if missing < 0:
        raise ValueError("targets exceed the total; cannot round down further")
    order = sorted(range(len(targets)), key=lambda i: (-rems[i], i))
    out = list(floors)
    for i in order[:missing]:
        out[i] += 1
    return out


def allocate_budgets_pyramid(
    n_layers: int, budget: int, slope: float, window_len: int = 0
) -> list[int]:
    """Descending per-layer budgets summing to exactly n_layers * budget.

    Layer l targets budget * (1 + slope * (L-1-2l)/(L-1)); layers that would
    fall below window_len + 1 are pinned there and the remainder is
    redistributed proportionally before largest-remainder rounding.
    """
    if n_layers < 1 or budget < 1:
        raise ValueError("need n_layers >= 1 and budget >= 1")
    if not 0.0 <= slope <= 1.0:
        raise ValueError("slope must lie in [0, 1]")
    floor = window_len + 1
    if budget < floor:
        raise ValueError(
            f"infeasible: total {n_layers * budget} cannot give every layer {floor}")
    if n_layers == 1:
        return [budget]

    total = n_layers * budget
    weights = [1.0 + slope * (n_layers - 1 - 2 * l) / (n_layers - 1) for l in range(n_layers)]
    pinned: list[Optional[float]] = [None] * n_layers
    while True:
        remaining = total - sum(p for p in pinned if p is not None)
        wsum = sum(w for w, p in zip(weights, pinned) if p is None)
        targets = [p if p is not None else remaining * w / wsum
                   for w, p in zip(weights, pinned)]
        low = [i for i, t in enumerate(targets) if pinned[i] is None and t < floor]
        if not low:
            return _largest_remainder(targets, total)
        for i in low:
            pinned[i] = float(floor)


def allocate_budgets_adaptive(
    masses: Sequence[float],
    budget: int,
    floor: int,
    cap: Optional[int] = None,
) -> list[int]:
    """Per-head budgets: floor + a mass-proportional share of the residual.

    Conserves len(masses) * budget exactly. All-zero masses fall back to a
    uniform split. ``cap`` (when given) bounds each head, redistributing the
    excess among the uncapped heads.
    """
    n_heads = len(masses)
    if n_heads < 1:
        raise ValueError("need at least one head")
    if any(m < 0 for m in masses):
        raise ValueError("masses must be >= 0")
    if floor < 1 or floor > budget:
        raise ValueError(f"infeasible floor {floor} for per-head budget {budget}")
    if cap is not None and cap < floor:
        raise ValueError("cap must be >= floor")

    total = n_heads * budget
    if sum(masses) == 0.0:
        return [budget] * n_heads

    pinned: list[Optional[float]] = [None] * n_heads
    while True:
        remaining = total - sum(p for p in pinned if p is not None)
        msum = sum(m for m, p in zip(masses, pinned) if p is None)
        free = remaining - floor * sum(1 for p in pinned if p is None)
        if msum == 0.0 or free < 0:
            targets = [p if p is not None else remaining / sum(1 for q in pinned if q is None)
                       for p in pinned]
        else:
            targets = [p if p is not None else floor + free * m / msum
                       for m, p in zip(masses, pinned)]
        if cap is not None:
            high = [i for i, t in enumerate(targets) if pinned[i] is None and t > cap]
            if high and any(p is None for i, p in enumerate(pinned) if i not in high):
                for i in high:
                    pinned[i] = float(cap)
                continue
            if high:  # everything at the cap; nothing left to absorb the excess
                targets = [float(cap)] * n_heads
                return [int(t) for t in targets]
        return _largest_remainder(targets, total)


def compress_head(
    head: HeadKV,
    window: Optional[ObservationWindow],
    policy: CompressionPolicy,
    budget_override: Optional[int] = None,
    r_bar: Optional[float] = None,
) -> CompressedHead:
    """Score one head and slice out the retained positions."""
    budget = policy.budget if budget_override is None else budget_override
    scored = _score_with_stats(head, window, policy, r_bar)
    effective = min(budget, head.seq_len)
    retained = top_b_select(scored.scores, head.seq_len, effective, policy.window_len)
    return CompressedHead(
        retained=retained,
        keys=head.keys[retained],
        values=head.values[retained],
        r_bar=scored.redundancy.r_bar if policy.mix else 0.0,
        scores_used=scored.scores,
        budget_effective=effective,
    )


@dataclass(frozen=True)
class CompressedCache:
    """Per-head compression results plus the source-cache geometry."""

    heads: tuple[tuple[CompressedHead, ...], ...]
    policy: CompressionPolicy
    seq_len: int
    dim: int
    window_len: int
    budgets: tuple[tuple[int, ...], ...]

    @property
    def n_layers(self) -> int:
        return len(self.heads)

    @property
    def n_heads(self) -> int:
        return len(self.heads[0])

    @property
    def total_retained(self) -> int:
        return sum(ch.n_retained for row in self.heads for ch in row)

    @property
    def compression_ratio(self) -> float:
        return self.total_retained / (self.n_layers * self.n_heads * self.seq_len)

    def r_bar_map(self) -> np.ndarray:
        return np.array([[ch.r_bar for ch in row] for row in self.heads])

    def head(self, layer: int, head: int) -> CompressedHead:
        return self.heads[layer][head]


def _allocation_grid(
    cache: KVCache,
    windows: Optional[Mapping[tuple[int, int], ObservationWindow]],
    policy: CompressionPolicy,
    scored: dict[tuple[int, int], _ScoredHead],
) -> list[list[int]]:
    n_layers, n_heads = cache.n_layers, cache.n_heads
    if policy.base == "pyramidkv":
        per_layer = allocate_budgets_pyramid(
            n_layers, policy.budget, policy.pyramid_slope, policy.window_len)
        return [[per_layer[l]] * n_heads for l in range(n_layers)]
    if policy.base == "adakv":
        floor = policy.adaptive_floor
        if floor is None:
            floor = policy.window_len + 1
        n_candidates = min(policy.budget, cache.seq_len - policy.window_len)
        grid = []
        for l in range(n_layers):
            masses = []
            for h in range(n_heads):
                s = scored[(l, h)]
                vec = (s.scores if policy.allocate_with_mixed_scores else s.importance).scores
                top = np.sort(vec)[-n_candidates:]
                masses.append(float(top.sum()))
            grid.append(allocate_budgets_adaptive(
                masses, policy.budget, floor, cap=cache.seq_len))
        return grid
    return [[policy.budget] * n_heads for _ in range(n_layers)]


def compress_cache(
    cache: KVCache,
    windows: Optional[Mapping[tuple[int, int], ObservationWindow]],
    policy: CompressionPolicy,
    r_bar_table: Optional[np.ndarray] = None,
) -> CompressedCache:
    """Apply the policy's allocator and compress every head of the cache.

    ``r_bar_table`` (an L x H array) substitutes externally computed blend
    weights for the per-head online ones, e.g. weights calibrated offline.
    """
    violations = validate_cache(cache)
    if violations:
        raise ValidationError(
            f"refusing to compress a malformed cache: {violations[0].detail}")
    if policy.window_len != cache.window_len:
        raise ValueError(
            f"policy window_len {policy.window_len} != cache window_len {cache.window_len}")
    if policy.needs_window:
        if windows is None:
            raise ValueError(f"policy base {policy.base!r} needs observation windows")
        missing = [(l, h)
                   for l in range(cache.n_layers) for h in range(cache.n_heads)
                   if (l, h) not in windows]
        if missing:
            raise ValueError(f"missing observation windows for heads {missing[:4]}")

    def external_r(l: int, h: int) -> Optional[float]:
        if r_bar_table is None:
            return None
        return float(r_bar_table[l][h])

    scored = {
        (l, h): _score_with_stats(
            cache.head(l, h),
            windows[(l, h)] if windows is not None else None,
            policy,
            external_r(l, h))
        for l in range(cache.n_layers) for h in range(cache.n_heads)
    }
    budgets = _allocation_grid(cache, windows, policy, scored)

    rows = []
    for l in range(cache.n_layers):
        row = []
        for h in range(cache.n_heads):
            s = scored[(l, h)]
            head = cache.head(l, h)
            effective = min(budgets[l][h], cache.seq_len)
            retained = top_b_select(s.scores, cache.seq_len, effective, policy.window_len)
            row.append(CompressedHead(
                retained=retained,
                keys=head.keys[retained],
                values=head.values[retained],
                r_bar=s.redundancy.r_bar if policy.mix else 0.0,
                scores_used=s.scores,
                budget_effective=effective,
            ))
        rows.append(tuple(row))

    return CompressedCache(
        heads=tuple(rows),
        policy=policy,
        seq_len=cache.seq_len,
        dim=cache.dim,
        window_len=cache.window_len,
        budgets=tuple(tuple(r) for r in budgets),
    )


def compression_report(compressed: CompressedCache) -> str:
    """Per-head retention table with the policy echoed in a comment line."""
    lines = ["# policy " + json.dumps(compressed.policy.to_dict(), sort_keys=True)]
    lines.append("layer\thead\tr_bar\tbudget\tretained")
    for l, row in enumerate(compressed.heads):
        for h, ch in enumerate(row):
            lines.append(f"{l}\t{h}\t{ch.r_bar!r}\t{ch.budget_effective}\t{ch.n_retained}")
    return "\n".join(lines) + "\n"


def save_compressed_dump(
    compressed: CompressedCache,
    path,
    seed: Optional[int] = None,
    labels: Optional[dict] = None,
) -> int:
    """Write a compressed cache in the dump format plus a retained-index section.

    Each head stores its retained indices (uint32 little-endian) followed by
    the sliced key and value rows; ``retained_counts`` in the manifest makes
    the payload length a pure function of the manifest again.
    """
    manifest = {
        "version": DUMP_VERSION,
        "kind": "compressed",
        "L": compressed.n_layers,
        "H": compressed.n_heads,
        "T": compressed.seq_len,
        "D": compressed.dim,
        "window_len": compressed.window_len,
        "W_eff": 0,
        "dtype": DTYPE_TOKEN,
        "seed": seed,
        "labels": labels or {},
        "policy": compressed.policy.to_dict(),
        "retained_counts": [[ch.n_retained for ch in row] for row in compressed.heads],
        "r_bar": [[ch.r_bar for ch in row] for row in compressed.heads],
    }
    written = 0
    with open(path, "wb") as fh:
        written += write_header(fh, manifest)
        for row in compressed.heads:
            for ch in row:
                written += fh.write(ch.retained.astype("<u4").tobytes())
                written += fh.write(np.ascontiguousarray(ch.keys, "<f4").tobytes())
                written += fh.write(np.ascontiguousarray(ch.values, "<f4").tobytes())
    return written


def load_compressed_dump(path) -> tuple[CompressedCache, dict]:
    """Read a compressed dump; returns the cache and its manifest."""
    with open(path, "rb") as fh:
        manifest = read_header(fh)
        payload = fh.read()
    if manifest.get("kind") != "compressed":
        raise DumpFormatError("not a compressed dump (manifest kind != 'compressed')")
    if manifest.get("dtype") != DTYPE_TOKEN:
        raise DumpFormatError(f"unsupported dtype {manifest.get('dtype')!r}")
    try:
        counts = manifest["retained_counts"]
        r_bars = manifest["r_bar"]
        dim = manifest["D"]
        policy = CompressionPolicy(**manifest["policy"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DumpFormatError(f"corrupt compressed-dump manifest: {exc}") from exc
    expected = sum(c * (4 + 2 * dim * 4) for row in counts for c in row)
    if len(payload) != expected:
        raise DumpFormatError(
            f"payload length mismatch: manifest implies {expected} bytes, found {len(payload)}")

    offset = 0
    rows = []
    for l, row_counts in enumerate(counts):
        row = []
        for h, count in enumerate(row_counts):
            retained = np.frombuffer(payload, dtype="<u4", count=count, offset=offset)
            offset += count * 4
            keys = np.frombuffer(payload, dtype="<f4", count=count * dim, offset=offset)
            offset += count * dim * 4
            values = np.frombuffer(payload, dtype="<f4", count=count * dim, offset=offset)
            offset += count * dim * 4
            row.append(CompressedHead(
                retained=retained.astype(np.int64),
                keys=keys.reshape(count, dim),
                values=values.reshape(count, dim),
                r_bar=float(r_bars[l][h]),
                scores_used=None,
                budget_effective=count,
            ))
        rows.append(tuple(row))
    compressed = CompressedCache(
        heads=tuple(rows),
        policy=policy,
        seq_len=manifest["T"],
        dim=dim,
        window_len=manifest["window_len"],
        budgets=tuple(tuple(c for c in row) for row in counts),
    )
    return compressed, manifest
