"""Head-level semantic redundancy and the importance/diversity blend.

The redundancy of a head is the average cosine similarity over all ordered
off-diagonal pairs of its normalized keys. Because the total pairwise
similarity equals the squared norm of the summed normalized keys, it can be
computed from the mean key alone in one O(seq_len * dim) pass; the explicit
O(seq_len^2) similarity matrix survives only as a test oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .cache import HeadKV
from .scoring import (
    DEFAULT_EPS,
    ScoreVector,
    _weighted_mean_row,
    key_geometry,
    match_scale,
    minmax_normalize,
)

NAIVE_SEQ_LEN_CEILING = 4096


@dataclass(frozen=True)
class HeadRedundancy:
    """Clamped blend weight plus the raw off-diagonal mean it came from."""

    r_bar: float
    raw: float
    seq_len: int

    def __post_init__(self):
        if not 0.0 <= self.r_bar <= 1.0:
            raise ValueError("r_bar must lie in [0, 1]")


def head_redundancy_fast(head: HeadKV, eps: float = DEFAULT_EPS) -> HeadRedundancy:
    """Off-diagonal mean cosine similarity via the mean-key identity, O(T*D)."""
    return redundancy_from_geometry(*key_geometry(head), eps)


def redundancy_from_geometry(
    keys: np.ndarray, norms: np.ndarray, eps: float = DEFAULT_EPS
) -> HeadRedundancy:
    t = keys.shape[0]
    if t == 1:
        return HeadRedundancy(0.0, 0.0, 1)
    # Unit rows via max(norm, eps) so healthy keys normalize exactly; the
    # mean normalized key is a weighted column sum, no T x D temporary.
    weights = 1.0 / np.maximum(norms, eps)
    mean = _weighted_mean_row(keys, weights)
    raw = (t * t * float(mean @ mean) - t) / (t * (t - 1))
    return HeadRedundancy(min(1.0, max(0.0, raw)), raw, t)


def head_redundancy_naive(
    head: HeadKV, eps: float = DEFAULT_EPS, max_seq_len: int = NAIVE_SEQ_LEN_CEILING
) -> HeadRedundancy:
    """Brute-force oracle: build the full similarity matrix and average it.

    Test-only path; refuses sequences longer than ``max_seq_len`` to avoid
    accidental quadratic blowups.
    """
    t = head.seq_len
    if t > max_seq_len:
        raise ValueError(f"naive oracle refuses seq_len {t} > ceiling {max_seq_len}")
    if t == 1:
        return HeadRedundancy(0.0, 0.0, 1)
    keys = head.keys.astype(np.float64)
    khat = keys / np.maximum(np.linalg.norm(keys, axis=1, keepdims=True), eps)
    sim = khat @ khat.T
    raw = float(sim.sum() - np.trace(sim)) / (t * (t - 1))
    return HeadRedundancy(min(1.0, max(0.0, raw)), raw, t)


def mix_scores(
    s_imp: ScoreVector,
    s_div_raw: ScoreVector,
    redundancy: Union[HeadRedundancy, float],
    eps: float = DEFAULT_EPS,
) -> ScoreVector:
    """Blend importance with rescaled diversity, weighted by redundancy.

    The raw diversity scores are min-max normalized, rescaled to match the
    importance mean, and combined as (1 - r) * importance + r * diversity.
    At r = 0 the output equals the importance scores exactly; at r = 1 it
    equals the rescaled diversity exactly.
    """
    if len(s_imp) != len(s_div_raw):
        raise ValueError(
            f"score length mismatch: importance {len(s_imp)} vs diversity {len(s_div_raw)}")
    r = redundancy.r_bar if isinstance(redundancy, HeadRedundancy) else float(redundancy)
    if not 0.0 <= r <= 1.0:
        raise ValueError("blend weight must lie in [0, 1]")
    scaled = match_scale(
        minmax_normalize(s_div_raw, eps), float(s_imp.scores.mean()), eps,
        kind="diversity_scaled")
    return ScoreVector((1.0 - r) * s_imp.scores + r * scaled.scores, "mixed")
