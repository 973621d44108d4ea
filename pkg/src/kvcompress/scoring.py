"""Per-position importance and diversity scores.

Scores are always returned as float64. Attention math runs in float64; the
key-geometry reductions (norms, weighted means) run as BLAS kernels in the
cache's storage dtype with float64 finishing, which keeps them linear-time
cheap while agreeing with the float64 brute-force oracles well inside the
contracted tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .cache import HeadKV, ObservationWindow

DEFAULT_EPS = 1e-6

SCORE_KINDS = frozenset({
    "extrinsic", "knorm", "vnorm", "intrinsic_scaled",
    "integrated", "diversity_raw", "diversity_scaled", "mixed",
})


@dataclass(frozen=True)
class ScoreVector:
    """Scores for each position of one head, tagged with their provenance."""

    scores: np.ndarray
    kind: str

    def __post_init__(self):
        arr = np.ascontiguousarray(self.scores, dtype=np.float64)
        if arr.ndim != 1 or arr.shape[0] < 1:
            raise ValueError(f"scores must be a non-empty vector, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("scores must be finite")
        if self.kind not in SCORE_KINDS:
            raise ValueError(f"unknown score kind {self.kind!r}")
        arr.setflags(write=False)
        object.__setattr__(self, "scores", arr)

    def __len__(self) -> int:
        return self.scores.shape[0]


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=1, keepdims=True)


def extrinsic_importance(
    head: HeadKV, window: ObservationWindow, pool_size: int = 0
) -> ScoreVector:
    """Mean attention probability each position receives from the window rows.

    Each query row is softmaxed over all positions (scaled by 1/sqrt(dim)),
    then the probability rows are averaged, so the result is itself a
    probability vector over positions. ``pool_size`` optionally smooths the
    averaged scores with a zero-padded moving average (odd kernel); the
    default 0 leaves the plain average untouched.
    """
    if window.dim != head.dim:
        raise ValueError(f"window dim {window.dim} != head dim {head.dim}")
    queries = window.queries.astype(np.float64)
    keys = head.keys.astype(np.float64)
    logits = queries @ keys.T / np.sqrt(head.dim)
    scores = _softmax_rows(logits).mean(axis=0)
    if pool_size:
        if pool_size < 3 or pool_size % 2 == 0:
            raise ValueError("pool_size must be an odd integer >= 3")
        kernel = np.full(pool_size, 1.0 / pool_size)
        scores = np.convolve(scores, kernel, mode="same")
    return ScoreVector(scores, "extrinsic")


def _row_norms(mat: np.ndarray) -> np.ndarray:
    # Squared sums in the storage dtype (a BLAS-speed pass), sqrt in float64.
    return np.sqrt(np.einsum("ij,ij->i", mat, mat).astype(np.float64))


def knorm_scores(head: HeadKV) -> ScoreVector:
    """Negated key norms: low-norm keys score highest."""
    return ScoreVector(-_row_norms(head.keys), "knorm")


def vnorm_scores(head: HeadKV) -> ScoreVector:
    """Value norms, used directly as scores."""
    return ScoreVector(_row_norms(head.values), "vnorm")


def minmax_normalize(
    s: ScoreVector, eps: float = DEFAULT_EPS, kind: Optional[str] = None
) -> ScoreVector:
    """Map scores into [0, 1) via (s - min) / (max - min + eps).

    A constant vector maps to all zeros.
    """
    lo, hi = s.scores.min(), s.scores.max()
    span = hi - lo + eps
    if span == 0.0:
        out = np.zeros_like(s.scores)
    else:
        out = (s.scores - lo) / span
    return ScoreVector(out, kind or s.kind)


def match_scale(
    s_norm: ScoreVector,
    reference_mean: float,
    eps: float = DEFAULT_EPS,
    kind: Optional[str] = None,
) -> ScoreVector:
    """Rescale normalized scores so their mean matches ``reference_mean``.

    Multiplies by reference_mean / (mean + eps); an all-zero vector is a
    fixed point. A positive scalar multiply, so the argsort is preserved.
    """
    scale = reference_mean / (float(s_norm.scores.mean()) + eps)
    return ScoreVector(s_norm.scores * scale, kind or s_norm.kind)


def integrated_importance(
    head: HeadKV,
    window: ObservationWindow,
    intrinsic_kind: str = "vnorm",
    eps: float = DEFAULT_EPS,
    pool_size: int = 0,
) -> ScoreVector:
    """Extrinsic importance plus a normalized, magnitude-matched intrinsic term.

    The intrinsic scores (key norms negated, or value norms) are min-max
    normalized, rescaled to the extrinsic mean, and added elementwise. With
    ``intrinsic_kind="none"`` the extrinsic scores pass through unchanged.
    """
    s_ex = extrinsic_importance(head, window, pool_size=pool_size)
    if intrinsic_kind == "none":
        return ScoreVector(s_ex.scores, "integrated")
    if intrinsic_kind == "knorm":
        raw = knorm_scores(head)
    elif intrinsic_kind == "vnorm":
        raw = vnorm_scores(head)
    else:
        raise ValueError(f"unknown intrinsic kind {intrinsic_kind!r}")
    scaled = match_scale(
        minmax_normalize(raw, eps), float(s_ex.scores.mean()), eps, kind="intrinsic_scaled")
    return ScoreVector(s_ex.scores + scaled.scores, "integrated")


def key_geometry(head: HeadKV) -> tuple[np.ndarray, np.ndarray]:
    """The key matrix in storage dtype plus float64 row norms, shared by the
    key-geometry scores (diversity, redundancy) so the norms happen once."""
    return head.keys, _row_norms(head.keys)


def diversity_scores(head: HeadKV, eps: float = DEFAULT_EPS) -> ScoreVector:
    """Negative cosine similarity of each key against the mean normalized key."""
    return diversity_from_geometry(*key_geometry(head), eps)


def _weighted_mean_row(keys: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Mean of the rows scaled by ``weights``, i.e. the mean normalized key
    when the weights are reciprocal norms. The scaled matrix is never
    materialized: a matvec in the storage dtype does the column sums."""
    w = weights.astype(keys.dtype, copy=False)
    return (keys.T @ w).astype(np.float64) / keys.shape[0]


def diversity_from_geometry(
    keys: np.ndarray, norms: np.ndarray, eps: float = DEFAULT_EPS
) -> ScoreVector:
    weights = 1.0 / (norms + eps)
    mean = _weighted_mean_row(keys, weights)
    dots = (keys @ mean.astype(keys.dtype, copy=False)).astype(np.float64)
    return ScoreVector(-dots * weights, "diversity_raw")
