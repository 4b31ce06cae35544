"""Exact attention, codebook-based score approximation and top-K selection.

Query rows passed to :func:`exact_attention` and :func:`selective_attention`
are *pre-PE*; keys are in cached (post-PE) form, see
:func:`vqkv.rope.post_pe_keys`. The ``cfg`` argument decides how scores are
formed (standard RoPE, windowed RoPE, or ``None`` for a raw dot product).

Ranking scores never carry the ``1/sqrt(d)`` factor; only the softmax does.
Everywhere, equal scores are ordered by lower token index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .codebook import Codebook
from .rope import RopeConfig, query_scores


@dataclass(frozen=True)
class RetrievalPolicy:
    topk_fraction: float = 0.03
    sentinel_tokens: int = 4
    recent_tokens: int = 64

    def __post_init__(self):
        if not 0.0 < self.topk_fraction <= 1.0:
            raise ValueError("topk_fraction must lie in (0, 1]")
        if self.sentinel_tokens < 0 or self.recent_tokens < 0:
            raise ValueError("static preservation counts must be non-negative")

    def topk_count(self, n: int) -> int:
        # round() first: 0.3 * 10 is 3.0000000000000004 in binary floating point.
        return max(1, min(n, math.ceil(round(self.topk_fraction * n, 9))))


@dataclass(frozen=True, eq=False)
class SelectionResult:
    selected_indices: np.ndarray
    approx_scores: np.ndarray
    exact_recall: float | None = None

    def __len__(self):
        return len(self.selected_indices)


def _softmax_output(logits: np.ndarray, values: np.ndarray, scale: float) -> np.ndarray:
    z = logits * scale
    z = z - z.max()
    w = np.exp(z)
    w /= w.sum()
    return w @ values


def _check_kv(keys, values):
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if keys.ndim != 2 or values.ndim != 2 or len(keys) != len(values):
        raise ValueError("keys and values must be 2-D with the same row count")
    if len(keys) == 0:
        raise ValueError("attention over an empty cache")
    return keys, values


def exact_attention(query_row, keys, values, cfg: RopeConfig | None = None, position: int | None = None):
    """``softmax(u / sqrt(d)) V`` over the whole cache.

    ``position`` is the query's position and defaults to the last cached token.
    """
    keys, values = _check_kv(keys, values)
    if position is None:
        position = len(keys) - 1
    logits = query_scores(query_row, position, keys, cfg)
    return _softmax_output(logits, values, 1.0 / math.sqrt(keys.shape[1]))


def approx_scores(post_pe_query, indices, cb: Codebook) -> np.ndarray:
    """Approximate scores ``q . c_{s_j}``: one query-by-codebook product, then a gather."""
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= cb.size):
        raise IndexError("codeword index out of range")
    table = cb.codewords @ np.asarray(post_pe_query, dtype=np.float64)
    return table[idx]


def _topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    # Stable sort on -score keeps lower indices first among equal scores.
    order = np.argsort(-scores, kind="stable")
    return order[:k]


def select_topk(scores, n: int, policy: RetrievalPolicy) -> SelectionResult:
    """Top ``ceil(fraction * n)`` tokens united with the sentinel and recent tokens."""
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != n:
        raise ValueError(f"scores has length {len(scores)}, expected {n}")
    if n == 0:
        return SelectionResult(np.empty(0, dtype=np.int64), scores)
    if policy.sentinel_tokens + policy.recent_tokens >= n:
        return SelectionResult(np.arange(n), scores)
    keep = np.zeros(n, dtype=bool)
    keep[_topk_indices(scores, policy.topk_count(n))] = True
    keep[: policy.sentinel_tokens] = True
    if policy.recent_tokens:
        keep[n - policy.recent_tokens :] = True
    return SelectionResult(np.nonzero(keep)[0], scores)


def selective_attention(query_row, selection, keys, values, cfg: RopeConfig | None = None, position: int | None = None):
    """Exact attention restricted to the selected rows, renormalised over the subset."""
    keys, values = _check_kv(keys, values)
    idx = selection.selected_indices if isinstance(selection, SelectionResult) else np.asarray(selection)
    if len(idx) == 0:
        raise ValueError("empty selection")
    if idx.min() < 0 or idx.max() >= len(keys):
        raise IndexError("selected index out of range")
    if position is None:
        position = len(keys) - 1
    return gathered_attention(query_row, keys[idx], values[idx], idx, cfg, position)


def gathered_attention(query_row, keys, values, key_positions, cfg: RopeConfig | None, position: int):
    """Attention over already-gathered rows whose original positions are ``key_positions``."""
    logits = query_scores(query_row, position, keys, cfg, key_positions=key_positions)
    return _softmax_output(logits, values, 1.0 / math.sqrt(keys.shape[1]))


def recall_at_k(approx, exact, k: int) -> float:
    """Fraction of the exact top-``k`` tokens that the approximate top-``k`` recovers."""
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    if approx.shape != exact.shape:
        raise ValueError("score vectors differ in length")
    if k <= 0:
        raise ValueError("k must be positive")
    if k > len(exact):
        raise ValueError("k exceeds the number of tokens")
    hit = np.intersect1d(_topk_indices(approx, k), _topk_indices(exact, k))
    return len(hit) / k
