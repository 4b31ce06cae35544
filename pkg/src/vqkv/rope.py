"""Rotary position embedding (RoPE) and its windowed variant.

Conventions
-----------
* Vectors are rows; a rotation acts as ``x @ R_p``.
* Half-split pairing: dimension ``m`` is paired with ``m + d/2``. Pair ``m``
  rotates by angle ``p * theta_base ** (-2m/d)``::

      out[m]       = x[m] cos(a) - x[m + d/2] sin(a)
      out[m + d/2] = x[m] sin(a) + x[m + d/2] cos(a)

  so with ``d = 2`` and ``a = pi/2`` the row ``[1, 0]`` maps to ``[0, 1]``.
* Positions are 0-based integers and may be negative.

In windowed mode keys are cached unrotated and every query is rotated once by
the fixed bridge offset ``b``. Scores of key ``j`` against a query at
position ``i`` are exact RoPE scores when ``i - j < window`` and
``q R_b k^T`` otherwise.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

#: Marker stored in score matrices for non-causal (j > i) entries.
NON_CAUSAL = -np.inf


class RopeMode(str, enum.Enum):
    STANDARD = "standard"
    WINDOWED = "windowed"


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    theta_base: float = 10000.0
    window: int = 64
    bridge_offset: int = 2048
    mode: RopeMode = RopeMode.STANDARD

    def __post_init__(self):
        object.__setattr__(self, "mode", RopeMode(self.mode))
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ValueError(f"head_dim must be a positive even number, got {self.head_dim}")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.theta_base <= 0:
            raise ValueError("theta_base must be positive")
        if self.bridge_offset < 0:
            raise ValueError("bridge_offset must be non-negative")

    @property
    def windowed(self) -> bool:
        return self.mode is RopeMode.WINDOWED

    def frequencies(self) -> np.ndarray:
        half = self.head_dim // 2
        return self.theta_base ** (-2.0 * np.arange(half) / self.head_dim)


def _angles(positions, cfg: RopeConfig) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.float64)
    return pos[..., None] * cfg.frequencies()


def rotation_matrix(position: int, cfg: RopeConfig) -> np.ndarray:
    """Explicit ``d x d`` matrix ``R_p`` such that ``x @ R_p`` rotates ``x``."""
    half = cfg.head_dim // 2
    ang = _angles(position, cfg)
    cos, sin = np.cos(ang), np.sin(ang)
    m = np.arange(half)
    r = np.zeros((cfg.head_dim, cfg.head_dim))
    r[m, m] = cos
    r[m + half, m + half] = cos
    r[m + half, m] = -sin
    r[m, m + half] = sin
    return r


def apply_rotation(x, positions, cfg: RopeConfig) -> np.ndarray:
    """Rotate rows of ``x`` by their positions.

    ``x`` has shape ``(..., d)``; ``positions`` is a scalar or broadcasts
    against the leading dimensions of ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] % 2:
        raise ValueError("rotation needs an even-length row")
    if x.shape[-1] != cfg.head_dim:
        raise ValueError(f"row length {x.shape[-1]} != head_dim {cfg.head_dim}")
    half = cfg.head_dim // 2
    ang = _angles(positions, cfg)
    cos, sin = np.cos(ang), np.sin(ang)
    lo, hi = x[..., :half], x[..., half:]
    return np.concatenate([lo * cos - hi * sin, lo * sin + hi * cos], axis=-1)


def relative_rotation_check(i: int, j: int, cfg: RopeConfig) -> float:
    """Max abs deviation between ``R_i R_j^T`` and ``R_{i-j}``."""
    lhs = rotation_matrix(i, cfg) @ rotation_matrix(j, cfg).T
    return float(np.abs(lhs - rotation_matrix(i - j, cfg)).max())


def _check_pair(queries: np.ndarray, keys: np.ndarray, cfg: RopeConfig) -> None:
    if queries.ndim != 2 or keys.ndim != 2:
        raise ValueError("queries and keys must be 2-D")
    if queries.shape[1] != keys.shape[1] or queries.shape[1] != cfg.head_dim:
        raise ValueError(
            f"dimension mismatch: queries {queries.shape}, keys {keys.shape}, head_dim {cfg.head_dim}"
        )


def post_pe_states(queries, keys, cfg: RopeConfig):
    """Post-PE queries and keys for a sequence whose row ``r`` sits at position ``r``."""
    queries = np.asarray(queries, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    _check_pair(queries, keys, cfg)
    if cfg.windowed:
        return apply_rotation(queries, cfg.bridge_offset, cfg), keys.copy()
    return (
        apply_rotation(queries, np.arange(len(queries)), cfg),
        apply_rotation(keys, np.arange(len(keys)), cfg),
    )


def post_pe_query(query, position: int, cfg: RopeConfig | None) -> np.ndarray:
    """Query as seen by the codebook: rotated by its position, or by ``b`` when windowed."""
    query = np.asarray(query, dtype=np.float64)
    if cfg is None:
        return query
    return apply_rotation(query, cfg.bridge_offset if cfg.windowed else position, cfg)


def post_pe_keys(keys, positions, cfg: RopeConfig | None) -> np.ndarray:
    """Keys in the form they are cached in (unrotated when windowed)."""
    keys = np.asarray(keys, dtype=np.float64)
    if cfg is None or cfg.windowed:
        return keys
    return apply_rotation(keys, positions, cfg)


def query_scores(query, position: int, cached_keys, cfg: RopeConfig | None, key_positions=None):
    """Pre-softmax scores of one query against cached (post-PE) keys.

    ``query`` is the pre-PE query at ``position``. ``cached_keys`` are in the
    form returned by :func:`post_pe_keys`; ``key_positions`` defaults to
    ``0..n-1``. With ``cfg=None`` both sides are used as given.
    """
    query = np.asarray(query, dtype=np.float64)
    cached_keys = np.asarray(cached_keys, dtype=np.float64)
    if cfg is None:
        return cached_keys @ query
    if key_positions is None:
        key_positions = np.arange(len(cached_keys))
    key_positions = np.asarray(key_positions)
    if not cfg.windowed:
        return cached_keys @ apply_rotation(query, position, cfg)
    scores = cached_keys @ apply_rotation(query, cfg.bridge_offset, cfg)
    rel = position - key_positions
    local = np.nonzero(rel < cfg.window)[0]
    if local.size:
        # One rotated copy of the query per local key: q R_{i-j} k_j^T.
        rq = apply_rotation(np.broadcast_to(query, (local.size, cfg.head_dim)), rel[local], cfg)
        scores[local] = np.einsum("ij,ij->i", rq, cached_keys[local])
    return scores


def score_matrix(queries, keys, cfg: RopeConfig, query_positions=None, key_positions=None):
    """Pre-softmax scores ``u[i, j]`` (no ``1/sqrt(d)``) for pre-PE inputs.

    Non-causal entries (key position after query position) hold
    :data:`NON_CAUSAL`. Positions default to row indices.
    """
    queries = np.asarray(queries, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    _check_pair(queries, keys, cfg)
    qpos = np.arange(len(queries)) if query_positions is None else np.asarray(query_positions)
    kpos = np.arange(len(keys)) if key_positions is None else np.asarray(key_positions)
    rel = qpos[:, None] - kpos[None, :]
    causal = rel >= 0

    if cfg.windowed:
        scores = apply_rotation(queries, cfg.bridge_offset, cfg) @ keys.T
        qi, kj = np.nonzero(causal & (rel < cfg.window))
        if qi.size:
            rq = apply_rotation(queries[qi], rel[qi, kj], cfg)
            scores[qi, kj] = np.einsum("ij,ij->i", rq, keys[kj])
    else:
        scores = apply_rotation(queries, qpos, cfg) @ apply_rotation(keys, kpos, cfg).T
    scores[~causal] = NON_CAUSAL
    return scores
