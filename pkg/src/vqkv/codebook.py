"""Codebook training and vector quantization of key states.

Two codebook kinds are supported:

``conventional``
    k-means++ seeding followed by Lloyd iterations on the keys themselves,
    minimising the mean squared reconstruction error.
``query_aware``
    minimises ``E[(k - k_hat) H (k - k_hat)^T]`` where ``H`` is the second
    moment of the (post-PE) queries. With ``H = L L^T`` this is plain k-means
    on ``z = k L``; the whitened codewords ``C_z`` are mapped back with
    ``C = C_z L^{-1}`` and quantization happens in ``z``-space.

Argmin ties are broken by the lowest codeword index.
"""

from __future__ import annotations

import enum
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import CholeskyError, SeededRng, cholesky, solve_lower_triangular

log = logging.getLogger(__name__)

# Rows are processed in blocks so the (rows x codewords) distance tile stays small.
_BLOCK_ELEMS = 1 << 22


class CodebookKind(str, enum.Enum):
    CONVENTIONAL = "conventional"
    QUERY_AWARE = "query_aware"


class EmptyClusterPolicy(str, enum.Enum):
    SPLIT_LARGEST = "split_largest"
    RESAMPLE = "resample"


@dataclass(frozen=True)
class TrainConfig:
    codebook_size: int = 4096
    max_iters: int = 100
    convergence_tol: float = 0.0
    rng: SeededRng = field(default_factory=lambda: SeededRng(0))
    empty_cluster_policy: EmptyClusterPolicy = EmptyClusterPolicy.SPLIT_LARGEST
    h_regularization_eps: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "empty_cluster_policy", EmptyClusterPolicy(self.empty_cluster_policy))
        if self.codebook_size < 2:
            raise ValueError("codebook_size must be >= 2")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.h_regularization_eps < 0:
            raise ValueError("h_regularization_eps must be >= 0")


@dataclass(frozen=True, eq=False)
class Codebook:
    """Codewords in original key space plus, for query-aware kind, ``H`` and its factor."""

    codewords: np.ndarray
    kind: CodebookKind = CodebookKind.CONVENTIONAL
    transform: np.ndarray | None = None
    h_matrix: np.ndarray | None = None
    # Training objective after every Lloyd assignment (J or J').
    history: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", CodebookKind(self.kind))
        cw = np.asarray(self.codewords, dtype=np.float64)
        if cw.ndim != 2 or cw.shape[0] < 1:
            raise ValueError("codewords must be a non-empty 2-D array")
        if not np.all(np.isfinite(cw)):
            raise ValueError("codewords must be finite")
        cw.setflags(write=False)
        object.__setattr__(self, "codewords", cw)
        if self.kind is CodebookKind.QUERY_AWARE:
            if self.transform is None or self.h_matrix is None:
                raise ValueError("query-aware codebook needs transform and h_matrix")
            for name in ("transform", "h_matrix"):
                arr = np.asarray(getattr(self, name), dtype=np.float64)
                if arr.shape != (self.head_dim, self.head_dim):
                    raise ValueError(f"{name} must be {self.head_dim}x{self.head_dim}")
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)
            rel = np.linalg.norm(self.transform @ self.transform.T - self.h_matrix)
            if rel > 1e-7 * np.linalg.norm(self.h_matrix):
                raise ValueError("transform does not factor h_matrix")

    @property
    def size(self) -> int:
        return self.codewords.shape[0]

    @property
    def head_dim(self) -> int:
        return self.codewords.shape[1]

    def whitened(self) -> np.ndarray:
        """Codewords in the space where the quantization metric is Euclidean."""
        if self.kind is CodebookKind.QUERY_AWARE:
            return self.codewords @ self.transform
        return self.codewords

    def to_metric_space(self, keys: np.ndarray) -> np.ndarray:
        if self.kind is CodebookKind.QUERY_AWARE:
            return keys @ self.transform
        return keys


def _as_keys(keys, name="keys") -> np.ndarray:
    arr = np.asarray(keys, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D")
    if np.isnan(arr).any():
        raise ValueError(f"{name} contains NaN")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


# --------------------------------------------------------------------------
# nearest-codeword search
# --------------------------------------------------------------------------

def _nearest(x: np.ndarray, cw: np.ndarray):
    """Index and squared distance of the nearest row of ``cw`` for each row of ``x``.

    Distances are screened with the ``|x|^2 + |c|^2 - 2 x.c`` expansion; rows
    whose runner-up lies within rounding of the winner are re-decided with
    exact differences so the lowest-index tie-break is honoured.
    """
    n, L = len(x), len(cw)
    labels = np.empty(n, dtype=np.int64)
    dist = np.empty(n)
    cc = np.einsum("ij,ij->i", cw, cw)
    step = max(1, _BLOCK_ELEMS // max(L, 1))
    for start in range(0, n, step):
        xb = x[start : start + step]
        xx = np.einsum("ij,ij->i", xb, xb)
        d2 = xx[:, None] + cc[None, :] - 2.0 * (xb @ cw.T)
        best = d2.min(axis=1)
        slack = 1e-9 * (xx + cc.max()) + 1e-300
        ambiguous = (d2 <= (best + slack)[:, None]).sum(axis=1) > 1
        lab = d2.argmin(axis=1)
        for r in np.nonzero(ambiguous)[0]:
            cand = np.nonzero(d2[r] <= best[r] + slack[r])[0]
            diff = xb[r] - cw[cand]
            exact = np.einsum("ij,ij->i", diff, diff)
            lab[r] = cand[np.argmin(exact)]  # argmin returns first => lowest index
        diff = xb - cw[lab]
        labels[start : start + step] = lab
        dist[start : start + step] = np.einsum("ij,ij->i", diff, diff)
    return labels, dist


def _kmeans_pp(x: np.ndarray, k: int, gen: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = gen.integers(n)
    diff = x - x[chosen[0]]
    d2 = np.einsum("ij,ij->i", diff, diff)
    taken = np.zeros(n, dtype=bool)
    taken[chosen[0]] = True
    for c in range(1, k):
        total = d2.sum()
        if total > 0:
            cdf = np.cumsum(d2)
            idx = int(np.searchsorted(cdf, gen.random() * cdf[-1], side="right"))
            idx = min(idx, n - 1)
            while d2[idx] == 0.0:  # guard against landing on a zero-mass row at the edge
                idx -= 1
        else:
            free = np.nonzero(~taken)[0]
            idx = int(free[gen.integers(len(free))])
        chosen[c] = idx
        taken[idx] = True
        diff = x - x[idx]
        np.minimum(d2, np.einsum("ij,ij->i", diff, diff), out=d2)
    return x[chosen].copy()


def _cluster_means(x: np.ndarray, labels: np.ndarray, k: int):
    order = np.argsort(labels, kind="stable")
    sorted_labels = labels[order]
    counts = np.bincount(labels, minlength=k)
    present = np.nonzero(counts)[0]
    starts = np.searchsorted(sorted_labels, present)
    sums = np.add.reduceat(x[order], starts, axis=0)
    means = np.zeros((k, x.shape[1]))
    means[present] = sums / counts[present, None]
    return means, counts


def _fill_empty(x, cw, labels, dist, counts, policy, gen):
    """Give every empty cluster a data point; each move strictly lowers the objective."""
    dist = dist.copy()
    labels = labels.copy()
    counts = counts.copy()
    for e in np.nonzero(counts == 0)[0]:
        if policy is EmptyClusterPolicy.SPLIT_LARGEST:
            big = int(np.argmax(counts))
            members = np.nonzero(labels == big)[0]
            pick = int(members[np.argmax(dist[members])])
        else:
            p = dist / dist.sum() if dist.sum() > 0 else None
            pick = int(gen.choice(len(x), p=p))
        counts[labels[pick]] -= 1
        cw[e] = x[pick]
        labels[pick] = e
        counts[e] = 1
        dist[pick] = 0.0
    return cw


def _lloyd(x: np.ndarray, cfg: TrainConfig):
    k = cfg.codebook_size
    if len(x) < k:
        raise ValueError(f"need at least {k} keys to train {k} codewords, got {len(x)}")
    gen = cfg.rng.generator()
    cw = _kmeans_pp(x, k, gen)
    labels, dist = _nearest(x, cw)
    history = [float(dist.mean())]
    for it in range(cfg.max_iters):
        means, counts = _cluster_means(x, labels, k)
        cw = np.where(counts[:, None] > 0, means, cw)
        if (counts == 0).any():
            cw = _fill_empty(x, cw, labels, dist, counts, cfg.empty_cluster_policy, gen)
        new_labels, dist = _nearest(x, cw)
        history.append(float(dist.mean()))
        changed = int((new_labels != labels).sum())
        labels = new_labels
        if changed == 0:
            break
        prev = history[-2]
        if cfg.convergence_tol > 0 and prev - history[-1] <= cfg.convergence_tol * max(prev, 1e-300):
            break
    log.debug("lloyd finished after %d iterations, objective %.6g", it + 1, history[-1])
    return cw, tuple(history)


# --------------------------------------------------------------------------
# public API
# --------------------------------------------------------------------------

def regularize_h(h, eps: float) -> np.ndarray:
    """``H + eps * (tr(H)/d) * I``: scale-invariant diagonal jitter."""
    h = np.asarray(h, dtype=np.float64)
    d = h.shape[0]
    return h + eps * (np.trace(h) / d) * np.eye(d)


def estimate_h(post_pe_queries, eps: float = 1e-6) -> np.ndarray:
    """Second moment ``(1/m) sum q_i^T q_i`` of the queries, with jitter ``eps``."""
    q = _as_keys(post_pe_queries, "queries")
    m, d = q.shape
    if m == 0:
        raise ValueError("need at least one query row")
    if m < d:
        log.warning("estimating a %dx%d second moment from only %d queries", d, d, m)
    h = (q.T @ q) / m
    h = 0.5 * (h + h.T)
    return regularize_h(h, eps) if eps > 0 else h


def train_conventional(keys, cfg: TrainConfig) -> Codebook:
    x = _as_keys(keys)
    cw, history = _lloyd(x, cfg)
    return Codebook(cw, CodebookKind.CONVENTIONAL, history=history)


def train_query_aware(keys, h, cfg: TrainConfig) -> Codebook:
    """k-means in the space ``z = k L`` where ``H = L L^T``.

    ``h`` is factored as given; only if that fails is it regularised with
    ``cfg.h_regularization_eps`` and factored again.
    """
    x = _as_keys(keys)
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (x.shape[1], x.shape[1]):
        raise ValueError(f"h must be {x.shape[1]}x{x.shape[1]}, got {h.shape}")
    try:
        lower = cholesky(h)
    except CholeskyError:
        if cfg.h_regularization_eps <= 0:
            raise
        log.info("H not positive definite, regularising with eps=%g", cfg.h_regularization_eps)
        h = regularize_h(h, cfg.h_regularization_eps)
        lower = cholesky(h)
    z = x @ lower
    cz, history = _lloyd(z, cfg)
    cw = solve_lower_triangular(lower, cz, side="right")
    return Codebook(cw, CodebookKind.QUERY_AWARE, transform=lower, h_matrix=h, history=history)


def quantize(keys, cb: Codebook) -> np.ndarray:
    """Nearest-codeword index of every key under the codebook's metric."""
    x = _as_keys(keys)
    if x.shape[1] != cb.head_dim:
        raise ValueError(f"key dim {x.shape[1]} != codebook dim {cb.head_dim}")
    labels, _ = _nearest(cb.to_metric_space(x), cb.whitened())
    return labels


def reconstruct(indices, cb: Codebook) -> np.ndarray:
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= cb.size):
        raise IndexError("codeword index out of range")
    return cb.codewords[idx]


def quantization_objective(keys, cb: Codebook, h=None) -> float:
    """Mean ``(k - k_hat) H (k - k_hat)^T``; ``H`` defaults to the codebook's own metric."""
    x = _as_keys(keys)
    err = x - reconstruct(quantize(x, cb), cb)
    if h is None:
        h = cb.h_matrix if cb.kind is CodebookKind.QUERY_AWARE else None
    if h is None:
        return float(np.einsum("ij,ij->", err, err) / len(x))
    return float(np.einsum("ij,jk,ik->", err, np.asarray(h), err) / len(x))


def codebook_similarity(c1: Codebook, c2: Codebook) -> float:
    """Two-way mean of each codeword's best cosine similarity in the other codebook."""
    a, b = c1.codewords, c2.codewords
    if a.shape[1] != b.shape[1]:
        raise ValueError("codebooks have different head_dim")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("zero-norm codeword has no cosine similarity")
    cos = (a / na[:, None]) @ (b / nb[:, None]).T
    return float(0.5 * cos.max(axis=1).mean() + 0.5 * cos.max(axis=0).mean())


def attention_mse(queries, keys, cb: Codebook) -> float:
    """Mean over all (query, key) pairs of ``(q k^T - q k_hat^T)^2``.

    Evaluated as ``mean_j e_j G e_j^T`` with ``G = Q^T Q / m`` and
    ``e_j = k_j - k_hat_j``, which equals the pairwise mean exactly.
    """
    q = _as_keys(queries, "queries")
    x = _as_keys(keys)
    if len(q) == 0 or len(x) == 0:
        raise ValueError("attention_mse needs non-empty queries and keys")
    if q.shape[1] != x.shape[1]:
        raise ValueError("query and key dims differ")
    err = x - reconstruct(quantize(x, cb), cb)
    gram = (q.T @ q) / len(q)
    return float(np.einsum("ij,jk,ik->", err, gram, err) / len(x))


# --------------------------------------------------------------------------
# binary file format
# --------------------------------------------------------------------------
#
# offset  size      field
# 0       4         magic b"KVQC"
# 4       2         version (u16, currently 1)
# 6       1         kind (u8: 0 conventional, 1 query-aware)
# 7       4         head_dim d (u32)
# 11      4         codebook size L (u32)
# 15      4*L*d     codewords, f32 row-major
# then, query-aware only:
#         4*d*d     H, f32 row-major
#         4*d*d     Cholesky factor of H, f32 row-major
# All integers and floats little-endian.

CODEBOOK_MAGIC = b"KVQC"
CODEBOOK_VERSION = 1
_HEADER = struct.Struct("<4sHBII")
_KIND_CODES = {CodebookKind.CONVENTIONAL: 0, CodebookKind.QUERY_AWARE: 1}


def codebook_to_bytes(cb: Codebook) -> bytes:
    parts = [
        _HEADER.pack(CODEBOOK_MAGIC, CODEBOOK_VERSION, _KIND_CODES[cb.kind], cb.head_dim, cb.size),
        cb.codewords.astype("<f4").tobytes(),
    ]
    if cb.kind is CodebookKind.QUERY_AWARE:
        parts.append(cb.h_matrix.astype("<f4").tobytes())
        parts.append(cb.transform.astype("<f4").tobytes())
    return b"".join(parts)


def codebook_from_bytes(data: bytes) -> Codebook:
    if len(data) < _HEADER.size:
        raise ValueError("truncated codebook file")
    magic, version, kind_code, d, size = _HEADER.unpack_from(data)
    if magic != CODEBOOK_MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != CODEBOOK_VERSION:
        raise ValueError(f"unsupported codebook version {version}")
    kind = {v: k for k, v in _KIND_CODES.items()}.get(kind_code)
    if kind is None:
        raise ValueError(f"unknown codebook kind {kind_code}")
    off = _HEADER.size

    def take(count):
        nonlocal off
        end = off + 4 * count
        if end > len(data):
            raise ValueError("truncated codebook file")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).astype(np.float64)
        off = end
        return arr

    codewords = take(size * d).reshape(size, d)
    if kind is CodebookKind.CONVENTIONAL:
        return Codebook(codewords, kind)
    h = take(d * d).reshape(d, d)
    lower = take(d * d).reshape(d, d)
    # f32 storage: rebuild H from the stored factor so the factor invariant holds exactly.
    rebuilt = lower @ lower.T
    if np.linalg.norm(rebuilt - h) > 1e-5 * max(np.linalg.norm(h), 1e-300):
        raise ValueError("stored H and Cholesky factor disagree")
    return Codebook(codewords, kind, transform=lower, h_matrix=rebuilt)


def save_codebook(cb: Codebook, path) -> None:
    Path(path).write_bytes(codebook_to_bytes(cb))


def load_codebook(path) -> Codebook:
    return codebook_from_bytes(Path(path).read_bytes())
